"""Massive-activation detection on captured edge activations.

Each captured layer/batch tensor is normalized by the median absolute
value over all of its entries; entries whose ratio strictly exceeds the
threshold (1000 by default) are flagged as massive.  Per-batch maxima are
compared against the range produced by an untrained reference model, and
the per-layer distribution of ``-log10(ratio)`` is summarized by a gamma
fit and its Kolmogorov-Smirnov distance.
"""

from __future__ import annotations

import io
import json
import math
import struct
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import CaptureFormatError, NumericalError, ValidationError
from .graphs import Dataset, atomic_write_bytes
from .model import ActivationRecord, ModelConfig, ModelParams, model_forward
from .stats import GammaFit, gamma_mle_fit, ks_statistic

MAGIC = b"MACAP1"
DEFAULT_THRESHOLD = 1000.0


@dataclass
class AnalysisConfig:
    """Detection settings.  ``max_graphs`` caps how many dataset graphs
    (in file order) are captured; ``None`` means all of them."""

    threshold: float = DEFAULT_THRESHOLD
    batch_size: int = 1
    bins: int = 100
    log_base: float = 10.0
    max_graphs: int | None = None

    def __post_init__(self):
        if not self.threshold > 1:
            raise ValidationError(f"threshold must exceed 1, got {self.threshold}")
        if self.batch_size < 1 or self.bins < 1:
            raise ValidationError("analysis batch_size and bins must be >= 1")
        if not self.log_base > 1:
            raise ValidationError("log_base must exceed 1")
        if self.max_graphs is not None and self.max_graphs < 1:
            raise ValidationError("max_graphs must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "AnalysisConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown analysis config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


# --- capture -------------------------------------------------------------------

def capture_activations(ds: Dataset, params: ModelParams, config: ModelConfig,
                        batch_size: int = 1, run_id: str = "run",
                        indices: Sequence[int] | None = None) -> list[ActivationRecord]:
    """Forward ``ds`` in order in batches of ``batch_size`` graphs and return
    the edge-activation records in (batch, layer) order.  Edge graph ids are
    dataset indices."""
    from .graphs import batch_graphs

    if batch_size < 1:
        raise ValidationError("analysis batch size must be >= 1")
    idx = np.arange(len(ds)) if indices is None else np.asarray(indices)
    records = []
    for b, start in enumerate(range(0, len(idx), batch_size)):
        chunk = idx[start:start + batch_size]
        batch = batch_graphs([ds.graphs[i] for i in chunk], ds.num_edge_types)
        if batch.num_edges == 0:
            continue
        _, recs = model_forward(batch, params, config, capture=True, run_id=run_id,
                                batch_index=b, graph_ids=chunk)
        records.extend(recs)
    return records


def write_capture(path, records: Sequence[ActivationRecord], run_id: str | None = None) -> None:
    """MACAP1 file: magic, little-endian uint32 header length, JSON header,
    then per record float32 activations, int32 edge types, int32 graph ids.
    ``byte_offset`` in the header counts from the start of the payload."""
    if not records:
        raise ValidationError("no activation records to write")
    heads, head_dim = records[0].num_heads, records[0].head_dim
    payload = io.BytesIO()
    entries = []
    for r in records:
        if (r.num_heads, r.head_dim) != (heads, head_dim):
            raise ValidationError("records disagree on heads/head_dim")
        entries.append({"batch": int(r.batch_index), "layer": int(r.layer),
                        "num_edges": int(r.num_edges), "byte_offset": payload.tell()})
        payload.write(np.ascontiguousarray(r.activations, dtype="<f4").tobytes())
        payload.write(np.ascontiguousarray(r.edge_types, dtype="<i4").tobytes())
        payload.write(np.ascontiguousarray(r.edge_graph, dtype="<i4").tobytes())
    header = {
        "run_id": run_id if run_id is not None else records[0].run_id,
        "layers": int(max(r.layer for r in records) + 1),
        "heads": int(heads),
        "head_dim": int(head_dim),
        "records": entries,
    }
    hbytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    atomic_write_bytes(path, MAGIC + struct.pack("<I", len(hbytes)) + hbytes + payload.getvalue())


def read_capture(path) -> tuple[dict, list[ActivationRecord]]:
    """Decode a MACAP1 file.  Activations come back as float64."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:6] != MAGIC:
        raise CaptureFormatError(f"{path}: bad magic bytes at offset 0")
    if len(data) < 10:
        raise CaptureFormatError(f"{path}: truncated header length at offset 6")
    (hlen,) = struct.unpack("<I", data[6:10])
    if len(data) < 10 + hlen:
        raise CaptureFormatError(
            f"{path}: header needs bytes [10, {10 + hlen}) but file ends at offset {len(data)}")
    try:
        header = json.loads(data[10:10 + hlen].decode("utf-8"))
        heads, head_dim = int(header["heads"]), int(header["head_dim"])
        entries = header["records"]
        run_id = str(header.get("run_id", ""))
    except (ValueError, KeyError, TypeError) as exc:
        raise CaptureFormatError(f"{path}: malformed header at offset 10: {exc}") from exc
    base = 10 + hlen
    records = []
    for k, e in enumerate(entries):
        n_e = int(e["num_edges"])
        start = base + int(e["byte_offset"])
        act_bytes = 4 * n_e * heads * head_dim
        end = start + act_bytes + 8 * n_e
        if end > len(data):
            raise CaptureFormatError(
                f"{path}: record {k} (batch {e['batch']}, layer {e['layer']}) needs bytes "
                f"[{start}, {end}) but file ends at offset {len(data)}")
        acts = np.frombuffer(data, dtype="<f4", count=n_e * heads * head_dim, offset=start)
        types = np.frombuffer(data, dtype="<i4", count=n_e, offset=start + act_bytes)
        gids = np.frombuffer(data, dtype="<i4", count=n_e, offset=start + act_bytes + 4 * n_e)
        records.append(ActivationRecord(run_id, int(e["batch"]), int(e["layer"]),
                                        acts.astype(np.float64).reshape(n_e, heads, head_dim),
                                        types.astype(np.int64), gids.astype(np.int64)))
    return header, records


# --- ratios and flags ------------------------------------------------------------

@dataclass
class RatioStats:
    layer: int
    batch: int
    ratios: np.ndarray
    edge_median: float
    max_ratio: float


def _values(rec) -> np.ndarray:
    return np.asarray(rec.activations if isinstance(rec, ActivationRecord) else rec, dtype=np.float64)


def edge_median(rec: ActivationRecord | np.ndarray) -> float:
    """Median of ``|a|`` over every scalar entry (edges x heads x dims)."""
    a = _values(rec)
    if a.size == 0:
        raise ValidationError("empty activation record")
    med = float(np.median(np.abs(a)))
    if not med > 0:
        raise NumericalError("edge median is zero (degenerate layer)")
    return med


def activation_ratios(rec: ActivationRecord | np.ndarray, layer: int | None = None,
                      batch: int | None = None) -> RatioStats:
    """``|a| / median(|edge activations|)`` entrywise."""
    a = _values(rec)
    med = edge_median(a)
    ratios = np.abs(a) / med
    if isinstance(rec, ActivationRecord):
        layer = rec.layer if layer is None else layer
        batch = rec.batch_index if batch is None else batch
    return RatioStats(layer or 0, batch or 0, ratios, med, float(ratios.max()))


def flag_massive(rs: RatioStats | np.ndarray, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Boolean mask of entries with ``ratio > threshold`` (strict)."""
    if not threshold > 1:
        raise ValidationError(f"threshold must exceed 1, got {threshold}")
    ratios = rs.ratios if isinstance(rs, RatioStats) else np.asarray(rs)
    return ratios > threshold


def batch_max_ratios(run: Iterable[RatioStats]) -> dict[int, dict[int, float]]:
    """``layer -> batch -> max ratio``."""
    table: dict[int, dict[int, float]] = defaultdict(dict)
    for rs in run:
        prev = table[rs.layer].get(rs.batch)
        table[rs.layer][rs.batch] = rs.max_ratio if prev is None else max(prev, rs.max_ratio)
    return {layer: dict(sorted(b.items())) for layer, b in sorted(table.items())}


@dataclass
class LayerCurve:
    layer: int
    sorted_ratios: list
    base_min: float
    base_max: float
    exceedances: int

    def to_dict(self) -> dict:
        return {"layer": self.layer, "sorted_max_ratios": self.sorted_ratios,
                "base_range": [self.base_min, self.base_max], "exceedances": self.exceedances}


def layer_ratio_curves(trained: dict, base: dict) -> dict[int, LayerCurve]:
    """Per layer: trained batch maxima sorted ascending, the base model's
    ``[min, max]`` of batch maxima, and how many trained points exceed it."""
    if sorted(trained) != sorted(base):
        raise ValidationError(
            f"layer mismatch: trained has {len(trained)} layers, base has {len(base)}")
    out = {}
    for layer in sorted(trained):
        vals = sorted(float(v) for v in trained[layer].values())
        bvals = [float(v) for v in base[layer].values()]
        lo, hi = min(bvals), max(bvals)
        out[layer] = LayerCurve(layer, vals, lo, hi, sum(v > hi for v in vals))
    return out


# --- distributions ---------------------------------------------------------------

@dataclass
class DistributionReport:
    layer: int
    n: int
    num_zero: int
    bin_edges: np.ndarray
    counts: np.ndarray
    fit: GammaFit | None
    ks: float | None
    boundary: float
    fit_error: str | None = None

    def to_dict(self) -> dict:
        return {
            "layer": self.layer, "n": self.n, "num_zero_ratios": self.num_zero,
            "transform": "-log10(ratio)", "ma_boundary": self.boundary,
            "histogram": {"edges": [float(v) for v in self.bin_edges],
                          "counts": [int(c) for c in self.counts]},
            "gamma": None if self.fit is None else self.fit.to_dict(),
            "ks_statistic": self.ks, "fit_error": self.fit_error,
        }


def neg_log_ratios(ratios: np.ndarray, log_base: float = 10.0) -> np.ndarray:
    """``-log_base(ratio)``; zero ratios map to ``+inf``."""
    r = np.asarray(ratios, dtype=np.float64).reshape(-1)
    with np.errstate(divide="ignore"):
        if log_base == 10.0:
            return -np.log10(r)
        return -np.log(r) / math.log(log_base)


def distribution_report(rs: RatioStats | Sequence[RatioStats], bins: int = 100,
                        threshold: float = DEFAULT_THRESHOLD, log_base: float = 10.0,
                        strict: bool = True) -> DistributionReport:
    """Histogram, gamma fit and KS statistic of ``t = -log10(ratio)``.

    Several RatioStats (one layer over many batches) are pooled.  Zero
    ratios (``t = inf``) are left out of the fit and counted in the last
    histogram bin.  With ``strict=False`` a failed fit is recorded in
    ``fit_error`` instead of raised.
    """
    group = [rs] if isinstance(rs, RatioStats) else list(rs)
    if not group:
        raise ValidationError("no ratios to summarize")
    t = np.concatenate([neg_log_ratios(r.ratios, log_base) for r in group])
    finite = t[np.isfinite(t)]
    if finite.size == 0:
        raise ValidationError("all ratios are zero")
    lo, hi = float(finite.min()), float(finite.max())
    if hi == lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, int(bins) + 1)
    counts, _ = np.histogram(np.minimum(t, hi), bins=edges)
    fit, ks, err = None, None, None
    try:
        fit = gamma_mle_fit(finite)
        ks = ks_statistic(finite, fit.cdf)
    except ValidationError as exc:
        if strict:
            raise
        err = str(exc)
    return DistributionReport(group[0].layer, int(t.size), int(t.size - finite.size), edges,
                              counts, fit, ks, float(neg_log_ratios([threshold], log_base)[0]), err)


# --- whole-run reports -------------------------------------------------------------

@dataclass
class LayerReport:
    layer: int
    threshold: float
    num_entries: int
    num_flagged: int
    batch_max: dict
    flagged_per_batch: dict
    distribution: DistributionReport
    curve: LayerCurve | None = None

    def to_dict(self) -> dict:
        d = {
            "layer": self.layer, "threshold": self.threshold,
            "num_entries": self.num_entries, "num_flagged": self.num_flagged,
            "batch_max_ratios": [{"batch": b, "max_ratio": v} for b, v in self.batch_max.items()],
            "flagged_per_batch": [{"batch": b, "count": c} for b, c in self.flagged_per_batch.items()],
            "distribution": self.distribution.to_dict(),
        }
        if self.curve is not None:
            d["curve"] = self.curve.to_dict()
        return d


@dataclass
class MAReport:
    run_id: str
    threshold: float
    log_base: float
    layers: list
    base_run_id: str | None = None
    base_layers: list | None = None
    flags: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        d = {"run_id": self.run_id, "threshold": self.threshold, "log_base": self.log_base,
             "layers": [lr.to_dict() for lr in self.layers]}
        if self.base_run_id is not None:
            d["base"] = {"run_id": self.base_run_id,
                         "layers": [lr.to_dict() for lr in self.base_layers]}
        return d

    def to_json(self) -> str:
        return json.dumps(json_safe(self.to_dict()), indent=2, allow_nan=False) + "\n"


def json_safe(obj):
    if isinstance(obj, dict):
        return {k: json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [json_safe(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _layer_reports(records, threshold, bins, log_base):
    stats = [activation_ratios(r) for r in records]
    flags = [flag_massive(s, threshold) for s in stats]
    maxima = batch_max_ratios(stats)
    by_layer = defaultdict(list)
    for s, f in zip(stats, flags):
        by_layer[s.layer].append((s, f))
    layers = []
    for layer in sorted(by_layer):
        items = by_layer[layer]
        per_batch = defaultdict(int)
        for s, f in items:
            per_batch[s.batch] += int(f.sum())
        dist = distribution_report([s for s, _ in items], bins, threshold, log_base, strict=False)
        layers.append(LayerReport(layer, threshold, int(sum(s.ratios.size for s, _ in items)),
                                  int(sum(f.sum() for _, f in items)), maxima[layer],
                                  dict(sorted(per_batch.items())), dist))
    return layers, flags, maxima


def build_report(records: Sequence[ActivationRecord], threshold: float = DEFAULT_THRESHOLD,
                 bins: int = 100, base_records: Sequence[ActivationRecord] | None = None,
                 log_base: float = 10.0) -> MAReport:
    """Ratios, flags, batch maxima and distribution summaries for every
    layer; with ``base_records``, also the sorted-maxima curves against the
    base model's per-layer range."""
    if not records:
        raise ValidationError("no activation records")
    layers, flags, maxima = _layer_reports(records, threshold, bins, log_base)
    report = MAReport(records[0].run_id, float(threshold), float(log_base), layers, flags=flags)
    if base_records:
        base_layers, _, base_max = _layer_reports(base_records, threshold, bins, log_base)
        curves = layer_ratio_curves(maxima, base_max)
        for lr in layers:
            lr.curve = curves[lr.layer]
        report.base_run_id = base_records[0].run_id
        report.base_layers = base_layers
    return report


def curve_csv(curve: LayerCurve) -> str:
    lines = ["rank,max_ratio,base_min,base_max,exceeds_base"]
    for i, v in enumerate(curve.sorted_ratios):
        lines.append(f"{i},{v!r},{curve.base_min!r},{curve.base_max!r},{int(v > curve.base_max)}")
    return "\n".join(lines) + "\n"


def histogram_csv(dist: DistributionReport) -> str:
    """Histogram bins with the fitted gamma's expected count per bin."""
    lines = ["bin_left,bin_right,count,fitted_count"]
    n_fit = dist.n - dist.num_zero
    for i, c in enumerate(dist.counts):
        left, right = float(dist.bin_edges[i]), float(dist.bin_edges[i + 1])
        fitted = ""
        if dist.fit is not None:
            fitted = repr(float(n_fit * (dist.fit.cdf(right) - dist.fit.cdf(left))))
        lines.append(f"{left!r},{right!r},{int(c)},{fitted}")
    return "\n".join(lines) + "\n"
