"""Edge-type interpretability: MA heatmaps per edge type, information
content of edge types, and the dummy-node ablation runner."""

from __future__ import annotations

import json
import math
import os
from collections import defaultdict
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .detect import (AnalysisConfig, activation_ratios, capture_activations, flag_massive,
                     json_safe)
from .errors import ValidationError
from .graphs import Dataset, augment_dataset, atomic_write_text, edge_type_frequencies
from .model import ActivationRecord, ModelConfig
from .trainer import TrainConfig, train


@dataclass
class HeatmapTable:
    """Percentage of edges of one type flagged at each (head, dim).

    ``layer`` is ``None`` for tables aggregated over layers, in which case
    ``edge_count`` counts (edge, layer) pairs.
    """

    edge_type: int
    percentages: np.ndarray
    edge_count: int
    layer: int | None = None

    @property
    def mass(self) -> float:
        """Mean cell percentage."""
        return float(self.percentages.mean())

    def to_dict(self) -> dict:
        return {"edge_type": self.edge_type, "layer": self.layer, "edge_count": self.edge_count,
                "mass": self.mass, "percentages": self.percentages.tolist()}

    def to_csv(self) -> str:
        h, d = self.percentages.shape
        lines = ["head," + ",".join(f"d{j}" for j in range(d))]
        for i in range(h):
            lines.append(f"{i}," + ",".join(repr(float(v)) for v in self.percentages[i]))
        return "\n".join(lines) + "\n"


def ma_heatmap(flags, edge_types, layer: int | None = None) -> list[HeatmapTable]:
    """One table per edge type present, sorted by type.

    Parameters
    ----------
    flags : bool array ``[E, heads, head_dim]``
    edge_types : int array ``[E]``
    """
    f = np.asarray(flags, dtype=bool)
    t = np.asarray(edge_types).reshape(-1)
    if f.ndim != 3:
        raise ValidationError(f"flags must be [E, heads, head_dim], got shape {f.shape}")
    if f.shape[0] != t.shape[0]:
        raise ValidationError(f"{f.shape[0]} flag rows but {t.shape[0]} edge types")
    tables = []
    for et in np.unique(t):
        sel = t == et
        n = int(sel.sum())
        tables.append(HeatmapTable(int(et), 100.0 * f[sel].sum(axis=0) / n, n, layer))
    return tables


def heatmaps_from_records(records: Sequence[ActivationRecord], threshold: float = 1000.0,
                          flags: Sequence[np.ndarray] | None = None):
    """Aggregated tables (all layers pooled) and per-layer tables.

    Returns ``(aggregate, {layer: tables})``.
    """
    if not records:
        raise ValidationError("no activation records")
    if flags is None:
        flags = [flag_massive(activation_ratios(r), threshold) for r in records]
    by_layer = defaultdict(lambda: ([], []))
    for r, f in zip(records, flags):
        by_layer[r.layer][0].append(f)
        by_layer[r.layer][1].append(r.edge_types)
    per_layer = {layer: ma_heatmap(np.concatenate(fs), np.concatenate(ts), layer)
                 for layer, (fs, ts) in sorted(by_layer.items())}
    aggregate = ma_heatmap(np.concatenate(list(flags)),
                           np.concatenate([r.edge_types for r in records]))
    return aggregate, per_layer


def information_content(freqs: Mapping[int, float]) -> dict[int, float]:
    """``-log2(P)`` bits per type."""
    out = {}
    for t, p in freqs.items():
        p = float(p)
        if not 0.0 < p <= 1.0:
            raise ValidationError(f"edge type {t}: probability {p} outside (0, 1]")
        out[t] = -math.log2(p)
    return out


def aggregate_heatmap_summary(tables: Sequence[HeatmapTable],
                              freqs: Mapping[int, float] | None = None) -> list[dict]:
    """Per type: MA mass (mean cell percentage), rank by mass (1 = most),
    frequency and information content.  Ties rank by type."""
    if not tables:
        raise ValidationError("no heatmap tables to summarize")
    freqs = dict(freqs or {})
    bits = information_content({t: p for t, p in freqs.items() if p > 0})
    order = sorted(tables, key=lambda tb: (-tb.mass, tb.edge_type))
    rank = {tb.edge_type: i + 1 for i, tb in enumerate(order)}
    return [{"edge_type": tb.edge_type, "mass": tb.mass, "rank": rank[tb.edge_type],
             "edge_count": tb.edge_count, "frequency": freqs.get(tb.edge_type),
             "information_bits": bits.get(tb.edge_type)}
            for tb in sorted(tables, key=lambda tb: tb.edge_type)]


# --- ablation ------------------------------------------------------------------

@dataclass
class AblationPhase:
    name: str
    dataset: Dataset
    history: list
    test_loss: float
    records: list
    flags: list
    aggregate: list
    per_layer: dict

    def summary(self) -> dict:
        freqs = edge_type_frequencies(self.dataset)
        layers = defaultdict(lambda: {"num_entries": 0, "num_flagged": 0, "max_ratio": 0.0})
        for r, f in zip(self.records, self.flags):
            row = layers[r.layer]
            row["num_entries"] += int(f.size)
            row["num_flagged"] += int(f.sum())
            row["max_ratio"] = max(row["max_ratio"], activation_ratios(r).max_ratio)
        return {
            "dataset": {"num_graphs": len(self.dataset),
                        "num_edges": int(sum(g.num_edges for g in self.dataset)),
                        "num_edge_types": self.dataset.num_edge_types,
                        "edge_type_frequencies": {str(k): v for k, v in freqs.items()}},
            "train": {"initial_train_loss": self.history[0]["train_loss"],
                      "final_train_loss": self.history[-1]["train_loss"],
                      "test_loss": self.test_loss, "history": self.history},
            "layers": [{"layer": k, **v} for k, v in sorted(layers.items())],
            "summary": aggregate_heatmap_summary(self.aggregate, freqs),
            "per_layer_summary": [{"layer": k, "types": aggregate_heatmap_summary(v, freqs)}
                                  for k, v in sorted(self.per_layer.items())],
            "heatmaps": [tb.to_dict() for tb in self.aggregate],
        }


@dataclass
class AblationReport:
    analysis: AnalysisConfig
    phase_a: AblationPhase
    phase_b: AblationPhase

    def mass_deltas(self) -> list[dict]:
        a = {tb.edge_type: tb.mass for tb in self.phase_a.aggregate}
        b = {tb.edge_type: tb.mass for tb in self.phase_b.aggregate}
        return [{"edge_type": t, "mass_a": a.get(t), "mass_b": b.get(t),
                 "delta": b[t] - a[t] if t in a and t in b else None}
                for t in sorted(set(a) | set(b))]

    def to_dict(self) -> dict:
        return {"analysis": self.analysis.to_dict(),
                "mass_definition": "mean over (head, dim) cells of the percentage of edges "
                                   "of the type flagged at that cell, all layers pooled",
                "phases": {"a": self.phase_a.summary(), "b": self.phase_b.summary()},
                "mass_deltas": self.mass_deltas()}

    def write(self, out_dir) -> dict:
        """Write heatmap CSVs (aggregate and per layer, per phase) and
        ``ablation_report.json`` listing them.  Returns the report dict."""
        os.makedirs(out_dir, exist_ok=True)
        report = self.to_dict()
        for key, phase in (("a", self.phase_a), ("b", self.phase_b)):
            files = write_heatmap_csvs(phase.aggregate, phase.per_layer, out_dir,
                                       prefix=f"phase_{key}_")
            report["phases"][key]["files"] = files
        atomic_write_text(os.path.join(out_dir, "ablation_report.json"),
                          json.dumps(json_safe(report), indent=2, allow_nan=False) + "\n")
        return report


def write_heatmap_csvs(aggregate, per_layer, out_dir, prefix="") -> list[str]:
    """One CSV per (edge type, layer) plus one per type over all layers.
    Returns file names relative to ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    names = []
    for tb in aggregate:
        names.append(f"{prefix}heatmap_type{tb.edge_type}_all.csv")
        atomic_write_text(os.path.join(out_dir, names[-1]), tb.to_csv())
    for layer, tables in sorted(per_layer.items()):
        for tb in tables:
            names.append(f"{prefix}heatmap_type{tb.edge_type}_layer{layer}.csv")
            atomic_write_text(os.path.join(out_dir, names[-1]), tb.to_csv())
    return names


def _retarget(mconfig: ModelConfig, ds: Dataset) -> ModelConfig:
    d = mconfig.to_dict()
    d.update(node_dim=ds.node_dim, edge_dim=ds.edge_dim, out_dim=ds.target_dim, task=ds.task)
    return ModelConfig.from_dict(d)


def _run_phase(name, ds, mconfig, tconfig, analysis, log) -> AblationPhase:
    result = train(ds, _retarget(mconfig, ds), tconfig, log=log)
    idx = None if analysis.max_graphs is None else range(min(analysis.max_graphs, len(ds)))
    records = capture_activations(ds, result.params, result.config, analysis.batch_size,
                                  run_id=f"ablation-{name}", indices=idx)
    flags = [flag_massive(activation_ratios(r), analysis.threshold) for r in records]
    aggregate, per_layer = heatmaps_from_records(records, flags=flags)
    return AblationPhase(name, ds, result.history, result.test_loss, records, flags,
                         aggregate, per_layer)


def run_ablation(ds: Dataset, mconfig: ModelConfig, tconfig: TrainConfig,
                 analysis: AnalysisConfig | None = None, log=None) -> AblationReport:
    """Train, capture and build heatmaps on ``ds`` (phase a), then on
    ``ds`` with a dummy node added to every graph, retrained from a fresh
    initialization with the same seed (phase b)."""
    if ds.has_dummy:
        raise ValidationError("ablation input already contains dummy nodes")
    analysis = analysis or AnalysisConfig()
    phase_a = _run_phase("a", ds, mconfig, tconfig, analysis, log)
    phase_b = _run_phase("b", augment_dataset(ds), mconfig, tconfig, analysis, log)
    return AblationReport(analysis, phase_a, phase_b)
