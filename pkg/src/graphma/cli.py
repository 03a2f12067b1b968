"""Command-line entry point.

Run configuration is one JSON file with optional sections ``generator``,
``model``, ``train`` and ``analysis`` plus a top-level ``seed``.  Command
line flags override the file, which overrides built-in defaults.

Exit codes: 0 success, 1 usage error, 2 invalid input, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .detect import (AnalysisConfig, build_report, capture_activations, curve_csv,
                     histogram_csv, read_capture, write_capture)
from .errors import NumericalError, ValidationError
from .graphs import (Dataset, GeneratorConfig, atomic_write_text, generate_synthetic,
                     load_jsonl, write_jsonl)
from .interpret import (aggregate_heatmap_summary, heatmaps_from_records, run_ablation,
                        write_heatmap_csvs)
from .model import ModelConfig, init_params
from .plots import emit_svg_plots, svg_heatmaps, svg_loss_curves
from .trainer import TrainConfig, history_csv, load_checkpoint, train

log = logging.getLogger("graphma")

CONFIG_SECTIONS = ("generator", "model", "train", "analysis", "seed")
# widths and task always come from the dataset
DATASET_KEYS = ("node_dim", "edge_dim", "out_dim", "task")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --- configuration ----------------------------------------------------------------

def load_run_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: malformed JSON ({exc.msg} at line {exc.lineno})") from exc
    if not isinstance(cfg, dict):
        raise ValidationError(f"{path}: config must be a JSON object")
    return cfg


def _section(cfg: dict, name: str) -> dict:
    sec = cfg.get(name, {})
    if not isinstance(sec, dict):
        raise ValidationError(f"config section {name!r} must be an object")
    return dict(sec)


def _check_sections(cfg: dict):
    unknown = set(cfg) - set(CONFIG_SECTIONS)
    if unknown:
        raise ValidationError(f"unknown config sections: {sorted(unknown)}")


def _seed(args, cfg: dict, section: dict | None = None, default: int = 0) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    if "seed" in cfg:
        return int(cfg["seed"])
    if section and "seed" in section:
        return int(section["seed"])
    return default


def model_config_for(ds: Dataset, cfg: dict, args) -> ModelConfig:
    sec = _section(cfg, "model")
    bad = set(sec) & set(DATASET_KEYS)
    if bad:
        raise ValidationError(f"model config keys {sorted(bad)} are taken from the dataset")
    if getattr(args, "ebt", False):
        sec["ebt"] = True
    return ModelConfig.for_dataset(ds, **sec)


def train_config_for(cfg: dict, args) -> TrainConfig:
    sec = _section(cfg, "train")
    sec["seed"] = _seed(args, cfg, sec)
    if getattr(args, "epochs", None) is not None:
        sec["epochs"] = args.epochs
    return TrainConfig.from_dict(sec)


def analysis_config_for(cfg: dict, args, report_threshold: float | None = None) -> AnalysisConfig:
    sec = _section(cfg, "analysis")
    if report_threshold is not None:
        sec["threshold"] = report_threshold
    for flag, key in (("threshold", "threshold"), ("batch_size", "batch_size"),
                      ("bins", "bins"), ("max_graphs", "max_graphs")):
        if getattr(args, flag, None) is not None:
            sec[key] = getattr(args, flag)
    return AnalysisConfig.from_dict(sec)


def load_dataset_for(path, config: ModelConfig | None = None) -> Dataset:
    """Load JSONL; with a model config, one-hot edge features are widened to
    the model's edge width so rare types missing from a file do not change
    the input shape."""
    ds = load_jsonl(path)
    if config is not None and ds.graphs[0].edge_features is None and ds.num_edge_types < config.edge_dim:
        ds = Dataset(ds.graphs, ds.task, config.edge_dim)
    return ds


def _init_seed_rng(seed: int) -> np.random.Generator:
    # same stream the trainer draws its initialization from
    return np.random.default_rng(np.random.SeedSequence(seed).spawn(3)[0])


def _log_epoch(row):
    log.info("epoch %d train_loss %.6g val_loss %.6g", row["epoch"], row["train_loss"], row["val_loss"])


def _write_json(path, obj):
    from .detect import json_safe
    atomic_write_text(path, json.dumps(json_safe(obj), indent=2, allow_nan=False) + "\n")


# --- subcommands ----------------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = load_run_config(args.config)
    # a bare generator config is accepted as well as a full run config
    flat = "generator" not in cfg and not set(cfg) & set(CONFIG_SECTIONS[1:4])
    gen = dict(cfg) if flat else _section(cfg, "generator")
    gen["seed"] = _seed(args, {} if flat else cfg, gen)
    ds = generate_synthetic(GeneratorConfig.from_dict(gen))
    write_jsonl(ds, args.out)
    log.info("wrote %d graphs to %s", len(ds), args.out)
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    _check_sections(cfg)
    ds = load_dataset_for(args.data)
    mconf = model_config_for(ds, cfg, args)
    tconf = train_config_for(cfg, args)
    os.makedirs(args.out, exist_ok=True)
    ckpt = args.checkpoint or os.path.join(args.out, "checkpoint")
    result = train(ds, mconf, tconf, checkpoint_path=ckpt, log=_log_epoch)
    atomic_write_text(os.path.join(args.out, "history.csv"), history_csv(result.history))
    _write_json(os.path.join(args.out, "train_summary.json"),
                {"model": mconf.to_dict(), "train": tconf.to_dict(), "history": result.history,
                 "test_loss": result.test_loss, "checkpoint": os.path.relpath(ckpt, args.out)})
    return 0


def cmd_capture(args) -> int:
    cfg = load_run_config(args.config)
    _check_sections(cfg)
    if args.checkpoint is None and not args.untrained:
        raise UsageError("capture needs --checkpoint or --untrained")
    if args.checkpoint is not None:
        params, mconf, manifest = load_checkpoint(args.checkpoint)
        if args.ebt and not mconf.ebt:
            raise ValidationError("--ebt conflicts with the checkpoint's model config")
        ds = load_dataset_for(args.data, mconf)
        seed = _seed(args, cfg, default=int(manifest.get("seed", 0)))
    else:
        ds = load_dataset_for(args.data)
        mconf = model_config_for(ds, cfg, args)
        seed = _seed(args, cfg, _section(cfg, "train"))
    if args.untrained:
        params = init_params(mconf, _init_seed_rng(seed))
    analysis = analysis_config_for(cfg, args)
    idx = None if analysis.max_graphs is None else range(min(analysis.max_graphs, len(ds)))
    run_id = args.run_id or ("untrained" if args.untrained else "trained")
    records = capture_activations(ds, params, mconf, analysis.batch_size, run_id=run_id, indices=idx)
    write_capture(args.out, records, run_id)
    log.info("captured %d records to %s", len(records), args.out)
    return 0


def cmd_detect(args) -> int:
    cfg = load_run_config(args.config)
    _check_sections(cfg)
    analysis = analysis_config_for(cfg, args)
    _, records = read_capture(args.capture)
    base = read_capture(args.base)[1] if args.base else None
    report = build_report(records, analysis.threshold, analysis.bins, base, analysis.log_base)
    os.makedirs(args.out, exist_ok=True)
    atomic_write_text(os.path.join(args.out, "report.json"), report.to_json())
    for lr in report.layers:
        if lr.curve is not None:
            atomic_write_text(os.path.join(args.out, f"curves_layer{lr.layer}.csv"), curve_csv(lr.curve))
        atomic_write_text(os.path.join(args.out, f"hist_layer{lr.layer}.csv"),
                          histogram_csv(lr.distribution))
    emit_svg_plots(report, args.out)
    for lr in report.layers:
        if lr.distribution.fit_error:
            log.warning("layer %d: gamma fit skipped (%s)", lr.layer, lr.distribution.fit_error)
    return 0


def cmd_heatmap(args) -> int:
    cfg = load_run_config(args.config)
    _check_sections(cfg)
    report_threshold = None
    if args.report:
        with open(args.report, encoding="utf-8") as fh:
            try:
                report_threshold = float(json.load(fh)["threshold"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValidationError(f"{args.report}: not an MA report ({exc})") from exc
    analysis = analysis_config_for(cfg, args, report_threshold)
    _, records = read_capture(args.capture)
    if not records:
        raise ValidationError(f"{args.capture}: no records")
    aggregate, per_layer = heatmaps_from_records(records, analysis.threshold)
    first = min(per_layer)
    types = np.concatenate([r.edge_types for r in records if r.layer == first])
    values, counts = np.unique(types, return_counts=True)
    freqs = {int(t): float(c) / types.size for t, c in zip(values, counts)}
    files = write_heatmap_csvs(aggregate, per_layer, args.out)
    atomic_write_text(os.path.join(args.out, "heatmaps_all.svg"), svg_heatmaps(aggregate, "all layers"))
    for layer, tables in per_layer.items():
        name = f"heatmaps_layer{layer}.svg"
        atomic_write_text(os.path.join(args.out, name), svg_heatmaps(tables, f"layer {layer}"))
        files.append(name)
    _write_json(os.path.join(args.out, "heatmap_summary.json"), {
        "threshold": analysis.threshold,
        "summary": aggregate_heatmap_summary(aggregate, freqs),
        "per_layer_summary": [{"layer": k, "types": aggregate_heatmap_summary(v, freqs)}
                              for k, v in per_layer.items()],
        "files": ["heatmaps_all.svg"] + files})
    return 0


def cmd_ablate(args) -> int:
    cfg = load_run_config(args.config)
    _check_sections(cfg)
    ds = load_dataset_for(args.data)
    mconf = model_config_for(ds, cfg, args)
    tconf = train_config_for(cfg, args)
    analysis = analysis_config_for(cfg, args)
    report = run_ablation(ds, mconf, tconf, analysis, log=_log_epoch)
    report.write(args.out)
    for key, phase in (("a", report.phase_a), ("b", report.phase_b)):
        atomic_write_text(os.path.join(args.out, f"phase_{key}_heatmaps.svg"),
                          svg_heatmaps(phase.aggregate, f"phase {key}"))
    return 0


def cmd_compare_ebt(args) -> int:
    cfg = load_run_config(args.config)
    _check_sections(cfg)
    ds = load_dataset_for(args.data)
    tconf = train_config_for(cfg, args)
    base = model_config_for(ds, cfg, args).to_dict()
    rows, histories = [], {}
    for ebt in (False, True):
        name = "ebt" if ebt else "no_ebt"
        result = train(ds, ModelConfig.from_dict({**base, "ebt": ebt}), tconf, log=_log_epoch)
        h = result.history
        histories[name] = h
        rows.append(f"{name},{int(ebt)},{h[0]['train_loss']!r},{h[-1]['train_loss']!r},"
                    f"{h[-1]['val_loss']!r},{result.test_loss!r},"
                    f"{int(h[-1]['train_loss'] <= 0.5 * h[0]['train_loss'])}")
    os.makedirs(args.out, exist_ok=True)
    atomic_write_text(os.path.join(args.out, "ebt_comparison.csv"),
                      "variant,ebt,initial_train_loss,final_train_loss,final_val_loss,"
                      "test_loss,converged\n" + "\n".join(rows) + "\n")
    lines = ["epoch,train_no_ebt,train_ebt,val_no_ebt,val_ebt"]
    for a, b in zip(histories["no_ebt"], histories["ebt"]):
        lines.append(f"{a['epoch']},{a['train_loss']!r},{b['train_loss']!r},"
                     f"{a['val_loss']!r},{b['val_loss']!r}")
    atomic_write_text(os.path.join(args.out, "loss_curves.csv"), "\n".join(lines) + "\n")
    atomic_write_text(os.path.join(args.out, "loss_curves.svg"), svg_loss_curves(histories))
    return 0


# --- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="graphma", description="Massive-activation analysis for graph transformers")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_help):
        sp.add_argument("--config", help="run configuration JSON")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--out", required=True, help=out_help)

    def analysis_flags(sp):
        sp.add_argument("--threshold", type=float, help="MA ratio threshold (default 1000)")
        sp.add_argument("--batch-size", type=int, dest="batch_size",
                        help="graphs per analysis batch (default 1)")
        sp.add_argument("--max-graphs", type=int, dest="max_graphs",
                        help="capture only the first N graphs")

    sp = sub.add_parser("gen", help="write a synthetic dataset as JSONL")
    common(sp, "output JSONL path")
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("train", help="train a model; writes checkpoint and history")
    common(sp, "output directory")
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint", help="checkpoint directory (default OUT/checkpoint)")
    sp.add_argument("--ebt", action="store_true", help="enable explicit bias terms")
    sp.add_argument("--epochs", type=int)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("capture", help="record edge activations to a MACAP1 file")
    common(sp, "output capture file")
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint")
    sp.add_argument("--untrained", action="store_true",
                    help="use a freshly initialized model (architecture from --checkpoint or --config)")
    sp.add_argument("--ebt", action="store_true")
    sp.add_argument("--run-id", dest="run_id")
    analysis_flags(sp)
    sp.set_defaults(func=cmd_capture)

    sp = sub.add_parser("detect", help="ratio, flag and distribution report")
    common(sp, "output directory")
    sp.add_argument("--capture", required=True)
    sp.add_argument("--base", help="capture of the untrained reference model")
    sp.add_argument("--threshold", type=float)
    sp.add_argument("--bins", type=int)
    sp.set_defaults(func=cmd_detect)

    sp = sub.add_parser("heatmap", help="per edge type MA heatmaps")
    common(sp, "output directory")
    sp.add_argument("--capture", required=True)
    sp.add_argument("--report", help="MA report whose threshold to reuse")
    sp.add_argument("--threshold", type=float)
    sp.set_defaults(func=cmd_heatmap)

    sp = sub.add_parser("ablate", help="dummy-node ablation (train twice, compare heatmaps)")
    common(sp, "output directory")
    sp.add_argument("--data", required=True)
    sp.add_argument("--ebt", action="store_true")
    sp.add_argument("--epochs", type=int)
    analysis_flags(sp)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("compare-ebt", help="train with and without explicit bias terms")
    common(sp, "output directory")
    sp.add_argument("--data", required=True)
    sp.add_argument("--epochs", type=int)
    sp.set_defaults(func=cmd_compare_ebt)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"graphma: usage error: {exc}", file=sys.stderr)
        return 1
    for h in list(log.handlers):
        log.removeHandler(h)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO if args.verbose else logging.WARNING)
    log.propagate = False
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"graphma: usage error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"graphma: numerical error: {exc}", file=sys.stderr)
        return 3
    except (ValidationError, OSError, TypeError) as exc:
        print(f"graphma: invalid input: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
