"""Losses, Adam, the training loop and checkpoint persistence."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import GradientTape, Tensor
from .errors import NumericalError, ShapeError, ValidationError
from .graphs import BatchedGraph, Dataset, atomic_write_bytes, atomic_write_text, batch_graphs
from .model import ModelConfig, ModelParams, init_params, model_forward

BCE_CLAMP = 1e-12
CHECKPOINT_FORMAT = "graphma-checkpoint-1"


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 0
    capture_every: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if not self.lr >= 0:
            raise ValidationError("lr must be >= 0")
        if self.epochs < 0 or self.capture_every < 0:
            raise ValidationError("epochs and capture_every must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


# --- losses --------------------------------------------------------------------

def mse_loss(pred: Tensor, target) -> Tensor:
    target = ad.as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: prediction {pred.shape} vs target {target.shape}")
    d = pred - target
    return (d * d).mean()


def bce_loss(pred: Tensor, target, mask=None) -> Tensor:
    """Mean binary cross-entropy over unmasked entries; probabilities are
    clamped to ``[1e-12, 1 - 1e-12]``."""
    y = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if pred.shape != y.shape:
        raise ShapeError(f"bce_loss: prediction {pred.shape} vs target {y.shape}")
    m = np.ones(y.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    count = int(m.sum())
    if count == 0:
        raise ValidationError("bce_loss: mask selects no entries")
    y = np.where(m, y, 0.0)
    p = ad.clip(pred, BCE_CLAMP, 1.0 - BCE_CLAMP)
    ll = Tensor._wrap(y) * ad.log(p) + Tensor._wrap(1.0 - y) * ad.log(1.0 - p)
    return -(ll * Tensor._wrap(m.astype(np.float64))).sum() * (1.0 / count)


def task_loss(pred: Tensor, batch: BatchedGraph, config: ModelConfig) -> tuple[Tensor, int]:
    """Loss for the model's task and the number of target entries it averages."""
    if batch.targets is None:
        raise ValidationError("batch has no targets")
    y = batch.targets
    if config.task == "graph-regression":
        return mse_loss(pred, y), y.size
    mask = ~np.isnan(y)
    return bce_loss(pred, y, mask), int(mask.sum())


# --- Adam ------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: ModelParams, grads: dict, state: AdamState, config: TrainConfig):
    """One bias-corrected Adam update, in place.  ``grads`` maps parameter
    names to gradient arrays; missing names count as zero gradient."""
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if config.weight_decay:
            g = g + config.weight_decay * p.data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - config.lr * (m / c1) / (np.sqrt(v / c2) + config.eps)
    return params, state


# --- training ------------------------------------------------------------------

def split_indices(n: int, seed: int, fractions=(0.8, 0.1, 0.1)):
    """Seeded shuffle into train/validation/test index arrays."""
    order = np.random.default_rng(np.random.SeedSequence([seed, 7])).permutation(n)
    n_val = int(round(fractions[1] * n))
    n_test = int(round(fractions[2] * n))
    n_train = n - n_val - n_test
    if n_train < 1:
        n_train, n_val, n_test = n, 0, 0
    return order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:]


def iter_batches(ds: Dataset, indices, batch_size: int):
    for start in range(0, len(indices), batch_size):
        chunk = indices[start:start + batch_size]
        yield np.asarray(chunk), batch_graphs([ds.graphs[i] for i in chunk], ds.num_edge_types)


def evaluate(ds: Dataset, indices, params: ModelParams, config: ModelConfig,
             batch_size: int = 64, batches=None) -> float:
    """Mean loss per target entry over ``indices`` (NaN when empty)."""
    total, count = 0.0, 0
    source = batches if batches is not None else (b for _, b in iter_batches(ds, indices, batch_size))
    for batch in source:
        pred, _ = model_forward(batch, params, config)
        loss, k = task_loss(pred, batch, config)
        total += loss.item() * k
        count += k
    return total / count if count else float("nan")


@dataclass
class TrainResult:
    config: ModelConfig
    params: ModelParams
    history: list
    train_config: TrainConfig
    test_loss: float
    split: tuple
    captures: dict = field(default_factory=dict)

    @property
    def epoch(self) -> int:
        return self.history[-1]["epoch"] if self.history else 0


def train(ds: Dataset, mconfig: ModelConfig, tconfig: TrainConfig, checkpoint_path=None,
          log=None) -> TrainResult:
    """Train from a fresh seeded initialization.

    History row 0 is the loss of the initial model on the train and
    validation splits; row ``k`` holds the mean minibatch loss of epoch ``k``
    and the validation loss after it.
    """
    if ds.task != mconfig.task:
        raise ValidationError(f"dataset task {ds.task!r} != model task {mconfig.task!r}")
    init_rng, shuffle_rng, dropout_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(tconfig.seed).spawn(3))
    params = init_params(mconfig, init_rng)
    train_idx, val_idx, test_idx = split_indices(len(ds), tconfig.seed)
    eval_bs = max(tconfig.batch_size, 64)
    val_batches = [b for _, b in iter_batches(ds, val_idx, eval_bs)]
    history = [{"epoch": 0,
                "train_loss": evaluate(ds, train_idx, params, mconfig, eval_bs),
                "val_loss": evaluate(ds, val_idx, params, mconfig, batches=val_batches)}]
    state = AdamState()
    captures = {}
    drop_rng = dropout_rng if mconfig.dropout > 0 else None
    for epoch in range(1, tconfig.epochs + 1):
        order = train_idx[shuffle_rng.permutation(len(train_idx))]
        total, count = 0.0, 0
        for b_i, (_, batch) in enumerate(iter_batches(ds, order, tconfig.batch_size)):
            try:
                with GradientTape() as tape:
                    pred, _ = model_forward(batch, params, mconfig, rng=drop_rng)
                    loss, k = task_loss(pred, batch, mconfig)
                value = loss.item()
                if not np.isfinite(value):
                    raise NumericalError("non-finite loss")
                grads = dict(zip(params.names(), tape.backward(loss, params.values())))
                adam_step(params, grads, state, tconfig)
            except NumericalError as exc:
                raise NumericalError(f"epoch {epoch}, batch {b_i}: {exc}") from exc
            total += value * k
            count += k
        row = {"epoch": epoch, "train_loss": total / count,
               "val_loss": evaluate(ds, val_idx, params, mconfig, batches=val_batches)}
        history.append(row)
        if log is not None:
            log(row)
        if tconfig.capture_every and epoch % tconfig.capture_every == 0:
            from .detect import capture_activations
            captures[epoch] = capture_activations(ds.subset(val_idx), params, mconfig,
                                                  batch_size=1, run_id=f"epoch{epoch}")
    test_loss = evaluate(ds, test_idx, params, mconfig, eval_bs)
    result = TrainResult(mconfig, params, history, tconfig, test_loss,
                         (train_idx, val_idx, test_idx), captures)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, params, mconfig, seed=tconfig.seed, epoch=result.epoch)
    return result


def history_csv(history) -> str:
    lines = ["epoch,train_loss,val_loss"]
    lines += [f"{r['epoch']},{r['train_loss']!r},{r['val_loss']!r}" for r in history]
    return "\n".join(lines) + "\n"


# --- checkpoints ------------------------------------------------------------------

def save_checkpoint(path, params: ModelParams, config: ModelConfig, seed: int = 0,
                    epoch: int = 0) -> None:
    """Write ``manifest.json`` and ``params.bin`` (little-endian float64,
    manifest order) into the directory ``path``."""
    os.makedirs(path, exist_ok=True)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config": config.to_dict(),
        "seed": int(seed),
        "epoch": int(epoch),
        "dtype": "<f8",
        "blob": "params.bin",
        "parameters": [{"name": k, "shape": list(t.shape)} for k, t in params.items()],
    }
    blob = b"".join(np.ascontiguousarray(t.data, dtype="<f8").tobytes() for t in params.values())
    atomic_write_bytes(os.path.join(path, "params.bin"), blob)
    atomic_write_text(os.path.join(path, "manifest.json"), json.dumps(manifest, indent=2) + "\n")


def load_checkpoint(path):
    """Returns ``(params, config, manifest)``."""
    try:
        with open(os.path.join(path, "manifest.json"), encoding="utf-8") as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read checkpoint manifest in {path}: {exc}") from exc
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValidationError(f"{path}: not a checkpoint (format {manifest.get('format')!r})")
    config = ModelConfig.from_dict(manifest["config"])
    with open(os.path.join(path, manifest.get("blob", "params.bin")), "rb") as fh:
        blob = fh.read()
    sizes = [int(np.prod(p["shape"])) for p in manifest["parameters"]]
    if len(blob) != 8 * sum(sizes):
        raise ValidationError(
            f"{path}: parameter blob has {len(blob)} bytes, manifest needs {8 * sum(sizes)}")
    values = np.frombuffer(blob, dtype="<f8")
    params = ModelParams()
    pos = 0
    for p, size in zip(manifest["parameters"], sizes):
        params[p["name"]] = Tensor(values[pos:pos + size].reshape(p["shape"]),
                                   requires_grad=True, name=p["name"])
        pos += size
    expected = init_params(config, 0)
    if expected.names() != params.names() or any(
            expected[k].shape != params[k].shape for k in expected.names()):
        raise ValidationError(f"{path}: parameters do not match the model config")
    return params, config, manifest
