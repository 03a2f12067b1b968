"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`GradientTape`
whenever at least one input requires a gradient.  Outside a tape every
operation is a plain numpy computation, which is what inference uses.

>>> x = Tensor([3.0], requires_grad=True)
>>> with GradientTape() as tape:
...     loss = (x * x).sum()
>>> tape.backward(loss)[x]
array([6.])
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import NumericalError, ShapeError, ValidationError

_TAPES: list["GradientTape"] = []


def _active_tape():
    return _TAPES[-1] if _TAPES else None


class Tensor:
    """Row-major float64 array, optionally tracked for differentiation."""

    __slots__ = ("data", "requires_grad", "name", "_tape")
    __array_priority__ = 100  # make ndarray <op> Tensor dispatch to Tensor

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._tape = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        out.data = arr
        out.requires_grad = False
        out.name = None
        out._tape = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad})"

    __hash__ = object.__hash__

    def backward(self, sources=None):
        return backward(self, sources)

    # operators
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class GradientTape:
    """Records differentiable operations for one reverse sweep.

    Use as a context manager.  ``backward`` walks the records in exact
    reverse order and consumes the tape.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._produced: set[int] = set()
        self._leaves: dict[int, Tensor] = {}
        self._consumed = False

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self._records)

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            t.requires_grad = True
            if id(t) not in self._produced:
                self._leaves[id(t)] = t

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], fn: Callable) -> None:
        if self._consumed:
            raise ValidationError("tape already consumed by backward()")
        for t in inputs:
            if t.requires_grad and id(t) not in self._produced:
                self._leaves.setdefault(id(t), t)
        out.requires_grad = True
        out._tape = self
        self._produced.add(id(out))
        self._records.append((out, inputs, fn))

    def backward(self, loss: Tensor, sources: Sequence[Tensor] | None = None):
        """Reverse sweep from a scalar ``loss``.

        Returns a dict mapping every leaf tensor that requires a gradient to
        its gradient array, or a list aligned with ``sources`` if given.
        Leaves the loss does not depend on get zeros.
        """
        if loss.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if self._consumed:
            raise ValidationError("tape already consumed by backward()")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, fn in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = fn(g)
            for t, gi in zip(inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                prev = grads.get(id(t))
                grads[id(t)] = gi if prev is None else prev + gi
        self._consumed = True
        self._records.clear()

        def grad_of(t):
            g = grads.get(id(t))
            return np.zeros_like(t.data) if g is None else g.reshape(t.shape)

        if sources is not None:
            return [grad_of(t) for t in sources]
        return {t: grad_of(t) for t in self._leaves.values()}


def backward(loss: Tensor, sources: Sequence[Tensor] | None = None):
    """Differentiate ``loss`` on the tape that produced it.

    A loss produced by no tape is a constant: every source gets zeros.
    """
    if loss.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        if sources is None:
            return {}
        return [np.zeros_like(t.data) for t in sources]
    return tape.backward(loss, sources)


def _finish(op: str, arr: np.ndarray, inputs: tuple[Tensor, ...], fn: Callable) -> Tensor:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values produced by {op}")
    out = Tensor._wrap(arr)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape._record(out, inputs, fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _finish("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _finish("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _finish("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd
    return _finish("div", out, (a, b),
                   lambda g: (_unbroadcast(g / bd, ad.shape),
                              _unbroadcast(-g * ad / (bd * bd), bd.shape)))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _finish("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(xd)
    return _finish("log", out, (x,), lambda g: (g / xd,))


def sqrt(x: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(x.data)
    return _finish("sqrt", out, (x,), lambda g: (g * 0.5 / out,))


def relu(x: Tensor) -> Tensor:
    """Elementwise ``max(0, x)``; the subgradient at exactly 0 is 0."""
    mask = x.data > 0
    return _finish("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _finish("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return _finish("clip", np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


# --- shape and reduction ----------------------------------------------------

def matmul(a, b) -> Tensor:
    """``a @ b`` with ``b`` two-dimensional; ``a`` may carry leading batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def grad(g):
        ga = g @ bd.T
        gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, bd.shape[1])
        return ga, gb

    return _finish("matmul", ad @ bd, (a, b), grad)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def grad(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _finish("sum", np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), grad)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _finish("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def index(x: Tensor, key) -> Tensor:
    """Basic or integer-array indexing; gradients scatter-add back."""
    shape = x.shape

    def grad(g):
        out = np.zeros(shape)
        np.add.at(out, key, g)
        return (out,)

    return _finish("index", np.array(x.data[key]), (x,), grad)


def gather(x: Tensor, idx: np.ndarray) -> Tensor:
    """Rows of ``x`` selected by the integer array ``idx``."""
    return index(x, np.asarray(idx, dtype=np.intp))


def segment_sum(x: Tensor, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Sum rows of ``x`` into ``num_segments`` buckets given by ``segment_ids``."""
    seg = np.asarray(segment_ids, dtype=np.intp)
    if seg.shape[0] != x.shape[0]:
        raise ShapeError(f"segment ids length {seg.shape[0]} != rows {x.shape[0]}")
    out = np.zeros((num_segments,) + x.shape[1:])
    np.add.at(out, seg, x.data)
    return _finish("segment_sum", out, (x,), lambda g: (g[seg],))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _finish("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors,
                   lambda g: tuple(np.split(g, splits, axis=axis)))


# --- fused kernels ------------------------------------------------------------

def layer_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then apply
    ``scale * x_hat + shift``."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    with np.errstate(over="ignore", invalid="ignore"):
        var = (xc * xc).mean(axis=-1, keepdims=True)
    if not np.all(np.isfinite(var)):
        raise NumericalError("non-finite variance in layer_norm")
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    sd = scale.data
    d = xd.shape[-1]

    def grad(g):
        gx_hat = g * sd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, d)
        return gx, (flat_g * xhat.reshape(-1, d)).sum(axis=0), flat_g.sum(axis=0)

    return _finish("layer_norm", xhat * sd + shift.data, (x, scale, shift), grad)


def masked_softmax(scores: Tensor, mask: np.ndarray, allow_degenerate: bool = False) -> Tensor:
    """Row softmax over entries where ``mask`` is True.

    Masked entries are exactly zero.  A row with no unmasked entry is an
    error unless ``allow_degenerate`` is set, in which case it is all zeros.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != scores.shape:
        raise ShapeError(f"mask shape {mask.shape} != scores shape {scores.shape}")
    live = mask.any(axis=-1, keepdims=True)
    if not allow_degenerate and not live.all():
        raise ValidationError("masked_softmax: row with every entry masked")
    s = np.where(mask, scores.data, -np.inf)
    m = np.where(live, s.max(axis=-1, keepdims=True), 0.0)
    e = np.where(mask, np.exp(s - m), 0.0)
    z = e.sum(axis=-1, keepdims=True)
    out = np.where(live, e / np.where(z > 0, z, 1.0), 0.0)

    def grad(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _finish("masked_softmax", out, (scores,), grad)


def segment_softmax(scores: Tensor, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Softmax over the rows of ``scores`` sharing a segment id.

    Equivalent to a masked row softmax where each segment is one row; empty
    segments simply produce no output entries.
    """
    seg = np.asarray(segment_ids, dtype=np.intp)
    sd = scores.data
    if seg.shape[0] != sd.shape[0]:
        raise ShapeError(f"segment ids length {seg.shape[0]} != rows {sd.shape[0]}")
    m = np.full((num_segments,) + sd.shape[1:], -np.inf)
    np.maximum.at(m, seg, sd)
    e = np.exp(sd - m[seg])
    z = np.zeros((num_segments,) + sd.shape[1:])
    np.add.at(z, seg, e)
    out = e / z[seg]

    def grad(g):
        dot = np.zeros((num_segments,) + sd.shape[1:])
        np.add.at(dot, seg, g * out)
        return (out * (g - dot[seg]),)

    return _finish("segment_softmax", out, (scores,), grad)


# --- initialization and checking --------------------------------------------

def xavier_init(fan_in: int, fan_out: int, rng: np.random.Generator,
                name: str | None = None) -> Tensor:
    """Glorot-uniform ``(fan_in, fan_out)`` weights on ``[-b, b]``,
    ``b = sqrt(6 / (fan_in + fan_out))``."""
    if int(fan_in) < 1 or int(fan_out) < 1:
        raise ValidationError(f"xavier_init needs positive fans, got ({fan_in}, {fan_out})")
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True, name=name)


def finite_difference_gradient(f: Callable[[np.ndarray], float], point, eps: float = 1e-5) -> np.ndarray:
    """Central differences ``(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)``
    for every coordinate of ``point``."""
    x = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x)
        flat[i] = orig - eps
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def directional_difference(f: Callable[[np.ndarray], float], point, direction, eps: float = 1e-5) -> float:
    """Central difference of ``f`` along ``direction``; pairs with ``grad . direction``."""
    x = np.asarray(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    v = np.asarray(direction, dtype=np.float64)
    return (f(x + eps * v) - f(x - eps * v)) / (2.0 * eps)


def relative_error(a, b, floor: float = 1e-12) -> float:
    """``|a - b| / max(|a|, |b|)`` over whole arrays (vector 2-norms)."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)
