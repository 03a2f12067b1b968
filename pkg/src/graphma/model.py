"""Edge-featured multi-head attention graph transformer.

Per layer and head, every directed edge ``u -> v`` carries a per-dimension
edge activation

    w_uv = (Q h_u) * (K h_v) * (W_E e_uv) / sqrt(d_k)

whose sum over the head dimension is the attention score of ``v`` in
``u``'s softmax.  Node ``u`` aggregates ``alpha_uv * (V h_v + W_G e_uv)``.
The stacked edge activations, before the edge output projection, are what
activation capture records.

With the explicit bias term (EBT) enabled, each head owns key/edge/value
bias vectors ``k, e, v``: ``(Q h_u . k) e`` is added to every edge
activation leaving ``u``, and a virtual slot with score
``(Q h_u . k) / sqrt(d_k)`` and value ``v`` joins ``u``'s softmax.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import NumericalError, ShapeError, ValidationError
from .graphs import TASKS, BatchedGraph, Dataset, Graph


@dataclass
class ModelConfig:
    num_layers: int = 4
    hidden_dim: int = 64
    num_heads: int = 8
    ffn_dim: int = 128
    task: str = "graph-regression"
    ebt: bool = False
    pe_dim: int = 8
    dropout: float = 0.0
    node_dim: int = 8
    edge_dim: int = 3
    out_dim: int = 1
    ebt_bias_slot: bool = True
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValidationError("num_layers must be >= 1")
        if self.num_heads < 1 or self.hidden_dim % self.num_heads:
            raise ValidationError(
                f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if self.task not in TASKS:
            raise ValidationError(f"unknown task {self.task!r}")
        if self.pe_dim < 0 or not 0.0 <= self.dropout < 1.0:
            raise ValidationError("pe_dim must be >= 0 and dropout in [0, 1)")
        if min(self.ffn_dim, self.node_dim, self.edge_dim, self.out_dim) < 1:
            raise ValidationError("ffn_dim, node_dim, edge_dim and out_dim must be positive")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def for_dataset(cls, ds: Dataset, **overrides) -> "ModelConfig":
        """Take input/output widths and the task from ``ds``."""
        kw = dict(node_dim=ds.node_dim, edge_dim=ds.edge_dim,
                  out_dim=ds.target_dim, task=ds.task)
        kw.update(overrides)
        return cls(**kw)


class ModelParams:
    """Ordered, named collection of parameter tensors."""

    def __init__(self, tensors: "OrderedDict[str, Tensor] | None" = None):
        self.tensors: OrderedDict[str, Tensor] = OrderedDict(tensors or {})

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __setitem__(self, name: str, t: Tensor) -> None:
        self.tensors[name] = t

    def __contains__(self, name) -> bool:
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def names(self) -> list[str]:
        return list(self.tensors)

    def values(self) -> list[Tensor]:
        return list(self.tensors.values())

    def items(self):
        return self.tensors.items()

    @property
    def num_values(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def copy(self) -> "ModelParams":
        return ModelParams(OrderedDict(
            (k, Tensor(t.data.copy(), requires_grad=True, name=k)) for k, t in self.items()))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([t.data.reshape(-1) for t in self.tensors.values()])

    def load_vector(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.num_values:
            raise ShapeError(f"vector of {vec.size} values for {self.num_values} parameters")
        pos = 0
        for t in self.tensors.values():
            t.data = vec[pos:pos + t.size].reshape(t.shape).copy()
            pos += t.size

    def equals(self, other: "ModelParams") -> bool:
        return self.names() == other.names() and all(
            self[k].shape == other[k].shape and np.array_equal(self[k].data, other[k].data)
            for k in self.names())


def _zeros(*shape, name=None) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


def _ones(*shape, name=None) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True, name=name)


def init_params(config: ModelConfig, rng: np.random.Generator | int) -> ModelParams:
    """Xavier-uniform weights, zero biases, unit layer-norm scales.

    Parameters are drawn in a fixed order so one seed gives one model.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    d, dk, h, dff = config.hidden_dim, config.head_dim, config.num_heads, config.ffn_dim
    p: OrderedDict[str, Tensor] = OrderedDict()

    def xavier(name, fi, fo):
        p[name] = ad.xavier_init(fi, fo, rng, name=name)

    xavier("embed.W_in", config.node_dim, d)
    p["embed.b_in"] = _zeros(d, name="embed.b_in")
    if config.pe_dim > 0:
        xavier("embed.W_pe", config.pe_dim, d)
    xavier("embed.W_edge", config.edge_dim, d)
    p["embed.b_edge"] = _zeros(d, name="embed.b_edge")
    for layer in range(config.num_layers):
        pre = f"layers.{layer}."
        for w in ("W_Q", "W_K", "W_V", "W_E", "W_G", "W_O", "W_Oe"):
            xavier(pre + w, d, d)
        for chan in ("node", "edge"):
            xavier(f"{pre}{chan}_ffn.W1", d, dff)
            p[f"{pre}{chan}_ffn.b1"] = _zeros(dff)
            xavier(f"{pre}{chan}_ffn.W2", dff, d)
            p[f"{pre}{chan}_ffn.b2"] = _zeros(d)
            for ln in ("ln1", "ln2"):
                p[f"{pre}{chan}_{ln}.scale"] = _ones(d)
                p[f"{pre}{chan}_{ln}.shift"] = _zeros(d)
        if config.ebt:
            for b in ("b_Q", "b_K", "b_V", "b_E"):
                p[pre + b] = _zeros(d)
            for b in ("ebt_k", "ebt_e", "ebt_v"):
                xavier(pre + b, h, dk)
    if config.task == "node-multilabel":
        xavier("readout.W_out", d, config.out_dim)
        p["readout.b_out"] = _zeros(config.out_dim)
    else:
        xavier("readout.W1", d, d)
        p["readout.b1"] = _zeros(d)
        xavier("readout.W2", d, config.out_dim)
        p["readout.b2"] = _zeros(config.out_dim)
    for name, t in p.items():
        t.name = name
    return ModelParams(p)


@dataclass
class ActivationRecord:
    """Edge activations ``[E, heads, head_dim]`` of one layer on one batch."""

    run_id: str
    batch_index: int
    layer: int
    activations: np.ndarray
    edge_types: np.ndarray
    edge_graph: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        a = np.asarray(self.activations)
        if a.ndim != 3:
            raise ShapeError(f"activation tensor must be [E, heads, head_dim], got {a.shape}")
        if len(self.edge_types) != a.shape[0] or len(self.edge_graph) != a.shape[0]:
            raise ShapeError("edge_types / edge_graph length must match the edge count")

    @property
    def num_edges(self) -> int:
        return self.activations.shape[0]

    @property
    def num_heads(self) -> int:
        return self.activations.shape[1]

    @property
    def head_dim(self) -> int:
        return self.activations.shape[2]


# --- building blocks ---------------------------------------------------------

def rwse_positional_encoding(g: Graph | BatchedGraph, K: int) -> np.ndarray:
    """Random-walk return probabilities: entry ``(i, k)`` is the diagonal of
    ``(D^-1 A)^(k+1)`` at node ``i``.  Nodes without out-edges get zeros."""
    if K < 0:
        raise ValidationError("positional encoding width must be >= 0")
    n = g.num_nodes
    out = np.zeros((n, K))
    if K == 0:
        return out
    if isinstance(g, BatchedGraph):
        nodes, edges = g.node_offsets, g.edge_offsets
    else:
        nodes, edges = np.array([0, n]), np.array([0, g.num_edges])
    src, dst = np.asarray(g.src), np.asarray(g.dst)
    for b in range(len(nodes) - 1):
        n0, n1, e0, e1 = nodes[b], nodes[b + 1], edges[b], edges[b + 1]
        m = n1 - n0
        adj = np.zeros((m, m))
        np.add.at(adj, (src[e0:e1] - n0, dst[e0:e1] - n0), 1.0)
        deg = adj.sum(axis=1, keepdims=True)
        walk = np.divide(adj, deg, out=np.zeros_like(adj), where=deg > 0)
        power = walk
        for k in range(K):
            out[n0:n1, k] = np.diagonal(power)
            if k + 1 < K:
                power = power @ walk
    return out


def _rwse(batch: BatchedGraph, K: int) -> np.ndarray:
    key = ("rwse", K)
    if key not in batch.cache:
        batch.cache[key] = rwse_positional_encoding(batch, K)
    return batch.cache[key]


def embed_inputs(batch: BatchedGraph, params: ModelParams, config: ModelConfig):
    """Project node features (plus positional encoding) and edge features to
    the hidden width.  Returns ``(node_states [n, d'], edge_states [E, d'])``."""
    x = batch.node_features
    if x.shape[1] != params["embed.W_in"].shape[0]:
        raise ShapeError(f"node feature width {x.shape[1]} != model node_dim "
                         f"{params['embed.W_in'].shape[0]}")
    ef = batch.edge_features
    if ef.shape[1] != params["embed.W_edge"].shape[0]:
        raise ShapeError(f"edge feature width {ef.shape[1]} != model edge_dim "
                         f"{params['embed.W_edge'].shape[0]}")
    h = Tensor._wrap(x) @ params["embed.W_in"] + params["embed.b_in"]
    if config.pe_dim > 0:
        h = h + Tensor._wrap(_rwse(batch, config.pe_dim)) @ params["embed.W_pe"]
    e = Tensor._wrap(ef) @ params["embed.W_edge"] + params["embed.b_edge"]
    return h, e


def ffn_block(x: Tensor, W1: Tensor, b1: Tensor, W2: Tensor, b2: Tensor) -> Tensor:
    """Position-wise ``max(0, x W1 + b1) W2 + b2``."""
    return ad.relu(x @ W1 + b1) @ W2 + b2


def _query_key_bias(Q: Tensor, k: Tensor) -> Tensor:
    return (Q * k).sum(axis=-1)


def explicit_bias_terms(Q: Tensor, k: Tensor, e: Tensor, v: Tensor,
                        slot_weights: Tensor | None, config: ModelConfig | None = None):
    """Edge and node bias terms for one head (or all heads at once).

    ``Q`` is ``[n, d_k]`` (or ``[n, h, d_k]`` with ``k, e, v`` of shape
    ``[h, d_k]``).  Returns ``(b_e, b_v)`` with ``b_e[u] = (Q[u] . k) e`` and
    ``b_v[u] = slot_weights[u] * v``; ``b_v`` is None without slot weights.
    """
    if config is not None and not config.ebt:
        raise ValidationError("explicit bias terms requested on a model without EBT")
    qk = _query_key_bias(Q, k)
    b_e = qk.reshape(qk.shape + (1,)) * e
    b_v = None
    if slot_weights is not None:
        b_v = slot_weights.reshape(slot_weights.shape + (1,)) * v
    return b_e, b_v


def _dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * Tensor._wrap(keep)


def _raise_nonfinite(layer: int, raw: np.ndarray):
    bad = ~np.isfinite(raw)
    heads = sorted({int(i) for i in np.nonzero(bad)[1]}) if raw.ndim == 3 else []
    raise NumericalError(f"non-finite edge activation in layer {layer}, head(s) {heads}")


def edge_activations(h: Tensor, x: Tensor, batch: BatchedGraph, params: ModelParams,
                     config: ModelConfig, layer: int):
    """Per-head edge activations of one layer plus the per-node ``Q . k``
    term of the explicit bias (None without EBT).

    Returns ``(w [E, h, d_k], qk [n, h] | None)``.
    """
    pre = f"layers.{layer}."
    n, E = batch.num_nodes, batch.num_edges
    H, dk = config.num_heads, config.head_dim
    q = h @ params[pre + "W_Q"]
    k = h @ params[pre + "W_K"]
    ep = x @ params[pre + "W_E"]
    if config.ebt:
        q = q + params[pre + "b_Q"]
        k = k + params[pre + "b_K"]
        ep = ep + params[pre + "b_E"]
    q3 = q.reshape(n, H, dk)
    k3 = k.reshape(n, H, dk)
    scale = 1.0 / math.sqrt(dk)
    try:
        w = ad.gather(q3, batch.src) * ad.gather(k3, batch.dst) * ep.reshape(E, H, dk) * scale
        qk = None
        if config.ebt:
            qk = _query_key_bias(q3, params[pre + "ebt_k"])
            w = w + ad.gather(qk.reshape(n, H, 1) * params[pre + "ebt_e"], batch.src)
    except NumericalError:
        with np.errstate(all="ignore"):
            raw = (q3.data[batch.src] * k3.data[batch.dst]
                   * ep.data.reshape(E, H, dk) * scale)
        _raise_nonfinite(layer, raw)
    return w, qk


def attention_layer_forward(h: Tensor, x: Tensor, batch: BatchedGraph, params: ModelParams,
                            config: ModelConfig, layer: int, *, rng=None):
    """One transformer layer on both channels.

    Returns ``(node_states, edge_states, edge_activations)`` where the last
    item is the ``[E, h, d_k]`` tensor before the edge output projection.
    """
    pre = f"layers.{layer}."
    n, E = batch.num_nodes, batch.num_edges
    H, dk, d = config.num_heads, config.head_dim, config.hidden_dim
    if h.shape != (n, d) or x.shape != (E, d):
        raise ShapeError(f"layer {layer}: states {h.shape}, {x.shape} != ({n}, {d}), ({E}, {d})")
    w, qk = edge_activations(h, x, batch, params, config, layer)
    v = h @ params[pre + "W_V"]
    if config.ebt:
        v = v + params[pre + "b_V"]
    gv = x @ params[pre + "W_G"]
    scores = w.sum(axis=-1)
    slot = config.ebt and config.ebt_bias_slot
    if slot:
        slot_scores = qk * (1.0 / math.sqrt(dk))
        alpha_all = ad.segment_softmax(ad.concat([scores, slot_scores]),
                                       np.concatenate([batch.src, np.arange(n)]), n)
        alpha = alpha_all[:E]
        alpha_slot = alpha_all[E:]
    else:
        alpha = ad.segment_softmax(scores, batch.src, n)
    values = ad.gather(v.reshape(n, H, dk), batch.dst) + gv.reshape(E, H, dk)
    node_attn = ad.segment_sum(alpha.reshape(E, H, 1) * values, batch.src, n)
    if slot:
        node_attn = node_attn + alpha_slot.reshape(n, H, 1) * params[pre + "ebt_v"]
    node_out = _dropout(node_attn.reshape(n, d) @ params[pre + "W_O"], config.dropout, rng)
    edge_out = _dropout(w.reshape(E, d) @ params[pre + "W_Oe"], config.dropout, rng)

    def post(state, update, chan):
        p = lambda s: params[f"{pre}{chan}_{s}"]  # noqa: E731
        s1 = ad.layer_norm(state + update, p("ln1.scale"), p("ln1.shift"), config.ln_eps)
        f = ffn_block(s1, p("ffn.W1"), p("ffn.b1"), p("ffn.W2"), p("ffn.b2"))
        f = _dropout(f, config.dropout, rng)
        return ad.layer_norm(s1 + f, p("ln2.scale"), p("ln2.shift"), config.ln_eps)

    return post(h, node_out, "node"), post(x, edge_out, "edge"), w


def readout(h: Tensor, batch: BatchedGraph, params: ModelParams, config: ModelConfig,
            task: str | None = None) -> Tensor:
    """Graph tasks: mean-pool per graph then a two-layer MLP (sigmoid for
    multi-label).  Node multi-label: per-node linear map and sigmoid."""
    task = task or config.task
    if task != config.task:
        raise ValidationError(f"readout for {task!r} on a model built for {config.task!r}")
    if task == "node-multilabel":
        return ad.sigmoid(h @ params["readout.W_out"] + params["readout.b_out"])
    counts = np.bincount(batch.node_graph, minlength=batch.num_graphs).astype(np.float64)
    pooled = ad.segment_sum(h, batch.node_graph, batch.num_graphs) * Tensor._wrap(1.0 / counts[:, None])
    out = ad.relu(pooled @ params["readout.W1"] + params["readout.b1"]) @ params["readout.W2"] \
        + params["readout.b2"]
    if task == "graph-multilabel":
        out = ad.sigmoid(out)
    return out


def model_forward(batch: BatchedGraph, params: ModelParams, config: ModelConfig,
                  capture: bool = False, *, run_id: str = "run", batch_index: int = 0,
                  graph_ids: np.ndarray | None = None, rng=None):
    """Full forward pass.

    Returns ``(prediction, records)``; ``records`` holds one
    :class:`ActivationRecord` per layer, in layer order, when ``capture`` is
    set and is empty otherwise.  ``rng`` enables dropout (training only).
    """
    h, x = embed_inputs(batch, params, config)
    records = []
    member = batch.edge_graph if graph_ids is None else np.asarray(graph_ids)[batch.edge_graph]
    for layer in range(config.num_layers):
        try:
            h, x, w = attention_layer_forward(h, x, batch, params, config, layer, rng=rng)
        except NumericalError as exc:
            if f"layer {layer}" in str(exc):
                raise
            raise NumericalError(f"layer {layer}: {exc}") from exc
        if capture:
            records.append(ActivationRecord(run_id, batch_index, layer, w.data.copy(),
                                            batch.edge_types.copy(), member.copy()))
    return readout(h, batch, params, config), records
