"""Graph data model, JSONL ingestion, synthetic molecule-like data,
dummy-node augmentation and batching."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ValidationError

TASKS = ("graph-regression", "graph-multilabel", "node-multilabel")

DUMMY_IN_TYPE = 4
DUMMY_OUT_TYPE = 5


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Graph:
    """A directed, typed-edge graph with optional targets.

    ``edges`` is an ``(E, 3)`` integer array of ``(src, dst, type)`` rows with
    types counted from 1.  When ``edge_features`` is None the features are a
    one-hot encoding of the type (see :func:`edge_feature_matrix`).
    """

    node_features: np.ndarray
    edges: np.ndarray
    edge_features: np.ndarray | None = None
    target: np.ndarray | None = None
    has_dummy: bool = False

    def __post_init__(self):
        x = np.array(self.node_features, dtype=np.float64)
        if x.ndim == 1:
            x = x.reshape(1, -1) if x.size else x.reshape(0, 0)
        if x.ndim != 2 or x.shape[0] < 1:
            raise ValidationError("graph needs at least one node with a feature vector")
        e = np.array(self.edges, dtype=np.int64).reshape(-1, 3)
        n = x.shape[0]
        if e.size:
            if e[:, :2].min() < 0 or e[:, :2].max() >= n:
                bad = int(np.flatnonzero((e[:, :2] < 0).any(1) | (e[:, :2] >= n).any(1))[0])
                raise ValidationError(
                    f"edge {bad} ({e[bad, 0]}->{e[bad, 1]}) references a node outside [0, {n})")
            if e[:, 2].min() < 1:
                raise ValidationError("edge types must be positive integers")
        object.__setattr__(self, "node_features", _frozen(x))
        object.__setattr__(self, "edges", _frozen(e))
        if self.edge_features is not None:
            ef = np.array(self.edge_features, dtype=np.float64)
            if ef.ndim != 2 or ef.shape[0] != e.shape[0]:
                raise ValidationError(
                    f"edge_features has shape {ef.shape}, expected ({e.shape[0]}, d_edge)")
            object.__setattr__(self, "edge_features", _frozen(ef))
        if self.target is not None:
            y = np.array(self.target, dtype=np.float64)
            if y.ndim == 2 and y.shape[0] != n:
                raise ValidationError(f"node-level target has {y.shape[0]} rows for {n} nodes")
            object.__setattr__(self, "target", _frozen(y))

    @property
    def num_nodes(self) -> int:
        return self.node_features.shape[0]

    @property
    def num_edges(self) -> int:
        return self.edges.shape[0]

    @property
    def src(self) -> np.ndarray:
        return self.edges[:, 0]

    @property
    def dst(self) -> np.ndarray:
        return self.edges[:, 1]

    @property
    def edge_types(self) -> np.ndarray:
        return self.edges[:, 2]

    @property
    def node_dim(self) -> int:
        return self.node_features.shape[1]

    def same_as(self, other: "Graph") -> bool:
        """Exact structural and numerical equality."""
        def eq(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and np.array_equal(a, b)

        return (self.has_dummy == other.has_dummy
                and eq(self.node_features, other.node_features)
                and eq(self.edges, other.edges)
                and eq(self.edge_features, other.edge_features)
                and eq(self.target, other.target))


@dataclass(frozen=True, eq=False)
class Dataset:
    graphs: tuple[Graph, ...]
    task: str = "graph-regression"
    num_edge_types: int = 1

    def __post_init__(self):
        graphs = tuple(self.graphs)
        object.__setattr__(self, "graphs", graphs)
        if self.task not in TASKS:
            raise ValidationError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if not graphs:
            return
        d_node = graphs[0].node_dim
        explicit = graphs[0].edge_features is not None
        d_edge = graphs[0].edge_features.shape[1] if explicit else None
        arity = None
        max_type = 0
        for i, g in enumerate(graphs):
            if g.node_dim != d_node:
                raise ValidationError(f"graph {i}: node feature width {g.node_dim} != {d_node}")
            if (g.edge_features is not None) != explicit or (
                    explicit and g.edge_features.shape[1] != d_edge):
                raise ValidationError(f"graph {i}: inconsistent edge feature widths")
            if g.num_edges:
                max_type = max(max_type, int(g.edge_types.max()))
            if g.target is not None:
                node_level = g.target.ndim == 2
                if node_level != (self.task == "node-multilabel"):
                    raise ValidationError(f"graph {i}: target shape {g.target.shape} "
                                          f"does not match task {self.task}")
                a = g.target.shape[-1]
                if arity is None:
                    arity = a
                elif a != arity:
                    raise ValidationError(f"graph {i}: target arity {a} != {arity}")
        if max_type > self.num_edge_types:
            raise ValidationError(
                f"edge type {max_type} exceeds num_edge_types={self.num_edge_types}")

    def __len__(self):
        return len(self.graphs)

    def __iter__(self):
        return iter(self.graphs)

    def __getitem__(self, i):
        return self.graphs[i]

    @property
    def node_dim(self) -> int:
        return self.graphs[0].node_dim

    @property
    def edge_dim(self) -> int:
        g = self.graphs[0]
        return g.edge_features.shape[1] if g.edge_features is not None else self.num_edge_types

    @property
    def target_dim(self) -> int:
        for g in self.graphs:
            if g.target is not None:
                return g.target.shape[-1]
        return 1

    @property
    def has_dummy(self) -> bool:
        return any(g.has_dummy for g in self.graphs)

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return Dataset(tuple(self.graphs[i] for i in indices), self.task, self.num_edge_types)


def edge_feature_matrix(g: Graph, num_edge_types: int) -> np.ndarray:
    """Explicit edge features, or a one-hot encoding of the type of width
    ``num_edge_types``."""
    if g.edge_features is not None:
        return np.asarray(g.edge_features)
    out = np.zeros((g.num_edges, num_edge_types))
    out[np.arange(g.num_edges), g.edge_types - 1] = 1.0
    return out


# --- JSON Lines -----------------------------------------------------------------

def _graph_from_obj(obj) -> Graph:
    if not isinstance(obj, dict):
        raise ValidationError("expected a JSON object")
    if "nodes" not in obj:
        raise ValidationError("missing 'nodes'")
    nodes = obj["nodes"]
    if not isinstance(nodes, list) or not nodes or not all(isinstance(r, list) for r in nodes):
        raise ValidationError("'nodes' must be a non-empty list of feature lists")
    widths = {len(r) for r in nodes}
    if len(widths) != 1:
        raise ValidationError(f"inconsistent node feature widths {sorted(widths)}")
    edges = obj.get("edges", [])
    if not all(isinstance(e, list) and len(e) == 3 for e in edges):
        raise ValidationError("each edge must be [src, dst, type]")
    feats = obj.get("edge_feats")
    if feats is not None:
        fw = {len(r) for r in feats}
        if len(fw) > 1:
            raise ValidationError(f"inconsistent edge feature widths {sorted(fw)}")
        if len(feats) != len(edges):
            raise ValidationError(f"{len(feats)} edge_feats rows for {len(edges)} edges")
    y = obj.get("y")
    if y is not None and y and isinstance(y[0], list):
        if len({len(r) for r in y}) != 1:
            raise ValidationError("inconsistent node target widths")
    return Graph(
        node_features=np.array(nodes, dtype=np.float64),
        edges=np.array(edges, dtype=np.int64).reshape(-1, 3),
        edge_features=None if feats is None else np.array(feats, dtype=np.float64).reshape(len(edges), -1),
        target=None if y is None else np.array(y, dtype=np.float64),
        has_dummy=bool(obj.get("has_dummy", False)),
    )


def infer_task(graphs: Sequence[Graph]) -> str:
    for g in graphs:
        if g.target is not None:
            return "node-multilabel" if g.target.ndim == 2 else "graph-regression"
    return "graph-regression"


def load_jsonl(path, task: str | None = None, num_edge_types: int | None = None) -> Dataset:
    """Read one graph per line.

    Errors carry the 1-based line number.  ``task`` defaults to
    node-multilabel for nested targets and graph-regression otherwise;
    ``num_edge_types`` defaults to the largest type present.
    """
    graphs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                graphs.append(_graph_from_obj(json.loads(line)))
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
            except ValidationError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from exc
    if not graphs:
        raise ValidationError(f"{path}: no graphs")
    max_type = max((int(g.edge_types.max()) for g in graphs if g.num_edges), default=1)
    if any(g.has_dummy for g in graphs):
        max_type = max(max_type, DUMMY_OUT_TYPE)
    return Dataset(tuple(graphs), task or infer_task(graphs), num_edge_types or max_type)


def _graph_to_obj(g: Graph) -> dict:
    obj = {"nodes": g.node_features.tolist(), "edges": g.edges.tolist()}
    if g.edge_features is not None:
        obj["edge_feats"] = g.edge_features.tolist()
    if g.target is not None:
        obj["y"] = g.target.tolist()
    if g.has_dummy:
        obj["has_dummy"] = True
    return obj


def dumps_jsonl(ds: Dataset) -> str:
    return "".join(json.dumps(_graph_to_obj(g), separators=(",", ":")) + "\n" for g in ds)


def write_jsonl(ds: Dataset, path) -> None:
    atomic_write_text(path, dumps_jsonl(ds))


def atomic_write_bytes(path, data: bytes) -> None:
    path = os.fspath(path)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# --- synthetic data ---------------------------------------------------------

@dataclass
class GeneratorConfig:
    num_graphs: int = 200
    nodes_min: int = 10
    nodes_max: int = 30
    extra_edge_prob: float = 0.02
    type_probs: tuple[float, ...] = (0.9, 0.0974, 0.0026)
    noise_sigma: float = 0.1
    seed: int = 0
    num_atom_types: int = 8

    def __post_init__(self):
        self.type_probs = tuple(float(p) for p in self.type_probs)
        if abs(sum(self.type_probs) - 1.0) > 1e-9:
            raise ValidationError(f"type_probs sum to {sum(self.type_probs)!r}, not 1")
        if any(p < 0 for p in self.type_probs):
            raise ValidationError("type_probs must be non-negative")
        if self.num_graphs < 0 or not 1 <= self.nodes_min <= self.nodes_max:
            raise ValidationError("need num_graphs >= 0 and 1 <= nodes_min <= nodes_max")
        if not 0.0 <= self.extra_edge_prob <= 1.0:
            raise ValidationError("extra_edge_prob must lie in [0, 1]")
        if self.noise_sigma < 0 or self.num_atom_types < 1:
            raise ValidationError("noise_sigma must be >= 0 and num_atom_types >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown generator config keys: {sorted(unknown)}")
        return cls(**d)


def generate_synthetic(config: GeneratorConfig, seed: int | None = None) -> Dataset:
    """Connected random molecule-like graphs with a graph-regression target.

    Each graph is a random spanning tree plus extra bonds, each bond stored
    in both directions with a type drawn from ``config.type_probs``.  The
    target counts bonds (not directed edges)::

        y = n_double + 3 * n_triple + 0.1 * n_nodes + N(0, noise_sigma)
    """
    rng = np.random.default_rng(config.seed if seed is None else seed)
    probs = np.asarray(config.type_probs)
    num_types = len(probs)
    graphs = []
    for _ in range(config.num_graphs):
        n = int(rng.integers(config.nodes_min, config.nodes_max + 1))
        order = rng.permutation(n)
        bonds = []
        for i in range(1, n):
            j = int(rng.integers(0, i))
            bonds.append((int(order[i]), int(order[j])))
        present = {frozenset(b) for b in bonds}
        if n > 2 and config.extra_edge_prob > 0:
            iu, ju = np.triu_indices(n, k=1)
            pick = rng.random(iu.shape[0]) < config.extra_edge_prob
            for u, v in zip(iu[pick], ju[pick]):
                if frozenset((int(u), int(v))) not in present:
                    bonds.append((int(u), int(v)))
        types = rng.choice(num_types, size=len(bonds), p=probs) + 1
        edges = np.empty((2 * len(bonds), 3), dtype=np.int64)
        for k, ((u, v), t) in enumerate(zip(bonds, types)):
            edges[2 * k] = (u, v, t)
            edges[2 * k + 1] = (v, u, t)
        atoms = rng.integers(0, config.num_atom_types, size=n)
        x = np.zeros((n, config.num_atom_types))
        x[np.arange(n), atoms] = 1.0
        y = (np.sum(types == 2) + 3.0 * np.sum(types == 3) + 0.1 * n
             + config.noise_sigma * rng.standard_normal())
        graphs.append(Graph(x, edges, target=np.array([y])))
    return Dataset(tuple(graphs), "graph-regression", max(num_types, 1))


# --- dummy node -------------------------------------------------------------

def add_dummy_node(g: Graph) -> Graph:
    """Append a zero-feature node linked to every original node.

    Adds ``u -> dummy`` (type 4) and ``dummy -> u`` (type 5) for every
    original node ``u``; the original edges stay a prefix of the edge list.
    Explicit edge features are widened by two trailing one-hot columns
    marking the two dummy directions.
    """
    if g.has_dummy:
        raise ValidationError("graph already has a dummy node")
    n = g.num_nodes
    nodes = np.vstack([g.node_features, np.zeros((1, g.node_dim))])
    orig = np.arange(n, dtype=np.int64)
    new = np.empty((2 * n, 3), dtype=np.int64)
    new[0::2] = np.stack([orig, np.full(n, n), np.full(n, DUMMY_IN_TYPE)], axis=1)
    new[1::2] = np.stack([np.full(n, n), orig, np.full(n, DUMMY_OUT_TYPE)], axis=1)
    edges = np.vstack([g.edges, new])
    feats = None
    if g.edge_features is not None:
        d = g.edge_features.shape[1]
        top = np.hstack([g.edge_features, np.zeros((g.num_edges, 2))])
        bottom = np.zeros((2 * n, d + 2))
        bottom[0::2, d] = 1.0
        bottom[1::2, d + 1] = 1.0
        feats = np.vstack([top, bottom])
    target = g.target
    if target is not None and target.ndim == 2:
        target = np.vstack([target, np.full((1, target.shape[1]), np.nan)])
    return Graph(nodes, edges, feats, target, has_dummy=True)


def remove_dummy_node(g: Graph) -> Graph:
    """Inverse of :func:`add_dummy_node`."""
    if not g.has_dummy:
        raise ValidationError("graph has no dummy node")
    n = g.num_nodes - 1
    keep = (g.src != n) & (g.dst != n)
    feats = None
    if g.edge_features is not None:
        feats = g.edge_features[keep][:, :-2]
    target = g.target
    if target is not None and target.ndim == 2:
        target = target[:n]
    return Graph(g.node_features[:n], g.edges[keep], feats, target, has_dummy=False)


def augment_dataset(ds: Dataset) -> Dataset:
    """Apply :func:`add_dummy_node` to every graph."""
    return Dataset(tuple(add_dummy_node(g) for g in ds), ds.task,
                   max(ds.num_edge_types, DUMMY_OUT_TYPE))


# --- batching ----------------------------------------------------------------

@dataclass(eq=False)
class BatchedGraph:
    """Disjoint union of graphs with node indices offset per member."""

    node_features: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    edge_types: np.ndarray
    edge_features: np.ndarray
    node_graph: np.ndarray
    edge_graph: np.ndarray
    node_offsets: np.ndarray
    edge_offsets: np.ndarray
    targets: np.ndarray | None
    node_level: bool
    explicit_edge_features: bool
    has_dummy: tuple[bool, ...]
    cache: dict = field(default_factory=dict, repr=False)

    @property
    def num_nodes(self) -> int:
        return self.node_features.shape[0]

    @property
    def num_edges(self) -> int:
        return self.src.shape[0]

    @property
    def num_graphs(self) -> int:
        return self.node_offsets.shape[0] - 1


def batch_graphs(graphs: Sequence[Graph], num_edge_types: int | None = None) -> BatchedGraph:
    """Stack graphs into one disconnected graph, keeping membership arrays
    for pooling and per-graph statistics."""
    graphs = list(graphs)
    if not graphs:
        raise ValidationError("cannot batch an empty list of graphs")
    d_node = graphs[0].node_dim
    explicit = graphs[0].edge_features is not None
    if num_edge_types is None:
        num_edge_types = max((int(g.edge_types.max()) for g in graphs if g.num_edges), default=1)
    feats, n_off, e_off = [], [0], [0]
    for i, g in enumerate(graphs):
        if g.node_dim != d_node:
            raise ValidationError(f"graph {i}: node feature width {g.node_dim} != {d_node}")
        if (g.edge_features is not None) != explicit:
            raise ValidationError(f"graph {i}: mixes explicit and type-derived edge features")
        f = edge_feature_matrix(g, num_edge_types)
        if feats and f.shape[1] != feats[0].shape[1]:
            raise ValidationError(f"graph {i}: edge feature width {f.shape[1]} != {feats[0].shape[1]}")
        feats.append(f)
        n_off.append(n_off[-1] + g.num_nodes)
        e_off.append(e_off[-1] + g.num_edges)
    n_off_arr = np.array(n_off, dtype=np.int64)
    shift = np.repeat(n_off_arr[:-1], [g.num_edges for g in graphs])
    edges = np.vstack([g.edges for g in graphs])
    targets = None
    node_level = False
    if all(g.target is not None for g in graphs):
        node_level = graphs[0].target.ndim == 2
        if graphs[0].target.ndim == 2:
            targets = np.vstack([g.target for g in graphs])
        else:
            targets = np.stack([g.target for g in graphs])
    return BatchedGraph(
        node_features=np.vstack([g.node_features for g in graphs]),
        src=edges[:, 0] + shift,
        dst=edges[:, 1] + shift,
        edge_types=edges[:, 2].copy(),
        edge_features=np.vstack(feats) if feats else np.zeros((0, num_edge_types)),
        node_graph=np.repeat(np.arange(len(graphs)), [g.num_nodes for g in graphs]),
        edge_graph=np.repeat(np.arange(len(graphs)), [g.num_edges for g in graphs]),
        node_offsets=n_off_arr,
        edge_offsets=np.array(e_off, dtype=np.int64),
        targets=targets,
        node_level=node_level,
        explicit_edge_features=explicit,
        has_dummy=tuple(g.has_dummy for g in graphs),
    )


def unbatch(batch: BatchedGraph) -> list[Graph]:
    """Split a batch back into its member graphs."""
    out = []
    node_level = batch.node_level
    for i in range(batch.num_graphs):
        n0, n1 = batch.node_offsets[i], batch.node_offsets[i + 1]
        e0, e1 = batch.edge_offsets[i], batch.edge_offsets[i + 1]
        edges = np.stack([batch.src[e0:e1] - n0, batch.dst[e0:e1] - n0, batch.edge_types[e0:e1]], axis=1)
        target = None
        if batch.targets is not None:
            target = batch.targets[n0:n1] if node_level else batch.targets[i]
        out.append(Graph(
            batch.node_features[n0:n1], edges,
            batch.edge_features[e0:e1] if batch.explicit_edge_features else None,
            target, batch.has_dummy[i]))
    return out


def edge_type_frequencies(ds: Dataset | Sequence[Graph]) -> dict[int, float]:
    """Fraction of (directed) edges carrying each type present."""
    graphs = list(ds)
    if not graphs:
        raise ValidationError("empty dataset")
    types = np.concatenate([g.edge_types for g in graphs])
    if types.size == 0:
        raise ValidationError("dataset has no edges")
    values, counts = np.unique(types, return_counts=True)
    total = counts.sum()
    return {int(t): float(c) / float(total) for t, c in zip(values, counts)}
