"""scikit-learn style facades over the training and detection functions."""

from __future__ import annotations

from collections import defaultdict

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .detect import (DEFAULT_THRESHOLD, MAReport, activation_ratios, batch_max_ratios,
                     build_report, capture_activations, distribution_report, flag_massive)
from .errors import ValidationError
from .graphs import Dataset, Graph, batch_graphs, infer_task
from .model import ActivationRecord, ModelConfig, model_forward
from .trainer import TrainConfig, evaluate, train


def check_graphs(X, task: str | None = None, num_edge_types: int | None = None) -> Dataset:
    """Accept a Dataset or a sequence of Graph and return a Dataset."""
    if isinstance(X, Dataset):
        return X
    if isinstance(X, Graph):
        X = [X]
    graphs = list(X)
    if not graphs:
        raise ValidationError("no graphs given")
    if not all(isinstance(g, Graph) for g in graphs):
        raise ValidationError("expected a Dataset or a sequence of Graph")
    if num_edge_types is None:
        num_edge_types = max((int(g.edge_types.max()) for g in graphs if g.num_edges), default=1)
    if task is None:
        task = infer_task(graphs)
    return Dataset(tuple(graphs), task, num_edge_types)


def check_records(records) -> list[ActivationRecord]:
    recs = [records] if isinstance(records, ActivationRecord) else list(records)
    if not recs:
        raise ValidationError("no activation records given")
    if not all(isinstance(r, ActivationRecord) for r in recs):
        raise ValidationError("expected ActivationRecord instances")
    return recs


def check_threshold(threshold) -> float:
    t = float(threshold)
    if not t > 1:
        raise ValidationError(f"threshold must exceed 1, got {threshold}")
    return t


def _with_targets(ds: Dataset, y) -> Dataset:
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    if y.shape[0] != len(ds):
        raise ValidationError(f"{y.shape[0]} targets for {len(ds)} graphs")
    graphs = tuple(Graph(g.node_features, g.edges, g.edge_features, y[i], g.has_dummy)
                   for i, g in enumerate(ds.graphs))
    return Dataset(graphs, ds.task, ds.num_edge_types)


class GraphTransformerModel(BaseEstimator):
    """Edge-featured graph transformer trained with Adam.

    Parameters mirror :class:`ModelConfig` and :class:`TrainConfig`; input
    widths and the task are read from the training data.

    Attributes
    ----------
    config_ : ModelConfig
    params_ : ModelParams
    history_ : list of dict
        Row 0 is the initial model, row k the mean loss of epoch k.
    test_loss_ : float
    n_features_in_ : int
        Node feature width.
    """

    def __init__(self, num_layers=4, hidden_dim=64, num_heads=8, ffn_dim=128, pe_dim=8,
                 ebt=False, dropout=0.0, epochs=20, batch_size=32, learning_rate=1e-3,
                 weight_decay=0.0, random_state=0):
        self.num_layers = num_layers
        self.hidden_dim = hidden_dim
        self.num_heads = num_heads
        self.ffn_dim = ffn_dim
        self.pe_dim = pe_dim
        self.ebt = ebt
        self.dropout = dropout
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.random_state = random_state

    def _configs(self, ds: Dataset):
        mconf = ModelConfig.for_dataset(
            ds, num_layers=self.num_layers, hidden_dim=self.hidden_dim, num_heads=self.num_heads,
            ffn_dim=self.ffn_dim, pe_dim=self.pe_dim, ebt=self.ebt, dropout=self.dropout)
        tconf = TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.learning_rate,
                            weight_decay=self.weight_decay, seed=int(self.random_state or 0))
        return mconf, tconf

    def fit(self, X, y=None):
        """Train on graphs ``X``; ``y`` overrides the graph targets."""
        ds = check_graphs(X)
        if y is not None:
            ds = _with_targets(ds, y)
        mconf, tconf = self._configs(ds)
        result = train(ds, mconf, tconf)
        self.config_ = result.config
        self.params_ = result.params
        self.history_ = result.history
        self.test_loss_ = result.test_loss
        self.num_edge_types_ = ds.num_edge_types
        self.n_features_in_ = ds.node_dim
        return self

    def _dataset(self, X) -> Dataset:
        check_is_fitted(self, "params_")
        ds = check_graphs(X, self.config_.task, self.num_edge_types_)
        if ds.node_dim != self.n_features_in_:
            raise ValidationError(
                f"X has node width {ds.node_dim}, model was fitted with {self.n_features_in_}")
        return ds

    def predict(self, X, batch_size: int = 64) -> np.ndarray:
        """Graph tasks: ``(n_graphs, out_dim)``; node tasks: ``(n_nodes, out_dim)``."""
        ds = self._dataset(X)
        out = []
        for start in range(0, len(ds), batch_size):
            batch = batch_graphs(ds.graphs[start:start + batch_size], ds.num_edge_types)
            pred, _ = model_forward(batch, self.params_, self.config_)
            out.append(pred.data)
        return np.concatenate(out)

    def loss(self, X) -> float:
        """Mean task loss on ``X`` (targets required)."""
        ds = self._dataset(X)
        return evaluate(ds, np.arange(len(ds)), self.params_, self.config_)

    def capture(self, X, batch_size: int = 1, run_id: str = "run") -> list[ActivationRecord]:
        """Edge-activation records of every layer on ``X``."""
        ds = self._dataset(X)
        return capture_activations(ds, self.params_, self.config_, batch_size, run_id)


class MassiveActivationDetector(TransformerMixin, BaseEstimator):
    """Flags entries whose activation ratio exceeds ``threshold``.

    ``fit`` takes records of a reference (typically untrained) model and
    stores its per-layer range of batch maxima and gamma fits.  ``transform``
    maps records to boolean flag arrays.

    Attributes
    ----------
    base_range_ : dict
        ``layer -> (min, max)`` of the reference batch maxima.
    base_fits_ : dict
        ``layer -> GammaFit`` of the reference ``-log10(ratio)``, or None.
    """

    def __init__(self, threshold=DEFAULT_THRESHOLD, bins=100, log_base=10.0):
        self.threshold = threshold
        self.bins = bins
        self.log_base = log_base

    def fit(self, X, y=None):
        recs = check_records(X)
        check_threshold(self.threshold)
        stats = [activation_ratios(r) for r in recs]
        self.base_max_ = batch_max_ratios(stats)
        self.base_range_ = {layer: (min(b.values()), max(b.values()))
                            for layer, b in self.base_max_.items()}
        by_layer = defaultdict(list)
        for s in stats:
            by_layer[s.layer].append(s)
        self.base_fits_ = {}
        for layer, group in sorted(by_layer.items()):
            dist = distribution_report(group, self.bins, self.threshold, self.log_base, strict=False)
            self.base_fits_[layer] = dist.fit
        self.base_records_ = recs
        self.n_layers_ = len(self.base_max_)
        return self

    def transform(self, X) -> list[np.ndarray]:
        check_is_fitted(self, "base_max_")
        threshold = check_threshold(self.threshold)
        return [flag_massive(activation_ratios(r), threshold) for r in check_records(X)]

    def exceedances(self, X) -> dict[int, int]:
        """Per layer, the number of batches whose max ratio is above the
        reference range."""
        check_is_fitted(self, "base_max_")
        maxima = batch_max_ratios(activation_ratios(r) for r in check_records(X))
        if sorted(maxima) != sorted(self.base_range_):
            raise ValidationError("records and reference disagree on layers")
        return {layer: sum(v > self.base_range_[layer][1] for v in b.values())
                for layer, b in maxima.items()}

    def report(self, X) -> MAReport:
        check_is_fitted(self, "base_max_")
        return build_report(check_records(X), check_threshold(self.threshold), self.bins,
                            self.base_records_, self.log_base)
