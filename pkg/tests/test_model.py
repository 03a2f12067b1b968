import math

import numpy as np
import pytest

from graphma import autodiff as ad
from graphma.autodiff import GradientTape, Tensor
from graphma.errors import NumericalError, ShapeError, ValidationError
from graphma.graphs import Graph, batch_graphs
from graphma.model import (ModelConfig, ModelParams, attention_layer_forward, embed_inputs,
                           explicit_bias_terms, init_params, model_forward,
                           rwse_positional_encoding)


def _ln(x, s, b, eps):
    mu = x.mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(x.var(-1, keepdims=True) + eps) * s + b


def loop_layer(h, x, src, dst, P, cfg, layer):
    """Edge-by-edge, node-by-node reference of one attention layer."""
    g = lambda k: P[f"layers.{layer}.{k}"].data  # noqa: E731
    n, E = h.shape[0], x.shape[0]
    H, dk = cfg.num_heads, cfg.head_dim
    Q, K, V, Ep, G = h @ g("W_Q"), h @ g("W_K"), h @ g("W_V"), x @ g("W_E"), x @ g("W_G")
    if cfg.ebt:
        Q, K, V, Ep = Q + g("b_Q"), K + g("b_K"), V + g("b_V"), Ep + g("b_E")
    w = np.zeros((E, H, dk))
    attn = np.zeros((n, H, dk))
    for j in range(H):
        cols = slice(j * dk, (j + 1) * dk)
        for e in range(E):
            u, v = src[e], dst[e]
            w[e, j] = Q[u, cols] * K[v, cols] * Ep[e, cols] / math.sqrt(dk)
            if cfg.ebt:
                w[e, j] += np.dot(Q[u, cols], g("ebt_k")[j]) * g("ebt_e")[j]
        for u in range(n):
            out_e = [e for e in range(E) if src[e] == u]
            scores = [w[e, j].sum() for e in out_e]
            vals = [V[dst[e], cols] + G[e, cols] for e in out_e]
            if cfg.ebt and cfg.ebt_bias_slot:
                scores.append(np.dot(Q[u, cols], g("ebt_k")[j]) / math.sqrt(dk))
                vals.append(g("ebt_v")[j])
            if not scores:
                continue
            s = np.array(scores)
            a = np.exp(s - s.max())
            a /= a.sum()
            attn[u, j] = sum(ai * vi for ai, vi in zip(a, vals))
    node = attn.reshape(n, -1) @ g("W_O")
    edge = w.reshape(E, -1) @ g("W_Oe")

    def post(state, upd, ch):
        p = lambda k: g(f"{ch}_{k}")  # noqa: E731
        s1 = _ln(state + upd, p("ln1.scale"), p("ln1.shift"), cfg.ln_eps)
        f = np.maximum(s1 @ p("ffn.W1") + p("ffn.b1"), 0) @ p("ffn.W2") + p("ffn.b2")
        return _ln(s1 + f, p("ln2.scale"), p("ln2.shift"), cfg.ln_eps)

    return post(h, node, "node"), post(x, edge, "edge"), w


def _perturb(params, rng, scale=0.3):
    for t in params.values():
        t.data = t.data + scale * rng.normal(size=t.shape)
    return params


@pytest.mark.parametrize("ebt,slot", [(False, True), (True, True), (True, False)])
def test_layer_matches_loop_oracle(small_ds, tiny_config, ebt, slot):
    cfg = ModelConfig.from_dict({**tiny_config.to_dict(), "ebt": ebt, "ebt_bias_slot": slot})
    P = _perturb(init_params(cfg, 0), np.random.default_rng(1))
    # graph with an isolated (no out-edge) node and a multi-edge
    g = Graph(np.eye(small_ds.node_dim)[:4],
              [[0, 1, 1], [1, 0, 1], [0, 1, 2], [2, 1, 3], [1, 2, 3]], target=[1.0])
    batch = batch_graphs([g, small_ds[0]], small_ds.num_edge_types)
    h, x = embed_inputs(batch, P, cfg)
    h2, x2, w = attention_layer_forward(h, x, batch, P, cfg, 1)
    rh, rx, rw = loop_layer(h.data, x.data, batch.src, batch.dst, P, cfg, 1)
    np.testing.assert_allclose(w.data, rw, rtol=1e-12, atol=1e-13)
    np.testing.assert_allclose(h2.data, rh, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(x2.data, rx, rtol=1e-10, atol=1e-12)


def test_rwse_matches_matrix_power():
    g = Graph(np.eye(4), [[0, 1, 1], [1, 0, 1], [1, 2, 1], [2, 1, 1], [2, 0, 1], [0, 2, 1]])
    pe = rwse_positional_encoding(g, 5)
    A = np.zeros((4, 4))
    for u, v, _ in g.edges:
        A[u, v] += 1
    deg = A.sum(1, keepdims=True)
    M = np.divide(A, deg, out=np.zeros_like(A), where=deg > 0)
    for k in range(5):
        np.testing.assert_allclose(pe[:, k], np.diag(np.linalg.matrix_power(M, k + 1)), atol=1e-15)
    assert np.all(pe[3] == 0)


def test_rwse_batched_equals_per_graph(small_ds):
    graphs = list(small_ds)[:3]
    b = batch_graphs(graphs, small_ds.num_edge_types)
    stacked = np.vstack([rwse_positional_encoding(g, 4) for g in graphs])
    np.testing.assert_allclose(rwse_positional_encoding(b, 4), stacked, atol=1e-15)


def test_init_is_seeded_and_ordered(tiny_config):
    a, b = init_params(tiny_config, 5), init_params(tiny_config, 5)
    assert a.equals(b) and not a.equals(init_params(tiny_config, 6))
    names = a.names()
    assert names[0] == "embed.W_in" and names[-1] == "readout.b2"
    assert a["layers.0.node_ln1.scale"].data.tolist() == [1.0] * tiny_config.hidden_dim
    v = a.to_vector()
    c = init_params(tiny_config, 7)
    c.load_vector(v)
    assert c.equals(a)
    with pytest.raises(ShapeError):
        c.load_vector(v[:-1])


def test_config_validation(tiny_config):
    with pytest.raises(ValidationError):
        ModelConfig(hidden_dim=10, num_heads=3)
    with pytest.raises(ValidationError):
        ModelConfig(task="nope")
    with pytest.raises(ValidationError):
        ModelConfig.from_dict({"layers": 2})
    assert ModelConfig.from_dict(tiny_config.to_dict()) == tiny_config


def test_ebt_parameters_zero_biases(tiny_config):
    cfg = ModelConfig.from_dict({**tiny_config.to_dict(), "ebt": True})
    p = init_params(cfg, 0)
    assert np.all(p["layers.0.b_Q"].data == 0)
    assert p["layers.0.ebt_k"].shape == (cfg.num_heads, cfg.head_dim)
    assert np.any(p["layers.0.ebt_k"].data != 0)


def test_explicit_bias_terms_values_and_guard(tiny_config):
    rng = np.random.default_rng(0)
    Q, k, e, v = rng.normal(size=(5, 4)), rng.normal(size=4), rng.normal(size=4), rng.normal(size=4)
    slot = rng.random(5)
    b_e, b_v = explicit_bias_terms(Tensor(Q), Tensor(k), Tensor(e), Tensor(v), Tensor(slot))
    np.testing.assert_allclose(b_e.data, np.outer(Q @ k, e), rtol=1e-14)
    np.testing.assert_allclose(b_v.data, np.outer(slot, v), rtol=1e-14)
    with pytest.raises(ValidationError):
        explicit_bias_terms(Tensor(Q), Tensor(k), Tensor(e), Tensor(v), None, tiny_config)


def test_ebt_zero_equivalence(small_ds, tiny_config):
    base = init_params(tiny_config, 3)
    cfg = ModelConfig.from_dict({**tiny_config.to_dict(), "ebt": True, "ebt_bias_slot": False})
    p = init_params(cfg, 3)
    for k in p.names():
        if k in base:
            p[k] = Tensor(base[k].data.copy(), requires_grad=True)
        else:
            p[k].data = np.zeros(p[k].shape)
    batch = batch_graphs(list(small_ds)[:5], small_ds.num_edge_types)
    a, ra = model_forward(batch, base, tiny_config, capture=True)
    b, rb = model_forward(batch, p, cfg, capture=True)
    assert np.array_equal(a.data, b.data)
    assert all(np.array_equal(x.activations, y.activations) for x, y in zip(ra, rb))


def test_model_forward_shapes_and_records(small_ds, tiny_config):
    b = batch_graphs(list(small_ds)[:4], small_ds.num_edge_types)
    pred, recs = model_forward(b, init_params(tiny_config, 0), tiny_config, capture=True,
                               run_id="r", batch_index=7, graph_ids=np.array([10, 11, 12, 13]))
    assert pred.shape == (4, 1)
    assert [r.layer for r in recs] == [0, 1]
    r = recs[0]
    assert r.activations.shape == (b.num_edges, 2, 4) and r.batch_index == 7 and r.run_id == "r"
    assert set(r.edge_graph.tolist()) == {10, 11, 12, 13}
    assert model_forward(b, init_params(tiny_config, 0), tiny_config)[1] == []


def test_batching_does_not_mix_graphs(small_ds, tiny_config):
    p = init_params(tiny_config, 0)
    graphs = list(small_ds)[:3]
    joint = model_forward(batch_graphs(graphs, 3), p, tiny_config)[0].data
    single = np.vstack([model_forward(batch_graphs([g], 3), p, tiny_config)[0].data for g in graphs])
    np.testing.assert_allclose(joint, single, rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("task,out", [("graph-multilabel", 3), ("node-multilabel", 2)])
def test_multilabel_readouts_are_probabilities(small_ds, task, out):
    cfg = ModelConfig(num_layers=1, hidden_dim=8, num_heads=2, ffn_dim=8, task=task,
                      node_dim=small_ds.node_dim, edge_dim=3, out_dim=out)
    b = batch_graphs(list(small_ds)[:2], 3)
    pred = model_forward(b, init_params(cfg, 0), cfg)[0].data
    rows = 2 if task == "graph-multilabel" else b.num_nodes
    assert pred.shape == (rows, out) and np.all((pred > 0) & (pred < 1))


def test_shape_error_on_width_mismatch(small_ds, tiny_config):
    cfg = ModelConfig.from_dict({**tiny_config.to_dict(), "edge_dim": 5})
    with pytest.raises(ShapeError):
        model_forward(batch_graphs(list(small_ds)[:2], 3), init_params(cfg, 0), cfg)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_activation_names_layer(small_ds, tiny_config):
    p = init_params(tiny_config, 0)
    p["layers.1.W_E"].data[:] = 1e200
    with pytest.raises(NumericalError, match="layer 1"):
        model_forward(batch_graphs(list(small_ds)[:2], 3), p, tiny_config)
    p["layers.1.W_Q"].data[:, :4] = 1e200
    with pytest.raises(NumericalError, match=r"layer 1, head\(s\) \[0\]"):
        model_forward(batch_graphs(list(small_ds)[:2], 3), p, tiny_config)


def test_model_gradient_directional(small_ds, tiny_config):
    cfg = ModelConfig.from_dict({**tiny_config.to_dict(), "ebt": True})
    p = init_params(cfg, 2)
    b = batch_graphs(list(small_ds)[:3], 3)
    y = b.targets

    def loss_of(vec):
        q = p.copy()
        q.load_vector(vec)
        return float(((model_forward(b, q, cfg)[0].data - y) ** 2).mean())

    with GradientTape() as tape:
        pred, _ = model_forward(b, p, cfg)
        d = pred - Tensor(y)
        loss = (d * d).mean()
    g = np.concatenate([x.reshape(-1) for x in tape.backward(loss, p.values())])
    rng = np.random.default_rng(0)
    for _ in range(3):
        v = rng.normal(size=g.size)
        fd = ad.directional_difference(loss_of, p.to_vector(), v, 1e-6)
        assert ad.relative_error(g @ v, fd) < 1e-6
