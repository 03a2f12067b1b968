import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphma.errors import ValidationError
from graphma.graphs import (DUMMY_IN_TYPE, DUMMY_OUT_TYPE, Dataset, GeneratorConfig, Graph,
                            add_dummy_node, augment_dataset, batch_graphs, dumps_jsonl,
                            edge_feature_matrix, edge_type_frequencies, generate_synthetic,
                            load_jsonl, remove_dummy_node, unbatch, write_jsonl)


def triangle(**kw):
    edges = [[0, 1, 1], [1, 0, 1], [1, 2, 2], [2, 1, 2], [0, 2, 3], [2, 0, 3]]
    return Graph(np.eye(3), edges, **kw)


def test_graph_validation_names_the_bad_edge():
    with pytest.raises(ValidationError, match="edge 1"):
        Graph(np.eye(2), [[0, 1, 1], [1, 5, 1]])
    with pytest.raises(ValidationError):
        Graph(np.eye(2), [[0, 1, 0]])
    with pytest.raises(ValidationError):
        Graph(np.zeros((0, 3)), [])
    with pytest.raises(ValidationError):
        Graph(np.eye(2), [[0, 1, 1]], edge_features=np.ones((2, 2)))
    with pytest.raises(ValidationError):
        Graph(np.eye(2), [[0, 1, 1]], target=np.ones((3, 2)))


def test_graph_arrays_are_read_only():
    g = triangle()
    with pytest.raises(ValueError):
        g.node_features[0, 0] = 5.0


def test_edge_feature_matrix_one_hot():
    f = edge_feature_matrix(triangle(), 4)
    assert f.shape == (6, 4)
    np.testing.assert_array_equal(f.argmax(1), [0, 0, 1, 1, 2, 2])
    np.testing.assert_array_equal(f.sum(1), 1.0)


def test_dataset_validation():
    g = triangle(target=[1.0])
    with pytest.raises(ValidationError):
        Dataset((g,), "graph-regression", 2)  # type 3 present
    with pytest.raises(ValidationError):
        Dataset((g, Graph(np.ones((2, 4)), [])), "graph-regression", 3)
    with pytest.raises(ValidationError):
        Dataset((g,), "node-multilabel", 3)
    with pytest.raises(ValidationError):
        Dataset((g,), "bogus", 3)


def test_jsonl_round_trip(tmp_path):
    ds = generate_synthetic(GeneratorConfig(num_graphs=12, seed=4))
    path = tmp_path / "d.jsonl"
    write_jsonl(ds, path)
    back = load_jsonl(path)
    assert back.task == ds.task and len(back) == 12
    assert all(a.same_as(b) for a, b in zip(ds, back))
    assert dumps_jsonl(back) == path.read_text()


def test_jsonl_errors_carry_line_numbers(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"nodes": [[1]], "edges": []}\n{"nodes": [[1]], "edges": [[0, 3, 1]]}\n')
    with pytest.raises(ValidationError, match=r"bad.jsonl:2:"):
        load_jsonl(p)
    p.write_text('{"nodes": [[1]]}\nnot json\n')
    with pytest.raises(ValidationError, match=r":2: malformed JSON"):
        load_jsonl(p)
    p.write_text('{"nodes": [[1, 2], [3]]}\n')
    with pytest.raises(ValidationError, match="inconsistent"):
        load_jsonl(p)
    p.write_text("\n")
    with pytest.raises(ValidationError):
        load_jsonl(p)


def test_jsonl_node_level_targets_and_explicit_features(tmp_path):
    p = tmp_path / "n.jsonl"
    row = {"nodes": [[1, 0], [0, 1]], "edges": [[0, 1, 1], [1, 0, 2]],
           "edge_feats": [[0.5], [1.5]], "y": [[1, 0], [0, 1]]}
    p.write_text(json.dumps(row) + "\n")
    ds = load_jsonl(p)
    assert ds.task == "node-multilabel" and ds.edge_dim == 1 and ds.target_dim == 2


def test_generator_determinism_and_target_formula():
    cfg = GeneratorConfig(num_graphs=30, noise_sigma=0.0, seed=9)
    a, b = generate_synthetic(cfg), generate_synthetic(cfg)
    assert all(x.same_as(y) for x, y in zip(a, b))
    for g in a:
        # every bond stored both ways, graph connected
        fwd = {(u, v, t) for u, v, t in g.edges.tolist()}
        assert all((v, u, t) in fwd for u, v, t in fwd)
        bond_types = g.edge_types[::2]
        y = np.sum(bond_types == 2) + 3 * np.sum(bond_types == 3) + 0.1 * g.num_nodes
        assert g.target[0] == pytest.approx(y, abs=1e-12)
        assert cfg.nodes_min <= g.num_nodes <= cfg.nodes_max
        assert g.num_edges >= 2 * (g.num_nodes - 1)
    assert not all(x.same_as(y) for x, y in zip(a, generate_synthetic(cfg, seed=10)))


def test_generator_type_skew():
    ds = generate_synthetic(GeneratorConfig(num_graphs=400, seed=0))
    f = edge_type_frequencies(ds)
    assert f[1] == pytest.approx(0.9, abs=0.02)
    assert f[2] == pytest.approx(0.0974, abs=0.02)
    assert 0 < f.get(3, 0.0) < 0.01
    assert sum(f.values()) == pytest.approx(1.0, abs=1e-12)


def test_generator_config_validation():
    with pytest.raises(ValidationError):
        GeneratorConfig(type_probs=(0.5, 0.4))
    with pytest.raises(ValidationError):
        GeneratorConfig.from_dict({"num_graph": 3})
    with pytest.raises(ValidationError):
        GeneratorConfig(nodes_min=5, nodes_max=2)


def test_dummy_node_structure():
    g = triangle(target=[2.0])
    a = add_dummy_node(g)
    n = g.num_nodes
    assert a.num_nodes == n + 1 and a.num_edges == g.num_edges + 2 * n
    np.testing.assert_array_equal(a.node_features[-1], 0.0)
    np.testing.assert_array_equal(a.edges[:g.num_edges], g.edges)
    new = a.edges[g.num_edges:]
    assert set(map(tuple, new[new[:, 2] == DUMMY_IN_TYPE][:, :2].tolist())) == {(u, n) for u in range(n)}
    assert set(map(tuple, new[new[:, 2] == DUMMY_OUT_TYPE][:, :2].tolist())) == {(n, u) for u in range(n)}
    assert a.has_dummy
    with pytest.raises(ValidationError):
        add_dummy_node(a)
    with pytest.raises(ValidationError):
        remove_dummy_node(g)


def test_dummy_node_explicit_features_and_node_targets():
    g = Graph(np.eye(2), [[0, 1, 1], [1, 0, 1]], edge_features=[[0.3], [0.7]],
              target=[[1.0], [0.0]])
    a = add_dummy_node(g)
    assert a.edge_features.shape == (6, 3)
    np.testing.assert_array_equal(a.edge_features[2:, 1:], [[1, 0], [0, 1], [1, 0], [0, 1]])
    assert np.isnan(a.target[-1, 0])
    assert remove_dummy_node(a).same_as(g)


def test_augment_dataset_types():
    ds = generate_synthetic(GeneratorConfig(num_graphs=5, seed=1))
    aug = augment_dataset(ds)
    assert aug.num_edge_types == 5 and aug.has_dummy and aug.edge_dim == 5


def test_batch_and_unbatch_round_trip(small_ds):
    graphs = list(small_ds)[:7]
    b = batch_graphs(graphs, small_ds.num_edge_types)
    assert b.num_graphs == 7
    assert b.num_nodes == sum(g.num_nodes for g in graphs)
    assert b.num_edges == sum(g.num_edges for g in graphs)
    # every edge stays inside its graph's node block
    assert np.all(b.node_graph[b.src] == b.edge_graph)
    assert np.all(b.node_graph[b.dst] == b.edge_graph)
    assert b.targets.shape == (7, 1)
    assert all(x.same_as(y) for x, y in zip(graphs, unbatch(b)))


def test_batch_rejects_mixed_widths():
    with pytest.raises(ValidationError):
        batch_graphs([triangle(), Graph(np.ones((2, 5)), [])])
    with pytest.raises(ValidationError):
        batch_graphs([])


def test_edge_type_frequencies_errors():
    with pytest.raises(ValidationError):
        edge_type_frequencies([])
    with pytest.raises(ValidationError):
        edge_type_frequencies([Graph(np.eye(2), [])])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 25), st.integers(0, 2**31 - 1))
def test_property_dummy_round_trip(n, seed):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(0, 3 * n + 1))
    edges = np.column_stack([rng.integers(0, n, m), rng.integers(0, n, m), rng.integers(1, 4, m)])
    g = Graph(rng.normal(size=(n, 3)), edges, target=[1.0])
    a = add_dummy_node(g)
    assert a.num_nodes == n + 1 and a.num_edges == m + 2 * n
    assert int(np.sum(a.edge_types == 4)) == n and int(np.sum(a.edge_types == 5)) == n
    assert remove_dummy_node(a).same_as(g)
