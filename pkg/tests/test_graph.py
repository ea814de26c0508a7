from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualmix.errors import FormatError, ShapeError
from dualmix.graph import (
    cached_propagation,
    load_graph,
    normalize,
    propagate,
    read_dataset,
    write_dataset,
)

from conftest import dense_normalized, random_graph


def test_single_edge_is_symmetrized():
    g = load_graph([(0, 1)], np.zeros((2, 1)), [0, 0])
    assert g.adjacency.toarray().tolist() == [[0, 1], [1, 0]]
    assert g.n_edges == 1


def test_empty_edge_list():
    g = load_graph([], np.zeros((3, 2)), [0, 1, 2])
    assert g.adjacency.nnz == 0
    assert g.adjacency.shape == (3, 3)


def test_duplicate_and_reversed_edges_collapse():
    g = load_graph([(0, 1), (0, 1), (1, 0)], np.zeros((2, 1)), [0, 0])
    assert g.adjacency.nnz == 2
    assert set(g.adjacency.data) == {1.0}


def test_self_loops_are_dropped():
    g = load_graph([(0, 0), (0, 1)], np.zeros((2, 1)), [0, 0])
    assert g.adjacency.diagonal().tolist() == [0, 0]


def test_dangling_node_rejected():
    with pytest.raises(FormatError, match="node 5"):
        load_graph([(0, 5)], np.zeros((2, 1)), [0, 0])


def test_non_finite_feature_rejected():
    feats = np.array([[0.0], [np.nan]])
    with pytest.raises(FormatError, match="row 1"):
        load_graph([], feats, [0, 0])


def test_missing_label_rejected():
    with pytest.raises(FormatError):
        load_graph([], np.zeros((3, 1)), {0: 1, 1: 0})


def test_graph_arrays_are_read_only():
    g = load_graph([(0, 1)], np.zeros((2, 1)), [0, 1])
    with pytest.raises(ValueError):
        g.features[0, 0] = 1.0


def test_normalize_single_node():
    adj = normalize(load_graph([], np.zeros((1, 1)), [0]))
    assert adj.values.toarray().tolist() == [[1.0]]
    assert adj.degrees.tolist() == [1]


def test_normalize_single_edge():
    adj = normalize(load_graph([(0, 1)], np.zeros((2, 1)), [0, 0]))
    np.testing.assert_array_equal(adj.values.toarray(), np.full((2, 2), 0.5))


def test_normalize_path_graph():
    adj = normalize(load_graph([(0, 1), (1, 2)], np.zeros((3, 1)), [0, 0, 0]))
    assert adj.values[0, 1] == pytest.approx(1 / np.sqrt(6), abs=1e-15)
    assert adj.degrees.tolist() == [2, 3, 2]


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 12), p=st.floats(0.0, 1.0))
def test_normalize_matches_dense_oracle(seed, n, p):
    g = random_graph(np.random.default_rng(seed), n, p=p)
    adj = normalize(g)
    dense = adj.values.toarray()
    np.testing.assert_allclose(dense, dense_normalized(g), rtol=1e-12, atol=1e-15)
    np.testing.assert_array_equal(dense, dense.T)
    assert np.all(np.diag(dense) > 0)
    # stored entries are exactly the structure of A + I
    expected = (g.adjacency.toarray() + np.eye(n)) > 0
    np.testing.assert_array_equal(dense != 0, expected)


def test_normalize_degrees_stable_on_repeat(rng):
    g = random_graph(rng, 9)
    np.testing.assert_array_equal(normalize(g).degrees, normalize(g).degrees)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 12), hops=st.integers(0, 4))
def test_propagate_matches_dense_matrix_power(seed, n, hops):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, n, d=4)
    P = propagate(normalize(g), g.features, hops).values
    oracle = np.linalg.matrix_power(dense_normalized(g), hops) @ g.features
    np.testing.assert_allclose(P, oracle, rtol=1e-10, atol=1e-12)


def test_propagate_zero_hops_is_identity(rng):
    g = random_graph(rng, 7)
    np.testing.assert_array_equal(propagate(normalize(g), g.features, 0).values, g.features)


def test_propagate_isolated_nodes_unchanged(rng):
    feats = rng.standard_normal((4, 2))
    g = load_graph([], feats, [0, 0, 1, 1])
    np.testing.assert_array_equal(propagate(normalize(g), feats, 5).values, feats)


def test_propagate_two_node_average():
    g = load_graph([(0, 1)], np.array([[2.0], [0.0]]), [0, 0])
    np.testing.assert_allclose(propagate(normalize(g), g.features, 1).values, [[1.0], [1.0]])


def test_propagate_hops_compose(rng):
    g = random_graph(rng, 10, d=3)
    adj = normalize(g)
    two_then_three = propagate(adj, propagate(adj, g.features, 2).values, 3).values
    np.testing.assert_allclose(two_then_three, propagate(adj, g.features, 5).values, rtol=1e-10, atol=1e-12)


def test_propagate_shape_mismatch(rng):
    g = random_graph(rng, 5)
    with pytest.raises(ShapeError):
        propagate(normalize(g), np.zeros((4, 2)), 1)
    with pytest.raises(ShapeError):
        propagate(normalize(g), g.features, -1)


def test_dataset_round_trip_is_byte_identical(tmp_path, rng):
    g = random_graph(rng, 11, d=3)
    write_dataset(g, tmp_path / "a")
    again = read_dataset(tmp_path / "a")
    write_dataset(again, tmp_path / "b")
    for name in ("edges.tsv", "features.csv", "labels.tsv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    np.testing.assert_array_equal(again.features, g.features)
    assert (again.adjacency != g.adjacency).nnz == 0


def test_read_dataset_reports_bad_lines(tmp_path, rng):
    write_dataset(random_graph(rng, 4), tmp_path)
    (tmp_path / "edges.tsv").write_text("0\t1\n2\n")
    with pytest.raises(FormatError, match="edges.tsv:2"):
        read_dataset(tmp_path)


def test_read_dataset_missing_file(tmp_path):
    with pytest.raises(FormatError, match="missing"):
        read_dataset(tmp_path)


def test_propagation_cache_reused_and_invalidated(tmp_path, rng):
    g = random_graph(rng, 8, d=2)
    first = cached_propagation(g, 2, cache_dir=tmp_path)
    assert (tmp_path / "propagated_l2.npy").is_file()
    np.testing.assert_array_equal(cached_propagation(g, 2, cache_dir=tmp_path).values, first.values)

    other = load_graph(g.edge_list(), g.features + 1.0, g.labels)
    fresh = cached_propagation(other, 2, cache_dir=tmp_path)
    np.testing.assert_allclose(fresh.values, propagate(normalize(other), other.features, 2).values)
