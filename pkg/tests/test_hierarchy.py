import numpy as np
import pytest
from helpers import SEVEN_NODE, TWO_LEAF, random_tree_edges, reachability_S
from hypothesis import given, settings
from hypothesis import strategies as st

from hiergnn.hierarchy import (
    HierarchyError,
    aggregate,
    build_hierarchy,
    check_coherence,
    historical_proportions,
    read_hierarchy,
    reconcile_bottom_up,
    reconcile_top_down,
    summing_matrix,
    write_hierarchy,
)
from hiergnn.tensor import Tensor, backward
from hiergnn import tensor as T


def test_smallest_hierarchy():
    h = build_hierarchy(TWO_LEAF)
    assert (h.m, h.n) == (3, 2)
    assert dict(h.level_of) == {"T": 0, "B1": 1, "B2": 1}
    assert h.node_ids == ("T", "B1", "B2")


def test_seven_node_tree():
    h = build_hierarchy(SEVEN_NODE)
    assert (h.m, h.n, h.n_levels) == (7, 4, 3)
    assert h.node_ids == ("T", "R1", "R2", "B1", "B2", "B3", "B4")


@pytest.mark.parametrize(
    "edges, match",
    [
        ([("A", "B"), ("B", "A")], "cycle"),
        ([("A", "A")], "cycle"),
        ([], "no edges"),
        ([("B1", "T1"), ("B2", "T2")], "one top"),
        ([("B1", "R1"), ("B1", "R2"), ("R1", "T"), ("R2", "T")], "several parents"),
    ],
)
def test_invalid_hierarchies(edges, match):
    with pytest.raises(HierarchyError, match=match):
        build_hierarchy(edges)


def test_summing_matrix_examples():
    np.testing.assert_array_equal(summing_matrix(build_hierarchy(TWO_LEAF)).entries, [[1, 1], [1, 0], [0, 1]])
    h = build_hierarchy(SEVEN_NODE)
    S = summing_matrix(h).entries
    np.testing.assert_array_equal(S[h.index_of["R1"]], [1, 1, 0, 0])
    np.testing.assert_array_equal(S[h.index_of["T"]], [1, 1, 1, 1])
    np.testing.assert_array_equal(summing_matrix(build_hierarchy([("B", "T")])).entries, [[1], [1]])


def test_summing_matrix_is_read_only():
    S = build_hierarchy(TWO_LEAF).S
    with pytest.raises(ValueError):
        S.entries[0, 0] = 5.0


def test_aggregate_examples():
    S = build_hierarchy(TWO_LEAF).S
    np.testing.assert_array_equal(aggregate(S, np.array([[2.0], [3.0]])).full, [[5], [2], [3]])
    np.testing.assert_array_equal(aggregate(S, np.zeros((2, 4))).full, np.zeros((3, 4)))
    h = build_hierarchy(SEVEN_NODE)
    full = aggregate(h.S, np.array([[1.0], [2.0], [3.0], [4.0]])).full
    assert full[h.index_of["T"], 0] == 10 and full[h.index_of["R2"], 0] == 7


def test_aggregate_row_mismatch():
    with pytest.raises(ValueError):
        aggregate(build_hierarchy(TWO_LEAF).S, np.zeros((3, 1)))


def test_aggregate_is_differentiable():
    h = build_hierarchy(SEVEN_NODE)
    b = Tensor(np.ones((4, 2)), requires_grad=True)
    g = backward(T.sum_(aggregate(h.S, b).full)).for_(b)
    # each leaf appears in itself, its parent and the top
    np.testing.assert_array_equal(g, np.full((4, 2), 3.0))


def test_check_coherence_examples():
    S = build_hierarchy(TWO_LEAF).S
    full = aggregate(S, np.array([[2.0, 1.0], [3.0, 0.5]])).full
    ok, gap = check_coherence(full, S, 1e-12)
    assert ok and gap <= 1e-12
    bad = full.copy()
    bad[0, 1] += 0.1
    ok, gap = check_coherence(bad, S, 1e-6)
    assert not ok and abs(gap - 0.1) < 1e-12
    assert check_coherence(bad, S, 1.0)[0]


def test_reconcile_bottom_up_examples():
    S = build_hierarchy(TWO_LEAF).S
    np.testing.assert_array_equal(reconcile_bottom_up(np.array([[9.0], [2.0], [3.0]]), S).full, [[5], [2], [3]])
    coherent = np.array([[5.0], [2.0], [3.0]])
    np.testing.assert_array_equal(reconcile_bottom_up(coherent, S).full, coherent)
    h = build_hierarchy(SEVEN_NODE)
    base = np.random.default_rng(0).normal(size=(7, 3))
    full = reconcile_bottom_up(base, h.S).full
    np.testing.assert_allclose(full[0], base[3:].sum(axis=0), atol=1e-12)


def test_reconcile_bottom_up_is_idempotent():
    h = build_hierarchy(SEVEN_NODE)
    once = reconcile_bottom_up(np.random.default_rng(1).normal(size=(7, 2)), h.S).full
    np.testing.assert_array_equal(reconcile_bottom_up(once, h.S).full, once)


def test_reconcile_top_down_examples():
    S = build_hierarchy(TWO_LEAF).S
    fs = reconcile_top_down([10.0], [0.5, 0.5], S)
    np.testing.assert_array_equal(fs.bottom, [[5], [5]])
    assert fs.full[0, 0] == 10
    np.testing.assert_array_equal(reconcile_top_down([10.0], [1.0, 0.0], S).bottom, [[10], [0]])
    np.testing.assert_allclose(reconcile_top_down([9.0], [1 / 3, 2 / 3], S).bottom, [[3], [6]], atol=1e-12)


@pytest.mark.parametrize("p", [[0.6, 0.6], [1.2, -0.2]])
def test_reconcile_top_down_rejects_bad_proportions(p):
    with pytest.raises(ValueError):
        reconcile_top_down([1.0], p, build_hierarchy(TWO_LEAF).S)


def test_historical_proportions_share_arithmetic():
    np.testing.assert_allclose(historical_proportions(np.array([[1.0, 1.0], [3.0, 3.0]])), [0.25, 0.75])


def test_hundred_random_trees_identity_block_and_reachability():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        edges = random_tree_edges(rng)
        h = build_hierarchy(edges)
        S = h.S.entries
        np.testing.assert_array_equal(S[h.a :], np.eye(h.n))
        np.testing.assert_array_equal(S, reachability_S(h.node_ids, h.bottom_ids, edges))
        # each column counts the leaf's ancestor chain plus itself
        np.testing.assert_array_equal(S.sum(axis=0), [len(h.ancestors(b)) + 1 for b in h.bottom_ids])
        assert np.all(S.sum(axis=0) >= 2)


def test_levels_are_depths_and_ordering_is_deterministic():
    rng = np.random.default_rng(7)
    edges = random_tree_edges(rng)
    h1 = build_hierarchy(edges)
    h2 = build_hierarchy(list(reversed(edges)))
    assert h1.node_ids == h2.node_ids
    for nid in h1.node_ids:
        assert h1.level_of[nid] == len(h1.ancestors(nid))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(-3, 3), st.floats(-3, 3))
def test_aggregate_is_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    h = build_hierarchy(random_tree_edges(rng, max_leaves=16))
    X, Y = rng.normal(size=(h.n, 3)), rng.normal(size=(h.n, 3))
    lhs = aggregate(h.S, a * X + b * Y).full
    rhs = a * aggregate(h.S, X).full + b * aggregate(h.S, Y).full
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_hierarchy_file_round_trip(tmp_path):
    h = build_hierarchy(SEVEN_NODE)
    path = tmp_path / "h.csv"
    write_hierarchy(h, path)
    text = path.read_text()
    path.write_text("# comment line\n" + text)
    h2 = read_hierarchy(path)
    assert h2.node_ids == h.node_ids
    np.testing.assert_array_equal(h2.S.entries, h.S.entries)


def test_hierarchy_file_needs_header(tmp_path):
    path = tmp_path / "h.csv"
    path.write_text("B1,T\n")
    with pytest.raises(HierarchyError, match="header"):
        read_hierarchy(path)
