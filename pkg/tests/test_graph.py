import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.sparse.csgraph import connected_components

from llfmc.core import DataError, FactorPair, ObservedMatrix
from llfmc.graph import (DIST_FLOOR, PairGraph, build_knn_graph, cut_cycles, distance_d1,
                         distance_d2, distance_source, incidence_gram_nnz, pairwise_d1,
                         pairwise_d2, refine_weights)

from oracles import d1_naive, d2_naive, dense_incidence


def random_sparse(rng, n, m, density):
    D = rng.integers(1, 6, size=(n, m)).astype(float)
    D[rng.random((n, m)) > density] = np.nan
    return D, ObservedMatrix.from_dense(D)


def n_components(g):
    if g.n_edges == 0:
        return g.n_nodes
    return connected_components((g.incidence() @ g.incidence().T), directed=False)[0]


# ---------------------------------------------------------------------------
# distances

def test_d1_examples():
    M = ObservedMatrix.from_dense(np.array([[1.0, 2.0, np.nan], [3.0, 4.0, np.nan],
                                            [np.nan, np.nan, 1.0]]))
    assert distance_d1(M, 0, 1) == pytest.approx(2.0)
    assert distance_d1(M, 0, 2) is None
    same = ObservedMatrix.from_dense(np.array([[1.0, 5.0, np.nan], [1.0, 5.0, 2.0]]))
    assert distance_d1(same, 0, 1) == 0.0


def test_d2_examples():
    D = np.array([[5.0, np.nan], [np.nan, 1.0], [1.0, 3.0]])
    M = ObservedMatrix.from_dense(D)
    assert distance_d2(M, 0, 1) == pytest.approx(np.sqrt(2.5))
    full = ObservedMatrix.from_dense(np.array([[1.0, 2.0], [1.0, 2.0]]))
    assert distance_d2(full, 0, 1) == 0.0
    # j's support inside i's, i's extra column equal to that column's mean
    sub = ObservedMatrix.from_dense(np.array([[2.0, 4.0], [2.0, np.nan], [np.nan, 4.0]]))
    assert distance_d2(sub, 0, 1) == pytest.approx(0.0, abs=1e-15)


def test_d2_both_unobserved():
    M = ObservedMatrix(3, 2, [0], [0], [1.0])
    with pytest.raises(DataError, match="both rows unobserved"):
        distance_d2(M, 1, 2)


def test_pairwise_distances_match_naive_oracles():
    rng = np.random.default_rng(0)
    D, M = random_sparse(rng, 15, 12, 0.3)
    P1, P2 = pairwise_d1(M), pairwise_d2(M)
    for i in range(15):
        for j in range(15):
            if i == j:
                continue
            r1 = d1_naive(D, i, j)
            if r1 is None:
                assert np.isnan(P1[i, j])
                assert distance_d1(M, i, j) is None
            else:
                assert P1[i, j] == pytest.approx(r1, abs=1e-6)
                assert distance_d1(M, i, j) == pytest.approx(r1, abs=1e-12)
            if (~np.isnan(D[i]) | ~np.isnan(D[j])).any():
                r2 = d2_naive(D, i, j)
                assert P2[i, j] == pytest.approx(r2, abs=1e-6)
                assert distance_d2(M, i, j) == pytest.approx(r2, abs=1e-12)


def test_distance_source_blocks_and_transpose():
    rng = np.random.default_rng(1)
    _, M = random_sparse(rng, 9, 7, 0.5)
    src = distance_source(M, "d2", transpose=True)
    assert src.n_nodes == 7
    full = src(np.arange(7))
    MT = ObservedMatrix(7, 9, M.cols, M.rows, M.values)
    assert np.allclose(full, pairwise_d2(MT), equal_nan=True)
    with pytest.raises(ValueError):
        distance_source(M, "d3")


# ---------------------------------------------------------------------------
# k-NN graphs

def test_knn_three_nodes():
    d = np.array([[0, 1, 2], [1, 0, 3], [2, 3, 0]], dtype=float)
    g = build_knn_graph(d, 1, "adaptive")
    # node 0 -> 1, node 1 -> 0, node 2 -> 0
    assert sorted(g.edges) == [(0, 1, 1.0), (0, 2, 0.5)]


def test_knn_unit_weights_and_clamp():
    d = np.array([[0, 0, 2], [0, 0, 3], [2, 3, 0]], dtype=float)
    assert set(build_knn_graph(d, 2, "unit").w.tolist()) == {1.0}
    g = build_knn_graph(d, 1, "adaptive")
    assert dict(((a, b), w) for a, b, w in g.edges)[(0, 1)] == 1.0 / DIST_FLOOR


def test_knn_argument_errors():
    d = np.zeros((3, 3))
    with pytest.raises(ValueError):
        build_knn_graph(d, 3)
    with pytest.raises(ValueError):
        build_knn_graph(d, 0)
    with pytest.raises(ValueError):
        build_knn_graph(np.zeros((1, 1)), 1)


def test_knn_absent_distances_rank_last():
    nan = np.nan
    d = np.array([[nan, nan, 5.0], [nan, nan, 1.0], [5.0, 1.0, nan]])
    g = build_knn_graph(d, 1, "unit")
    assert sorted((a, b) for a, b, _ in g.edges) == [(0, 2), (1, 2)]


@settings(max_examples=40, deadline=None)
@given(n=st.integers(2, 30), k=st.integers(1, 29), seed=st.integers(0, 10**6))
def test_knn_symmetry_brute_force(n, k, seed):
    k = min(k, n - 1)
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(n, 2))
    d = np.linalg.norm(pts[:, None] - pts[None], axis=2)
    g = build_knn_graph(d, k, "adaptive")
    lists = []
    for i in range(n):
        others = [j for j in np.argsort(d[i], kind="stable") if j != i]
        lists.append(set(others[:k]))
    expected = {(min(i, j), max(i, j)) for i in range(n) for j in lists[i]}
    got = {(a, b) for a, b, _ in g.edges}
    assert got == expected
    for a, b, w in g.edges:
        assert w == pytest.approx(1.0 / max(d[a, b], DIST_FLOOR))


def test_knn_from_callable_matches_matrix():
    rng = np.random.default_rng(2)
    _, M = random_sparse(rng, 40, 30, 0.3)
    g1 = build_knn_graph(pairwise_d2(M), 5, "adaptive")
    g2 = build_knn_graph(distance_source(M, "d2"), 5, "adaptive", block_size=7)
    assert g1.edges == g2.edges


def test_refine_weights_line():
    X = np.array([[0.0], [1.0], [10.0]])
    gx, gy = refine_weights(ObservedMatrix(3, 3, [0], [0], [1.0]),
                            FactorPair(X, X.copy()), 1)
    assert [(a, b) for a, b, _ in gx.edges] == [(0, 1), (1, 2)]
    assert gx.edges[1][2] == pytest.approx(1 / 9)


def test_refine_weights_identical_rows_clamped():
    X = np.ones((4, 2))
    gx, _ = refine_weights(ObservedMatrix(4, 4, [0], [0], [1.0]), FactorPair(X, X), 3)
    assert gx.n_edges == 6
    assert np.all(gx.w == 1.0 / DIST_FLOOR)


def test_refine_weights_size_mismatch():
    with pytest.raises(DataError):
        refine_weights(ObservedMatrix(3, 3, [0], [0], [1.0]),
                       FactorPair(np.ones((2, 1)), np.ones((3, 1))), 1)


# ---------------------------------------------------------------------------
# graph object

def test_pair_graph_validation():
    with pytest.raises(DataError):
        PairGraph(3, [1], [0], [1.0])
    with pytest.raises(DataError):
        PairGraph(3, [0, 0], [1, 1], [1.0, 1.0])
    with pytest.raises(DataError):
        PairGraph(3, [0], [1], [0.0])
    g = PairGraph.from_edges(3, [(1, 0, 2.0), (0, 1, 5.0), (2, 2, 1.0)])
    assert g.edges == [(0, 1, 5.0)]


def test_graph_csv_roundtrip(tmp_path):
    g = PairGraph(5, [0, 1, 3], [2, 4, 4], [1.0, 0.25, 3.5])
    p = tmp_path / "g.csv"
    g.to_csv(p)
    h = PairGraph.from_csv(p)
    assert h.n_nodes == 5 and h.edges == g.edges


def test_incidence_gram_nnz_examples():
    assert incidence_gram_nnz(PairGraph(3, [0, 1], [1, 2], [1.0, 1.0])) == 7
    assert incidence_gram_nnz(PairGraph.empty(4)) == 0


@settings(max_examples=50, deadline=None)
@given(n=st.integers(2, 25), p=st.floats(0.05, 0.9), seed=st.integers(0, 10**6))
def test_incidence_gram_nnz_matches_dense(n, p, seed):
    rng = np.random.default_rng(seed)
    iu = np.triu_indices(n, 1)
    keep = rng.random(iu[0].size) < p
    g = PairGraph(n, iu[0][keep], iu[1][keep], np.ones(keep.sum()))
    E = dense_incidence(n, g.l1, g.l2)
    assert incidence_gram_nnz(g) == np.count_nonzero(E @ E.T)


# ---------------------------------------------------------------------------
# cycle cutting

def test_cut_triangle_and_complete_graph():
    tri = PairGraph(3, [0, 0, 1], [1, 2, 2], [1.0, 1.0, 1.0])
    assert cut_cycles(tri, 0).n_edges == 2
    iu = np.triu_indices(5, 1)
    k5 = cut_cycles(PairGraph(5, iu[0], iu[1], np.ones(10)), 3)
    assert k5.n_edges == 4 and k5.acyclic and n_components(k5) == 1


def test_cut_keeps_forest_unchanged():
    g = PairGraph(6, [0, 1, 3], [1, 2, 4], [1.0, 2.0, 3.0])
    h = cut_cycles(g, 11)
    assert h.edges == g.edges and h.acyclic


def test_cut_is_seeded():
    rng = np.random.default_rng(5)
    iu = np.triu_indices(20, 1)
    keep = rng.random(iu[0].size) < 0.3
    g = PairGraph(20, iu[0][keep], iu[1][keep], rng.uniform(0.5, 2, keep.sum()))
    assert cut_cycles(g, 1).edges == cut_cycles(g, 1).edges


@settings(max_examples=60, deadline=None)
@given(n=st.integers(2, 50), p=st.floats(0.0, 0.6), seed=st.integers(0, 10**6))
def test_cut_gives_full_rank_forest_preserving_components(n, p, seed):
    rng = np.random.default_rng(seed)
    iu = np.triu_indices(n, 1)
    keep = rng.random(iu[0].size) < p
    g = PairGraph(n, iu[0][keep], iu[1][keep], np.ones(keep.sum()))
    h = cut_cycles(g, seed)
    assert h.acyclic and h.n_nodes == n
    assert set(h.edges) <= set(g.edges)
    assert n_components(h) == n_components(g)
    assert h.n_edges == n - n_components(g)
    if h.n_edges:
        E = dense_incidence(n, h.l1, h.l2)
        assert np.linalg.matrix_rank(E) == h.n_edges
