"""Pairwise-penalty graphs: distances, k-NN construction and cycle cutting."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.spatial.distance import cdist

from .core import DataError, FactorPair, ObservedMatrix

#: lower clamp on distances before inverting them into adaptive weights
DIST_FLOOR = 1e-8


@dataclass(frozen=True, eq=False)
class PairGraph:
    """Weighted undirected graph over latent-vector indices.

    Edges are stored as parallel arrays ``l1 < l2`` with positive weights ``w``.
    Column ``l`` of the incidence matrix is ``e_{l1} - e_{l2}``.
    """

    n_nodes: int
    l1: np.ndarray
    l2: np.ndarray
    w: np.ndarray
    acyclic: bool = False

    def __post_init__(self):
        l1 = np.asarray(self.l1, dtype=np.int64).ravel()
        l2 = np.asarray(self.l2, dtype=np.int64).ravel()
        w = np.asarray(self.w, dtype=np.float64).ravel()
        if not (l1.shape == l2.shape == w.shape):
            raise DataError("edge arrays must have equal length")
        if l1.size:
            if np.any(l1 >= l2):
                raise DataError("edges must satisfy l1 < l2 (no self-loops)")
            if l1.min() < 0 or l2.max() >= self.n_nodes:
                raise DataError("edge endpoint out of range")
            if np.any(w <= 0) or not np.all(np.isfinite(w)):
                raise DataError("edge weights must be positive and finite")
            key = l1 * self.n_nodes + l2
            if np.unique(key).size != key.size:
                raise DataError("duplicate edges")
        for a in (l1, l2, w):
            a.setflags(write=False)
        object.__setattr__(self, "l1", l1)
        object.__setattr__(self, "l2", l2)
        object.__setattr__(self, "w", w)

    @classmethod
    def empty(cls, n_nodes: int) -> PairGraph:
        z = np.zeros(0, dtype=np.int64)
        return cls(n_nodes, z, z, np.zeros(0), acyclic=True)

    @classmethod
    def from_edges(cls, n_nodes, edges, acyclic=False) -> PairGraph:
        """Build from ``(i, j, w)`` triples in any orientation; duplicates keep the max weight."""
        edges = list(edges)
        if not edges:
            return cls.empty(n_nodes)
        a = np.array([e[0] for e in edges], dtype=np.int64)
        b = np.array([e[1] for e in edges], dtype=np.int64)
        w = np.array([e[2] if len(e) > 2 else 1.0 for e in edges], dtype=np.float64)
        return _dedupe(n_nodes, a, b, w, acyclic)

    @property
    def n_edges(self) -> int:
        return int(self.l1.size)

    @property
    def edges(self) -> list[tuple[int, int, float]]:
        return list(zip(self.l1.tolist(), self.l2.tolist(), self.w.tolist()))

    @property
    def max_weight(self) -> float:
        return float(self.w.max()) if self.w.size else 0.0

    def incidence(self) -> sp.csc_matrix:
        """Sparse ``n_nodes x n_edges`` incidence matrix E."""
        L = self.n_edges
        data = np.concatenate([np.ones(L), -np.ones(L)])
        rows = np.concatenate([self.l1, self.l2])
        cols = np.concatenate([np.arange(L), np.arange(L)])
        return sp.csc_matrix((data, (rows, cols)), shape=(self.n_nodes, L))

    def laplacian(self) -> sp.csr_matrix:
        """Unweighted ``E E^T``."""
        E = self.incidence()
        return (E @ E.T).tocsr()

    def degrees(self) -> np.ndarray:
        return (np.bincount(self.l1, minlength=self.n_nodes)
                + np.bincount(self.l2, minlength=self.n_nodes))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="\n") as fh:
            fh.write(f"# n_nodes={self.n_nodes}\n")
            for a, b, w in self.edges:
                fh.write(f"{a},{b},{w!r}\n")

    @classmethod
    def from_csv(cls, path, n_nodes=None) -> PairGraph:
        """Read ``l1,l2,w`` lines; ``# n_nodes=...`` fixes the node count."""
        edges = []
        file_n = None
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                s = line.strip()
                if not s:
                    continue
                if s.startswith("#"):
                    body = s.lstrip("#").strip()
                    if body.startswith("n_nodes="):
                        file_n = int(body.split("=", 1)[1])
                    continue
                parts = s.split(",")
                try:
                    a, b = int(parts[0]), int(parts[1])
                    w = float(parts[2]) if len(parts) > 2 else 1.0
                except (ValueError, IndexError):
                    if lineno == 1:
                        continue
                    from .core import ParseError
                    raise ParseError(f"{path}:{lineno}: bad edge line {s!r}") from None
                if a == b:
                    continue
                edges.append((a, b, w))
        if n_nodes is None:
            n_nodes = file_n
        if n_nodes is None:
            n_nodes = 1 + max((max(a, b) for a, b, _ in edges), default=-1)
        return cls.from_edges(n_nodes, [e for e in edges if e[2] > 0])


def _dedupe(n_nodes, a, b, w, acyclic=False):
    keep = a != b
    a, b, w = a[keep], b[keep], w[keep]
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    key = lo * n_nodes + hi
    order = np.lexsort((-w, key))
    key, lo, hi, w = key[order], lo[order], hi[order], w[order]
    first = np.ones(key.size, dtype=bool)
    first[1:] = key[1:] != key[:-1]
    return PairGraph(n_nodes, lo[first], hi[first], w[first], acyclic=acyclic)


# ---------------------------------------------------------------------------
# distances

def distance_d1(M: ObservedMatrix, i: int, j: int):
    """RMS difference of rows ``i`` and ``j`` over their common support, or None."""
    if i == j:
        raise ValueError("distance requires two distinct rows")
    ci, vi = M.row_index(i), M.row_values(i)
    cj, vj = M.row_index(j), M.row_values(j)
    common, ia, ja = np.intersect1d(ci, cj, assume_unique=True, return_indices=True)
    if common.size == 0:
        return None
    return float(np.sqrt(np.mean((vi[ia] - vj[ja]) ** 2)))


def distance_d2(M: ObservedMatrix, i: int, j: int) -> float:
    """RMS difference over the union of supports, imputing column means."""
    if i == j:
        raise ValueError("distance requires two distinct rows")
    means = M.col_means()
    ci, vi = M.row_index(i), M.row_values(i)
    cj, vj = M.row_index(j), M.row_values(j)
    union = np.union1d(ci, cj)
    if union.size == 0:
        raise DataError("both rows unobserved")
    fi = means[union].copy()
    fj = means[union].copy()
    fi[np.searchsorted(union, ci)] = vi
    fj[np.searchsorted(union, cj)] = vj
    return float(np.sqrt(np.mean((fi - fj) ** 2)))


def _dense_parts(M: ObservedMatrix):
    B = M.mask().astype(np.float64)
    R = np.zeros(M.shape)
    R[M.rows, M.cols] = M.values
    return B, R


def pairwise_d1(M: ObservedMatrix, block_rows=None):
    """Dense ``n x n`` matrix of d1 distances, ``nan`` where supports are disjoint.

    With ``block_rows`` given, returns the ``len(block_rows) x n`` slice.
    """
    B, R = _dense_parts(M)
    return _d1_block(B, R, np.arange(M.n_rows) if block_rows is None else block_rows)


def _d1_block(B, R, idx):
    Bi, Ri = B[idx], R[idx]
    R2 = R * R
    counts = Bi @ B.T
    sq = (Ri * Ri) @ B.T + Bi @ R2.T - 2.0 * (Ri @ R.T)
    with np.errstate(invalid="ignore", divide="ignore"):
        d = np.sqrt(np.maximum(sq, 0.0) / counts)
    d[counts == 0] = np.nan
    d[np.arange(len(idx)), idx] = np.nan
    return d


def pairwise_d2(M: ObservedMatrix, block_rows=None):
    """Dense matrix of d2 distances (union support, column-mean imputation)."""
    B, R = _dense_parts(M)
    mu = np.nan_to_num(M.col_means())
    D = (R - mu) * B
    return _d2_block(B, R, D, np.arange(M.n_rows) if block_rows is None else block_rows)


def _d2_block(B, R, D, idx):
    Bi, Ri, Di = B[idx], R[idx], D[idx]
    D2 = D * D
    both = (Ri * Ri) @ B.T + Bi @ (R * R).T - 2.0 * (Ri @ R.T)
    only_i = (Di * Di).sum(axis=1)[:, None] - (Di * Di) @ B.T
    only_j = D2.sum(axis=1)[None, :] - Bi @ D2.T
    common = Bi @ B.T
    union = Bi.sum(axis=1)[:, None] + B.sum(axis=1)[None, :] - common
    with np.errstate(invalid="ignore", divide="ignore"):
        d = np.sqrt(np.maximum(both + only_i + only_j, 0.0) / union)
    d[union == 0] = np.nan
    d[np.arange(len(idx)), idx] = np.nan
    return d


def pairwise_euclidean(F, block_rows=None):
    F = np.asarray(F, dtype=np.float64)
    idx = np.arange(F.shape[0]) if block_rows is None else np.asarray(block_rows)
    d = cdist(F[idx], F)
    d[np.arange(len(idx)), idx] = np.nan
    return d


def distance_source(M: ObservedMatrix, kind: str, transpose=False):
    """Blockwise distance callable over the rows (or columns) of ``M``.

    The result is accepted by :func:`build_knn_graph` and avoids materialising
    an ``n x n`` matrix for tall data.
    """
    if transpose:
        M = ObservedMatrix(M.n_cols, M.n_rows, M.cols, M.rows, M.values)
    B, R = _dense_parts(M)
    if kind == "d1":
        fn = lambda idx: _d1_block(B, R, idx)  # noqa: E731
    elif kind == "d2":
        mu = np.nan_to_num(M.col_means())
        D = (R - mu) * B
        fn = lambda idx: _d2_block(B, R, D, idx)  # noqa: E731
    else:
        raise ValueError(f"unknown distance {kind!r}")
    fn.n_nodes = M.n_rows
    return fn


# ---------------------------------------------------------------------------
# graph construction

def build_knn_graph(dist, k: int, weighting: str = "adaptive", block_size: int = 512):
    """k-nearest-neighbour graph from pairwise distances.

    Parameters
    ----------
    dist : ndarray or callable
        Either a square distance matrix (``nan`` = no evidence, excluded from
        ranking) or a callable mapping an index array to the corresponding rows
        of that matrix; the callable needs an ``n_nodes`` attribute.
    k : int
        Neighbours proposed per node. Ties are broken by node index.
    weighting : {"adaptive", "unit"}
        ``adaptive`` uses ``1 / max(d, 1e-8)``, ``unit`` uses 1.

    Each node proposes edges to its ``k`` nearest neighbours; proposals are
    merged to ``l1 < l2`` keeping the larger weight.
    """
    if weighting not in ("adaptive", "unit"):
        raise ValueError(f"unknown weighting {weighting!r}")
    if callable(dist):
        n = int(dist.n_nodes)
        blocks = ((np.arange(s, min(s + block_size, n)),) for s in range(0, n, block_size))
        getter = dist
    else:
        dist = np.asarray(dist, dtype=np.float64)
        n = dist.shape[0]
        if dist.shape != (n, n):
            raise ValueError("distance matrix must be square")
        blocks = ((np.arange(s, min(s + block_size, n)),) for s in range(0, n, block_size))
        getter = lambda idx: dist[idx].copy()  # noqa: E731
    if n < 2:
        raise ValueError("need at least 2 nodes")
    if not 1 <= k < n:
        raise ValueError(f"k={k} must satisfy 1 <= k < n_nodes={n}")
    src, dst, dd = [], [], []
    for (idx,) in blocks:
        D = np.array(getter(idx), dtype=np.float64)
        D[np.arange(len(idx)), idx] = np.nan
        key = np.where(np.isnan(D), np.inf, D)
        order = np.argsort(key, axis=1, kind="stable")[:, :k]
        dsel = np.take_along_axis(key, order, axis=1)
        ok = np.isfinite(dsel)
        src.append(np.repeat(idx, k).reshape(len(idx), k)[ok])
        dst.append(order[ok])
        dd.append(dsel[ok])
    src = np.concatenate(src)
    dst = np.concatenate(dst)
    dd = np.concatenate(dd)
    if weighting == "unit":
        w = np.ones_like(dd)
    else:
        w = 1.0 / np.maximum(dd, DIST_FLOOR)
    return _dedupe(n, src, dst, w)


def refine_weights(M: ObservedMatrix, first_pass: FactorPair, k):
    """Second-pass adaptive k-NN graphs from learned latent rows.

    ``k`` is an int or a ``(k_x, k_y)`` pair. Returns ``(graph_x, graph_y)``
    built from Euclidean distances between rows of ``first_pass.X`` and
    ``first_pass.Y``.
    """
    kx, ky = (k, k) if np.isscalar(k) else k
    if first_pass.X.shape[0] != M.n_rows or first_pass.Y.shape[0] != M.n_cols:
        raise DataError(
            f"factors {first_pass.X.shape}/{first_pass.Y.shape} do not match "
            f"matrix shape {M.shape}"
        )
    gx = knn_from_factors(first_pass.X, kx)
    gy = knn_from_factors(first_pass.Y, ky)
    return gx, gy


def knn_from_factors(F, k, weighting="adaptive"):
    F = np.asarray(F, dtype=np.float64)
    fn = lambda idx: pairwise_euclidean(F, idx)  # noqa: E731
    fn.n_nodes = F.shape[0]
    return build_knn_graph(fn, k, weighting)


def cut_cycles(g: PairGraph, seed=0) -> PairGraph:
    """Spanning forest of ``g`` found by depth-first search in random order.

    Every non-tree edge closes a cycle and is dropped, which is the same as
    cutting one edge per cycle until none remain. Node set and connected
    components are preserved.
    """
    rng = np.random.default_rng(seed)
    n = g.n_nodes
    if g.n_edges == 0:
        return PairGraph(n, g.l1, g.l2, g.w, acyclic=True)
    perm = rng.permutation(g.n_edges)
    a = np.concatenate([g.l1[perm], g.l2[perm]])
    b = np.concatenate([g.l2[perm], g.l1[perm]])
    eid = np.concatenate([perm, perm])
    order = np.argsort(a, kind="stable")
    a, b, eid = a[order], b[order], eid[order]
    ptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(a, minlength=n), out=ptr[1:])
    nbr = b.tolist()
    nbr_edge = eid.tolist()
    ptr = ptr.tolist()
    visited = [False] * n
    keep = []
    for root in rng.permutation(n).tolist():
        if visited[root]:
            continue
        visited[root] = True
        stack = [(root, ptr[root])]
        while stack:
            node, pos = stack[-1]
            if pos == ptr[node + 1]:
                stack.pop()
                continue
            stack[-1] = (node, pos + 1)
            nxt = nbr[pos]
            if not visited[nxt]:
                visited[nxt] = True
                keep.append(nbr_edge[pos])
                stack.append((nxt, ptr[nxt]))
    keep = np.sort(np.array(keep, dtype=np.int64))
    return PairGraph(n, g.l1[keep], g.l2[keep], g.w[keep], acyclic=True)


def incidence_gram_nnz(g: PairGraph) -> int:
    """Structural nonzeros of ``E E^T``: one per non-isolated node plus two per edge."""
    if g.n_edges == 0:
        return 0
    return int(np.count_nonzero(g.degrees()) + 2 * g.n_edges)
