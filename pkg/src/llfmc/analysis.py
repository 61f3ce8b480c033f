"""Synthetic subgroup instances, subgroup identification and error metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.spatial.distance import pdist, squareform

from .core import DataError, ObservedMatrix


@dataclass(frozen=True)
class SubgroupSpec:
    """Parameters of a synthetic instance whose latent rows form subgroups.

    ``k_x`` groups of rows and ``k_y`` groups of columns; ``rho`` is the
    fraction of entries observed and ``sigma`` the Gaussian noise level.
    """

    n: int = 200
    m: int | None = None
    d: int = 5
    k_x: int = 20
    k_y: int | None = None
    sigma: float = 100.0
    rho: float = 0.3
    target_fro: float = 1e6
    seed: int = 0

    def __post_init__(self):
        if self.m is None:
            object.__setattr__(self, "m", self.n)
        if self.k_y is None:
            object.__setattr__(self, "k_y", self.k_x)
        if not (1 <= self.k_x <= self.n and 1 <= self.k_y <= self.m):
            raise ValueError("group counts must satisfy 1 <= k <= size")
        if not 0 < self.rho <= 1:
            raise ValueError("rho must lie in (0, 1]")
        if self.sigma < 0 or self.target_fro <= 0 or self.d < 1:
            raise ValueError("invalid sigma, target_fro or d")


@dataclass(frozen=True)
class GroupMembership:
    """Partition of ``n`` nodes given as one group label per node."""

    assignment: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.assignment, dtype=np.int64).ravel()
        # relabel by first appearance so equal partitions compare equal
        _, first, inv = np.unique(a, return_index=True, return_inverse=True)
        rank = np.empty_like(first)
        rank[np.argsort(first)] = np.arange(first.size)
        object.__setattr__(self, "assignment", rank[inv])

    @property
    def n(self) -> int:
        return int(self.assignment.size)

    @property
    def n_groups(self) -> int:
        return int(self.assignment.max()) + 1 if self.n else 0

    def pair_matrix(self) -> np.ndarray:
        """Boolean ``S`` with ``S[u, v]`` true iff ``u`` and ``v`` share a group."""
        a = self.assignment
        return a[:, None] == a[None, :]

    def groups(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.assignment == g) for g in range(self.n_groups)]


@dataclass
class SubgroupInstance:
    M_star: np.ndarray
    M_obs: ObservedMatrix
    truth_x: GroupMembership
    truth_y: GroupMembership
    X_star: np.ndarray
    Y_star: np.ndarray

    @property
    def has_subgroups(self) -> bool:
        return self.truth_x.n_groups < self.truth_x.n or self.truth_y.n_groups < self.truth_y.n


def even_groups(n: int, k: int) -> np.ndarray:
    """Contiguous labels for ``n`` nodes in ``k`` groups; leading groups take the remainder."""
    sizes = np.full(k, n // k)
    sizes[: n % k] += 1
    return np.repeat(np.arange(k), sizes)


def _representatives(rng, k, d):
    U = np.empty((k, d))
    U[0] = rng.uniform(0.0, 1.0, d)
    if k > 1:
        U[1:] = U[0] + np.cumsum(rng.uniform(0.0, 10.0, (k - 1, d)), axis=0)
    return U


def generate_subgroup_instance(spec: SubgroupSpec) -> SubgroupInstance:
    """Draw a noisy, partially observed low-rank matrix with subgroup structure.

    Group representatives start uniform on ``[0, 1]^d`` and advance by i.i.d.
    uniform ``[0, 10]^d`` increments. Rows are split evenly into groups and
    ``M* = X* Y*^T`` is rescaled to Frobenius norm ``target_fro`` (the scale is
    split evenly between the factors). Exactly ``round(rho n m)`` entries are
    observed, chosen without replacement, each with ``N(0, sigma^2)`` noise.
    """
    n, m, d = spec.n, spec.m, spec.d
    n_obs = int(round(spec.rho * n * m))
    if n_obs < 1:
        raise ValueError(f"rho={spec.rho} observes no entries of a {n}x{m} matrix")
    rng = np.random.default_rng(spec.seed)
    U = _representatives(rng, spec.k_x, d)
    V = _representatives(rng, spec.k_y, d)
    gx = even_groups(n, spec.k_x)
    gy = even_groups(m, spec.k_y)
    X, Y = U[gx], V[gy]
    scale = np.sqrt(spec.target_fro / np.linalg.norm(X @ Y.T))
    X, Y = X * scale, Y * scale
    M_star = X @ Y.T
    flat = np.sort(rng.choice(n * m, size=n_obs, replace=False))
    rows, cols = np.divmod(flat, m)
    vals = M_star[rows, cols] + spec.sigma * rng.standard_normal(n_obs)
    return SubgroupInstance(M_star, ObservedMatrix(n, m, rows, cols, vals),
                            GroupMembership(gx), GroupMembership(gy), X, Y)


def similarity_matrix(F, tau: float = 0.01) -> np.ndarray:
    """Raw indicator ``||f_u - f_v|| < tau * min(||f_u||, ||f_v||)`` (diagonal set)."""
    F = np.asarray(F, dtype=np.float64)
    D = squareform(pdist(F)) if F.shape[0] > 1 else np.zeros((F.shape[0],) * 2)
    norms = np.linalg.norm(F, axis=1)
    S = D < tau * np.minimum(norms[:, None], norms[None, :])
    np.fill_diagonal(S, True)
    return S


def identify_subgroups(F, tau: float = 0.01) -> GroupMembership:
    """Groups = connected components of the thresholded similarity indicator.

    With ``tau = 0`` rows are grouped only when exactly equal.
    """
    F = np.asarray(F, dtype=np.float64)
    if tau == 0:
        _, inv = np.unique(F, axis=0, return_inverse=True)
        return GroupMembership(inv.ravel())
    S = similarity_matrix(F, tau)
    _, labels = connected_components(sp.csr_matrix(S), directed=False)
    return GroupMembership(labels)


def pairwise_agreement(pred: GroupMembership, truth: GroupMembership) -> float:
    """Fraction of unordered node pairs on which both partitions agree (Rand index)."""
    if pred.n != truth.n:
        raise ValueError(f"partitions cover {pred.n} and {truth.n} nodes")
    n = pred.n
    if n < 2:
        return 1.0
    iu = np.triu_indices(n, 1)
    return float(np.mean(pred.pair_matrix()[iu] == truth.pair_matrix()[iu]))


def rmse(predictions, truth) -> float:
    p = np.asarray(predictions, dtype=np.float64).ravel()
    t = np.asarray(truth, dtype=np.float64).ravel()
    if p.size != t.size:
        raise ValueError("predictions and truth differ in length")
    if p.size == 0:
        raise ValueError("rmse of an empty set")
    return float(np.sqrt(np.mean((p - t) ** 2)))


def relative_error(M_hat, M_star) -> float:
    """``||M_hat - M*||_F / ||M*||_F``; ``M_hat`` may be a FactorPair."""
    if hasattr(M_hat, "full"):
        M_hat = M_hat.full()
    M_hat = np.asarray(M_hat, dtype=np.float64)
    M_star = np.asarray(M_star, dtype=np.float64)
    if M_hat.shape != M_star.shape:
        raise ValueError(f"shape mismatch {M_hat.shape} vs {M_star.shape}")
    ref = np.linalg.norm(M_star)
    if ref == 0:
        raise DataError("relative error undefined for a zero reference")
    return float(np.linalg.norm(M_hat - M_star) / ref)
