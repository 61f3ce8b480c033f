"""Modified ADMM for matrix factorisation with pairwise penalties.

The iterate is ``(X, Y, P, Q, Lam, V)``: factors, edge-difference splitting
variables (``P = X^T E_x``, ``Q = Y^T E_y``, stored ``d x n_edges``) and their
multipliers. One outer step updates ``P`` and ``Q`` by group proximal maps,
then ``X`` and ``Y`` (Gauss-Seidel) by a few conjugate-gradient steps on the
proximally regularised quadratic subproblem, then the multipliers.

Throughout, a length ``n*d`` vector ``vec(X^T)`` is handled as the ``n x d``
array ``X`` itself: block ``i`` of the vector is row ``x_i``.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp

from .core import (ConfigError, DivergenceError, FactorPair, ObservedMatrix,
                   RunConfig)
from .graph import PairGraph
from .penalty import PenaltySpec, evaluate, group_prox_columns

logger = logging.getLogger(__name__)

#: any state norm above this aborts the run
DIVERGENCE_LIMIT = 1e12


@dataclass
class SolverState:
    X: np.ndarray
    Y: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    Lam: np.ndarray
    V: np.ndarray
    k: int = 1

    def copy(self) -> SolverState:
        return SolverState(self.X.copy(), self.Y.copy(), self.P.copy(), self.Q.copy(),
                           self.Lam.copy(), self.V.copy(), self.k)

    def max_norm(self) -> float:
        return max(float(np.linalg.norm(a)) for a in
                   (self.X, self.Y, self.P, self.Q, self.Lam, self.V))

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in
                   (self.X, self.Y, self.P, self.Q, self.Lam, self.V))


@dataclass
class IterationRecord:
    k: int
    D_k: float
    augmented_lagrangian: float
    primal_residual_x: float
    primal_residual_y: float
    cg_iters_x: int
    cg_iters_y: int
    cg_residual_x: float
    cg_residual_y: float
    cg_threshold_x: float
    cg_threshold_y: float
    wall_time: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CGResult:
    x: np.ndarray
    iters: int
    residual: float
    threshold: float


@dataclass
class SolveResult:
    factors: FactorPair
    trace: list[IterationRecord]
    state: SolverState
    stop_reason: str = ""
    extras: dict = field(default_factory=dict)

    def __iter__(self):
        # unpacks as (factors, trace)
        yield self.factors
        yield self.trace


# ---------------------------------------------------------------------------
# edge operators

def edge_differences(F: np.ndarray, graph: PairGraph) -> np.ndarray:
    """``F^T E`` as a ``d x n_edges`` array (column ``l`` is ``f_{l1} - f_{l2}``)."""
    return (F[graph.l1] - F[graph.l2]).T


def incidence_apply(Z: np.ndarray, graph: PairGraph, n: int) -> np.ndarray:
    """``(Z E^T)^T`` for a ``d x n_edges`` array ``Z``, returned as ``n x d``."""
    out = np.zeros((n, Z.shape[0]))
    np.add.at(out, graph.l1, Z.T)
    np.subtract.at(out, graph.l2, Z.T)
    return out


def check_eta(eta: float, graph: PairGraph, penalty: PenaltySpec, side: str = "x") -> None:
    """Raise :class:`ConfigError` unless ``eta > 2 * varsigma0 * max_l w_l``."""
    s0 = penalty.varsigma0
    if graph.n_edges == 0 or s0 == 0 or penalty.gamma == 0:
        return
    l = int(np.argmax(graph.w))
    bound = 2.0 * s0 * graph.w[l]
    if not eta > bound:
        raise ConfigError(
            f"eta={eta:g} is inadmissible for graph_{side}: edge "
            f"({graph.l1[l]}, {graph.l2[l]}) has weight {graph.w[l]:g}, "
            f"so eta must exceed 2*varsigma0*w = {bound:g} ({penalty.kind})"
        )


def _prox_update(F, D, graph, penalty, eta):
    target = edge_differences(F, graph) - D / eta
    if penalty.kind == "none" or penalty.gamma == 0:
        return target
    return group_prox_columns(penalty, target, graph.w / eta)


def update_P(state: SolverState, graph_x: PairGraph, penalty_x: PenaltySpec, eta: float):
    """Columnwise proximal update of ``P`` at ``X^T E_x - Lam / eta``."""
    check_eta(eta, graph_x, penalty_x, "x")
    return _prox_update(state.X, state.Lam, graph_x, penalty_x, eta)


def update_Q(state: SolverState, graph_y: PairGraph, penalty_y: PenaltySpec, eta: float):
    check_eta(eta, graph_y, penalty_y, "y")
    return _prox_update(state.Y, state.V, graph_y, penalty_y, eta)


# ---------------------------------------------------------------------------
# quadratic subproblem

class _DataSide:
    """Observed entries arranged by the rows of the factor being updated."""

    def __init__(self, M: ObservedMatrix, side: str):
        if side == "x":
            self.n = M.n_rows
            rows, cols, vals = M.rows, M.cols, M.values
        else:
            self.n = M.n_cols
            o = M.col_order
            rows, cols, vals = M.cols[o], M.rows[o], M.values[o]
        self.rows, self.cols, self.vals = rows, cols, vals
        n_other = M.n_cols if side == "x" else M.n_rows
        ptr = np.zeros(self.n + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=self.n), out=ptr[1:])
        self.ptr = ptr
        self.data = sp.csr_matrix((vals, cols, ptr), shape=(self.n, n_other))
        self.mask = sp.csr_matrix((np.ones(vals.size), cols, ptr), shape=(self.n, n_other))

    def gram_blocks(self, F_other: np.ndarray) -> np.ndarray:
        d = F_other.shape[1]
        # outer products live on the other side's rows; the mask sums them per row
        outer = (F_other[:, :, None] * F_other[:, None, :]).reshape(F_other.shape[0], d * d)
        return np.asarray(self.mask @ outer).reshape(self.n, d, d)

    def rhs_data(self, F_other: np.ndarray) -> np.ndarray:
        return np.asarray(self.data @ F_other)


def gram_blocks(M: ObservedMatrix, F_other: np.ndarray, side: str = "x") -> np.ndarray:
    """Per-row Gram blocks ``G_i = sum_{j in Omega_i} f_j f_j^T`` (``n x d x d``)."""
    return _DataSide(M, side).gram_blocks(F_other)


def _rhs(F_prev, F_other, data_side, graph, P, D, eta):
    c = data_side.rhs_data(F_other) + F_prev
    if graph.n_edges:
        c += incidence_apply(eta * P + D, graph, F_prev.shape[0])
    return c


def assemble_rhs_x(state: SolverState, M: ObservedMatrix, graph_x: PairGraph, eta: float,
                   _side: _DataSide | None = None) -> np.ndarray:
    """Right-hand side ``b_y + vec(X^k^T + eta P E_x^T + Lam E_x^T)`` as an ``n x d`` array."""
    side = _side or _DataSide(M, "x")
    return _rhs(state.X, state.Y, side, graph_x, state.P, state.Lam, eta)


def assemble_rhs_y(state: SolverState, M: ObservedMatrix, graph_y: PairGraph, eta: float,
                   _side: _DataSide | None = None) -> np.ndarray:
    side = _side or _DataSide(M, "y")
    return _rhs(state.Y, state.X, side, graph_y, state.Q, state.V, eta)


def hessian_vec(s: np.ndarray, G: np.ndarray, graph: PairGraph | None, eta: float,
                alpha: float, laplacian=None) -> np.ndarray:
    """Apply ``G + (eta E E^T + (alpha + 1) I) (x) I_d`` to ``s`` (``n x d``).

    ``G`` holds the ``n`` diagonal ``d x d`` blocks. ``laplacian`` may be passed
    to reuse a precomputed sparse ``E E^T``.
    """
    shape = s.shape
    n = G.shape[0]
    S = s.reshape(n, -1)
    out = np.einsum("nij,nj->ni", G, S) + (alpha + 1.0) * S
    if laplacian is None and graph is not None and graph.n_edges:
        laplacian = graph.laplacian()
    if laplacian is not None and laplacian.nnz:
        out += eta * (laplacian @ S)
    return out.reshape(shape)


hessian_vec_x = hessian_vec
hessian_vec_y = hessian_vec


def conjugate_gradient(apply, c, x0, tol, max_iter=None, min_iter=0):
    """Plain CG on an SPD operator from a warm start.

    Stops once ``||A x - c|| <= tol`` (after at least ``min_iter`` steps) or
    after ``max_iter`` iterations (``None``: twice the problem dimension, ample
    for exact convergence). Returns ``(x, iters, residual)``.
    """
    x = np.array(x0, dtype=np.float64, copy=True)
    r = c - apply(x)
    rs = float(np.vdot(r, r))
    cap = max_iter if max_iter is not None else 2 * x.size + 10
    it = 0
    p = None
    while (math.sqrt(rs) > tol or it < min_iter) and it < cap and rs > 0:
        p = r.copy() if p is None else r + (rs / rs_prev) * p
        Ap = apply(p)
        pAp = float(np.vdot(p, Ap))
        if pAp <= 0:
            break
        a = rs / pAp
        x += a * p
        r -= a * Ap
        rs_prev, rs = rs, float(np.vdot(r, r))
        it += 1
        if not math.isfinite(rs):
            raise DivergenceError(f"non-finite CG residual at inner iteration {it}")
    return x, it, math.sqrt(rs)


def cg_threshold(config: RunConfig, n: int, k: int) -> float:
    """Inner stopping level ``scale * sqrt(d n) / (k + 1)^exponent`` at outer step ``k``."""
    return (config.cg_residual_scale * math.sqrt(config.rank * n)
            / (k + 1) ** config.cg_residual_exponent)


def _cg_side(F_prev, F_other, data_side, graph, P, D, config, k, laplacian=None,
             tol=None, max_iter="config"):
    G = data_side.gram_blocks(F_other)
    c = _rhs(F_prev, F_other, data_side, graph, P, D, config.eta)
    if laplacian is None and graph.n_edges:
        laplacian = graph.laplacian()
    apply = lambda s: hessian_vec(s, G, None, config.eta, config.alpha, laplacian)  # noqa: E731
    thr = cg_threshold(config, F_prev.shape[0], k) if tol is None else tol
    mi = config.cg_max_inner if max_iter == "config" else max_iter
    x, it, res = conjugate_gradient(apply, c, F_prev, thr, mi, config.cg_min_inner)
    return CGResult(x, it, res, thr)


def cg_solve_x(state: SolverState, M: ObservedMatrix, graph_x: PairGraph,
               config: RunConfig, k: int, *, tol=None, max_iter="config",
               _side=None, _laplacian=None) -> CGResult:
    """Inexact X update: CG from ``X^k`` on the linear system of the X subproblem.

    ``tol``/``max_iter`` override the configured residual schedule and inner
    iteration cap (``max_iter=None`` runs CG to convergence).
    """
    side = _side or _DataSide(M, "x")
    return _cg_side(state.X, state.Y, side, graph_x, state.P, state.Lam, config, k,
                    _laplacian, tol, max_iter)


def cg_solve_y(state: SolverState, M: ObservedMatrix, graph_y: PairGraph,
               config: RunConfig, k: int, *, tol=None, max_iter="config",
               _side=None, _laplacian=None) -> CGResult:
    """Inexact Y update; ``state.X`` must already hold ``X^{k+1}``."""
    side = _side or _DataSide(M, "y")
    return _cg_side(state.Y, state.X, side, graph_y, state.Q, state.V, config, k,
                    _laplacian, tol, max_iter)


def dual_update(state: SolverState, graph_x: PairGraph, graph_y: PairGraph, eta: float):
    """Multiplier ascent ``Lam += eta (P - X^T E_x)``, ``V += eta (Q - Y^T E_y)``."""
    Lam = state.Lam + eta * (state.P - edge_differences(state.X, graph_x))
    V = state.V + eta * (state.Q - edge_differences(state.Y, graph_y))
    return Lam, V


def augmented_lagrangian(state: SolverState, M: ObservedMatrix, graph_x: PairGraph,
                         graph_y: PairGraph, penalty_x: PenaltySpec,
                         penalty_y: PenaltySpec, eta: float, alpha: float) -> float:
    """Value of the augmented Lagrangian at ``state``."""
    X, Y = state.X, state.Y
    resid = M.values - np.einsum("ij,ij->i", X[M.rows], Y[M.cols])
    val = 0.5 * float(resid @ resid)
    val += 0.5 * alpha * (float(np.sum(X * X)) + float(np.sum(Y * Y)))
    rx = state.P - edge_differences(X, graph_x)
    ry = state.Q - edge_differences(Y, graph_y)
    val += float(np.sum(state.Lam * rx)) + float(np.sum(state.V * ry))
    val += 0.5 * eta * (float(np.sum(rx * rx)) + float(np.sum(ry * ry)))
    if graph_x.n_edges:
        val += float(graph_x.w @ evaluate(penalty_x, np.linalg.norm(state.P, axis=0)))
    if graph_y.n_edges:
        val += float(graph_y.w @ evaluate(penalty_y, np.linalg.norm(state.Q, axis=0)))
    return val


def objective(factors: FactorPair, M: ObservedMatrix, graph_x: PairGraph,
              graph_y: PairGraph, penalty_x: PenaltySpec, penalty_y: PenaltySpec,
              alpha: float) -> float:
    """Unconstrained objective: data fit, ridge and weighted pairwise penalties."""
    X, Y = factors.X, factors.Y
    resid = M.values - np.einsum("ij,ij->i", X[M.rows], Y[M.cols])
    val = 0.5 * float(resid @ resid) + 0.5 * alpha * (float(np.sum(X * X)) + float(np.sum(Y * Y)))
    for F, g, pen in ((X, graph_x, penalty_x), (Y, graph_y, penalty_y)):
        if g.n_edges:
            val += float(g.w @ evaluate(pen, np.linalg.norm(F[g.l1] - F[g.l2], axis=1)))
    return val


# ---------------------------------------------------------------------------
# driver

def initial_state(M: ObservedMatrix, graph_x: PairGraph, graph_y: PairGraph,
                  config: RunConfig) -> SolverState:
    """Seeded ``init_scale * N(0, 1)`` factors and multipliers; ``P``/``Q`` from the factors."""
    rng = np.random.default_rng(config.seed)
    d, s = config.rank, config.init_scale
    X = s * rng.standard_normal((M.n_rows, d))
    Y = s * rng.standard_normal((M.n_cols, d))
    Lam = s * rng.standard_normal((d, graph_x.n_edges))
    V = s * rng.standard_normal((d, graph_y.n_edges))
    return SolverState(X, Y, edge_differences(X, graph_x), edge_differences(Y, graph_y),
                       Lam, V, k=1)


def _check_inputs(M, graph_x, graph_y, config, require_acyclic):
    if graph_x.n_nodes != M.n_rows or graph_y.n_nodes != M.n_cols:
        raise ConfigError(
            f"graph sizes ({graph_x.n_nodes}, {graph_y.n_nodes}) do not match "
            f"matrix shape {M.shape}"
        )
    if require_acyclic:
        for name, g in (("graph_x", graph_x), ("graph_y", graph_y)):
            if g.n_edges and not g.acyclic:
                raise ConfigError(f"{name} is not marked acyclic; apply cut_cycles first")
    check_eta(config.eta, graph_x, config.penalty_x, "x")
    check_eta(config.eta, graph_y, config.penalty_y, "y")


def solve(M: ObservedMatrix, graph_x: PairGraph, graph_y: PairGraph, config: RunConfig,
          *, init: SolverState | None = None, require_acyclic: bool = True,
          callback=None) -> SolveResult:
    """Run the modified ADMM until the step-size statistic ``D_k`` settles.

    Stops when ``D_k < tol1``, when ``|D_{k-1} - D_k| < tol2`` or after
    ``max_iter`` outer steps. ``callback(record, state)`` is called after every
    iteration; returning ``True`` from it stops the run.

    Returns a :class:`SolveResult`, which also unpacks as ``(factors, trace)``.
    """
    _check_inputs(M, graph_x, graph_y, config, require_acyclic)
    eta, alpha = config.eta, config.alpha
    n, m, d = M.n_rows, M.n_cols, config.rank
    state = init.copy() if init is not None else initial_state(M, graph_x, graph_y, config)
    side_x, side_y = _DataSide(M, "x"), _DataSide(M, "y")
    lap_x = graph_x.laplacian() if graph_x.n_edges else None
    lap_y = graph_y.laplacian() if graph_y.n_edges else None
    trace: list[IterationRecord] = []
    stop = "max_iter"
    D_prev = None
    for k in range(state.k, state.k + config.max_iter):
        t0 = time.perf_counter()
        X_old, Y_old = state.X, state.Y
        state.P = _prox_update(state.X, state.Lam, graph_x, config.penalty_x, eta)
        state.Q = _prox_update(state.Y, state.V, graph_y, config.penalty_y, eta)
        rx = _cg_side(state.X, state.Y, side_x, graph_x, state.P, state.Lam, config, k, lap_x)
        state.X = rx.x
        ry = _cg_side(state.Y, state.X, side_y, graph_y, state.Q, state.V, config, k, lap_y)
        state.Y = ry.x
        state.Lam, state.V = dual_update(state, graph_x, graph_y, eta)
        state.k = k + 1
        D_k = (np.linalg.norm(X_old - state.X) / (2 * math.sqrt(d * n))
               + np.linalg.norm(Y_old - state.Y) / (2 * math.sqrt(d * m)))
        rec = IterationRecord(
            k=k, D_k=float(D_k),
            augmented_lagrangian=augmented_lagrangian(
                state, M, graph_x, graph_y, config.penalty_x, config.penalty_y, eta, alpha),
            primal_residual_x=float(np.linalg.norm(state.P - edge_differences(state.X, graph_x))),
            primal_residual_y=float(np.linalg.norm(state.Q - edge_differences(state.Y, graph_y))),
            cg_iters_x=rx.iters, cg_iters_y=ry.iters,
            cg_residual_x=rx.residual, cg_residual_y=ry.residual,
            cg_threshold_x=rx.threshold, cg_threshold_y=ry.threshold,
            wall_time=time.perf_counter() - t0,
        )
        trace.append(rec)
        if not state.is_finite() or state.max_norm() > DIVERGENCE_LIMIT:
            raise DivergenceError(
                f"iterate diverged at k={k} (max state norm {state.max_norm():.3g})",
                trace=trace, state=state,
            )
        if callback is not None and callback(rec, state):
            stop = "callback"
            break
        if D_k < config.tol1:
            stop = "tol1"
            break
        if D_prev is not None and abs(D_prev - D_k) < config.tol2:
            stop = "tol2"
            break
        D_prev = D_k
    logger.debug("stopped after %d iterations (%s)", len(trace), stop)
    return SolveResult(FactorPair(state.X, state.Y), trace, state, stop)


def descent_excess(trace: list[IterationRecord]) -> np.ndarray:
    """Per-step rise of the augmented Lagrangian beyond the inexact-CG slack.

    Entry ``k`` is ``L[k+1] - L[k] - (r_x[k+1]**2 + r_y[k+1]**2) / 2`` where
    ``r`` are the recorded CG residual norms. Non-positive entries mean the
    trace descends within tolerance. The proximal-difference corrections
    scale like ``1 / eta`` and are left out, which makes the check stricter.
    """
    L = np.array([r.augmented_lagrangian for r in trace])
    slack = np.array([0.5 * (r.cg_residual_x ** 2 + r.cg_residual_y ** 2) for r in trace])
    return np.diff(L) - slack[1:]
