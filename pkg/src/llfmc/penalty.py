"""Pairwise penalty functions p(z, gamma) and their group proximal maps.

Every penalty acts on the Euclidean norm of an edge difference. The group
proximal map

    argmin_u  1/2 ||u - v||^2 + lam * p(||u||, gamma)

keeps the direction of ``v`` and only changes its length, so all kinds reduce
to the scalar problem ``min_{s >= 0} 1/2 (s - r)^2 + lam * p(s, gamma)`` with
``r = ||v||``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KINDS = ("mcp", "scad", "mtype", "l1", "sql2", "none")


@dataclass(frozen=True)
class PenaltySpec:
    """Penalty kind and parameters.

    Parameters
    ----------
    kind : str
        One of ``mcp``, ``scad``, ``mtype``, ``l1``, ``sql2``, ``none``.
    gamma : float
        Strength, ``>= 0``.
    t : float, optional
        MCP concavity parameter (plateau starts at ``gamma * t``).
    b : float, optional
        M-type support half-width (penalty vanishes for ``z >= 2b``).
    a : float
        SCAD knot ratio, ``> 2``.
    """

    kind: str
    gamma: float = 0.0
    t: float | None = None
    b: float | None = None
    a: float = 3.7

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown penalty kind {self.kind!r}; expected one of {KINDS}")
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if self.kind == "mcp" and not (self.t is not None and self.t > 0):
            raise ValueError("mcp requires t > 0")
        if self.kind == "mtype" and not (self.b is not None and self.b > 0):
            raise ValueError("mtype requires b > 0")
        if self.kind == "scad" and not self.a > 2:
            raise ValueError("scad requires a > 2")

    @property
    def varsigma0(self) -> float:
        """Smallest ``s0`` such that ``s ||u - v||^2 + p(||u||)`` is strongly convex for all ``s > s0``."""
        if self.kind == "mcp":
            return 1.0 / (2.0 * self.t)
        if self.kind == "mtype":
            return self.gamma
        if self.kind == "scad":
            return 1.0 / (2.0 * (self.a - 1.0))
        return 0.0

    def max_prox_step(self) -> float:
        """Supremum of admissible ``lam`` in :func:`group_prox` (``lam * 2 s0 < 1``)."""
        s0 = self.varsigma0
        return np.inf if s0 == 0 else 1.0 / (2.0 * s0)

    def __call__(self, z):
        return evaluate(self, z)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "gamma": self.gamma}
        if self.t is not None:
            d["t"] = self.t
        if self.b is not None:
            d["b"] = self.b
        if self.kind == "scad":
            d["a"] = self.a
        return d

    @classmethod
    def from_dict(cls, d: dict) -> PenaltySpec:
        def num(key):
            v = d.get(key)
            if v is None or (isinstance(v, str) and v.strip().lower() in ("", "none")):
                return None
            return float(v)

        kw = {"kind": str(d["kind"]).strip().lower(), "gamma": num("gamma") or 0.0,
              "t": num("t"), "b": num("b")}
        if num("a") is not None:
            kw["a"] = num("a")
        return cls(**kw)


def evaluate(spec: PenaltySpec, z):
    """Value of ``p(z, gamma)`` for ``z >= 0`` (scalar or array)."""
    z_arr = np.asarray(z, dtype=np.float64)
    if np.any(z_arr < 0):
        raise ValueError("penalty argument must be nonnegative")
    g = spec.gamma
    k = spec.kind
    if k == "none" or g == 0.0:
        out = np.zeros_like(z_arr)
    elif k == "sql2":
        out = g * z_arr**2
    elif k == "l1":
        out = g * z_arr
    elif k == "mcp":
        t = spec.t
        out = np.where(z_arr <= g * t, g * z_arr - z_arr**2 / (2 * t), t * g**2 / 2)
    elif k == "mtype":
        b = spec.b
        out = np.where(z_arr < 2 * b, g * z_arr * (2 * b - z_arr), 0.0)
    else:  # scad
        a = spec.a
        mid = (2 * a * g * z_arr - z_arr**2 - g**2) / (2 * (a - 1))
        out = np.where(z_arr <= g, g * z_arr,
                       np.where(z_arr <= a * g, mid, g**2 * (a + 1) / 2))
    return out if out.ndim else float(out)


def _scalar_objective(spec, s, r, lam):
    return 0.5 * (s - r) ** 2 + lam * evaluate(spec, s)


def _pick(spec, cands, r, lam):
    """Objective-minimising candidate per row; ties go to the smaller length."""
    obj = _scalar_objective(spec, cands, r[:, None], lam[:, None])
    # stable sort by (objective, s): lexsort uses the last key as primary
    order = np.lexsort((cands, obj), axis=1)
    return np.take_along_axis(cands, order[:, :1], axis=1)[:, 0]


def scalar_prox(spec: PenaltySpec, r, lam):
    """Solve ``min_{s >= 0} 1/2 (s - r)^2 + lam * p(s, gamma)`` elementwise.

    ``r`` and ``lam`` broadcast against each other; both must be nonnegative and
    satisfy ``lam * 2 * varsigma0 < 1``.
    """
    r, lam = np.broadcast_arrays(np.asarray(r, dtype=np.float64),
                                 np.asarray(lam, dtype=np.float64))
    scalar = r.ndim == 0
    r = np.atleast_1d(r).astype(np.float64).ravel()
    lam = np.atleast_1d(lam).astype(np.float64).ravel()
    g = spec.gamma
    k = spec.kind
    if k == "none" or g == 0.0:
        s = r.copy()
    elif k == "sql2":
        s = r / (1.0 + 2.0 * lam * g)
    elif k == "l1":
        s = np.maximum(r - lam * g, 0.0)
    elif k == "mcp":
        t = spec.t
        # firm threshold; well defined because lam < t
        firm = (r - lam * g) / (1.0 - lam / t)
        s = np.where(r <= lam * g, 0.0, np.where(r <= g * t, firm, r))
    elif k == "scad":
        a = spec.a
        s1 = np.clip(r - lam * g, 0.0, g)
        denom = (a - 1.0) - lam
        s2 = np.clip((r * (a - 1.0) - lam * a * g) / denom, g, a * g)
        s3 = np.maximum(r, a * g)
        s = _pick(spec, np.stack([np.zeros_like(r), s1, s2, s3], axis=1), r, lam)
    else:  # mtype
        b = spec.b
        s1 = np.clip((r - 2.0 * lam * g * b) / (1.0 - 2.0 * lam * g), 0.0, 2.0 * b)
        s2 = np.maximum(r, 2.0 * b)
        cands = np.stack([np.zeros_like(r), s1, np.full_like(r, 2.0 * b), s2, r], axis=1)
        s = _pick(spec, cands, r, lam)
    return float(s[0]) if scalar else s


def check_prox_step(spec: PenaltySpec, lam) -> None:
    lam = np.asarray(lam, dtype=np.float64)
    if np.any(lam < 0):
        raise ValueError("prox step must be nonnegative")
    if np.any(2.0 * spec.varsigma0 * lam >= 1.0):
        raise ValueError(
            f"prox step {float(np.max(lam)):g} violates lam * 2 * varsigma0 < 1 "
            f"for {spec.kind} (varsigma0={spec.varsigma0:g})"
        )


def group_prox(spec: PenaltySpec, v, lam: float) -> np.ndarray:
    """Group proximal map of ``lam * p(||.||, gamma)`` at vector ``v``."""
    v = np.asarray(v, dtype=np.float64)
    check_prox_step(spec, lam)
    r = float(np.linalg.norm(v))
    if r == 0.0:
        return np.zeros_like(v)
    s = scalar_prox(spec, r, lam)
    return v * (s / r)


def group_prox_columns(spec: PenaltySpec, V: np.ndarray, lam) -> np.ndarray:
    """Apply :func:`group_prox` to every column of the ``d x L`` matrix ``V``.

    ``lam`` is a scalar or one step per column. The caller is responsible for
    validating the step sizes.
    """
    V = np.asarray(V, dtype=np.float64)
    if V.shape[1] == 0:
        return V.copy()
    r = np.linalg.norm(V, axis=0)
    s = scalar_prox(spec, r, np.broadcast_to(lam, r.shape))
    scale = np.divide(s, r, out=np.zeros_like(r), where=r > 0)
    return V * scale
