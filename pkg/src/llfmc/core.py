"""Observed-matrix storage, dataset loaders and run configuration."""
from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .penalty import PenaltySpec


class LLFMCError(Exception):
    """Base class for package errors."""


class ParseError(LLFMCError, ValueError):
    pass


class DataError(LLFMCError, ValueError):
    pass


class ConfigError(LLFMCError, ValueError):
    pass


class DivergenceError(LLFMCError, RuntimeError):
    def __init__(self, message, trace=None, state=None):
        super().__init__(message)
        self.trace = trace if trace is not None else []
        self.state = state


@dataclass(frozen=True, eq=False)
class ObservedMatrix:
    """Sparse store of the known entries of an ``n_rows x n_cols`` matrix.

    Entries are kept sorted row-major, which makes ``rows``/``cols``/``values``
    line up with the CSR layout returned by :meth:`to_csr`.

    Parameters
    ----------
    n_rows, n_cols : int
    rows, cols : ndarray of int
        0-based coordinates, unique pairs.
    values : ndarray of float
    row_ids, col_ids : ndarray, optional
        Original identifiers of each dense index (e.g. MovieLens user ids).
    """

    n_rows: int
    n_cols: int
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray
    row_ids: np.ndarray | None = None
    col_ids: np.ndarray | None = None
    _row_ptr: np.ndarray = field(init=False, repr=False)
    _col_ptr: np.ndarray = field(init=False, repr=False)
    _col_order: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.int64).ravel()
        cols = np.asarray(self.cols, dtype=np.int64).ravel()
        vals = np.asarray(self.values, dtype=np.float64).ravel()
        if not (rows.shape == cols.shape == vals.shape):
            raise DataError("rows, cols and values must have equal length")
        if rows.size:
            if rows.min() < 0 or rows.max() >= self.n_rows:
                raise DataError("row index out of range")
            if cols.min() < 0 or cols.max() >= self.n_cols:
                raise DataError("column index out of range")
        order = np.lexsort((cols, rows))
        rows, cols, vals = rows[order], cols[order], vals[order]
        if rows.size > 1:
            dup = (rows[1:] == rows[:-1]) & (cols[1:] == cols[:-1])
            if dup.any():
                raise DataError("duplicate (row, column) entries")
        for a in (rows, cols, vals):
            a.setflags(write=False)
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "cols", cols)
        object.__setattr__(self, "values", vals)
        row_ptr = np.zeros(self.n_rows + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=self.n_rows), out=row_ptr[1:])
        col_order = np.lexsort((rows, cols))
        col_ptr = np.zeros(self.n_cols + 1, dtype=np.int64)
        np.cumsum(np.bincount(cols, minlength=self.n_cols), out=col_ptr[1:])
        object.__setattr__(self, "_row_ptr", row_ptr)
        object.__setattr__(self, "_col_ptr", col_ptr)
        object.__setattr__(self, "_col_order", col_order)

    @property
    def nnz(self) -> int:
        return int(self.rows.size)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_rows, self.n_cols)

    @property
    def entries(self) -> list[tuple[int, int, float]]:
        return list(zip(self.rows.tolist(), self.cols.tolist(), self.values.tolist()))

    def row_index(self, i: int) -> np.ndarray:
        """Sorted observed column indices of row ``i``."""
        return self.cols[self._row_ptr[i]:self._row_ptr[i + 1]]

    def col_index(self, t: int) -> np.ndarray:
        """Sorted observed row indices of column ``t``."""
        idx = self._col_order[self._col_ptr[t]:self._col_ptr[t + 1]]
        return self.rows[idx]

    def row_values(self, i: int) -> np.ndarray:
        return self.values[self._row_ptr[i]:self._row_ptr[i + 1]]

    def row_counts(self) -> np.ndarray:
        return np.diff(self._row_ptr)

    def col_counts(self) -> np.ndarray:
        return np.diff(self._col_ptr)

    @property
    def col_order(self) -> np.ndarray:
        """Permutation putting entries in column-major order."""
        return self._col_order

    def to_csr(self) -> sp.csr_matrix:
        return sp.csr_matrix(
            (self.values, self.cols, self._row_ptr), shape=self.shape
        )

    def to_dense(self, fill=np.nan) -> np.ndarray:
        out = np.full(self.shape, fill, dtype=np.float64)
        out[self.rows, self.cols] = self.values
        return out

    def mask(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=bool)
        out[self.rows, self.cols] = True
        return out

    def col_means(self) -> np.ndarray:
        """Mean of the observed entries of each column (nan if none)."""
        sums = np.bincount(self.cols, weights=self.values, minlength=self.n_cols)
        counts = self.col_counts()
        with np.errstate(invalid="ignore", divide="ignore"):
            return sums / counts

    def subset(self, idx) -> ObservedMatrix:
        """Matrix restricted to the entries at positions ``idx``, same shape."""
        idx = np.asarray(idx)
        return ObservedMatrix(
            self.n_rows, self.n_cols, self.rows[idx], self.cols[idx],
            self.values[idx], self.row_ids, self.col_ids,
        )

    @classmethod
    def from_dense(cls, dense, mask=None) -> ObservedMatrix:
        dense = np.asarray(dense, dtype=np.float64)
        if mask is None:
            mask = np.isfinite(dense)
        r, c = np.nonzero(mask)
        return cls(dense.shape[0], dense.shape[1], r, c, dense[r, c])


@dataclass
class FactorPair:
    """Latent factors ``X`` (n x d) and ``Y`` (m x d); predictions are ``x_i . y_j``."""

    X: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.Y = np.asarray(self.Y, dtype=np.float64)
        if self.X.ndim != 2 or self.Y.ndim != 2 or self.X.shape[1] != self.Y.shape[1]:
            raise DataError(
                f"factor shapes {self.X.shape} and {self.Y.shape} are inconsistent"
            )
        if not (np.isfinite(self.X).all() and np.isfinite(self.Y).all()):
            raise DataError("factors contain non-finite entries")

    @property
    def rank(self) -> int:
        return self.X.shape[1]

    def predict(self, rows, cols) -> np.ndarray:
        rows = np.asarray(rows)
        cols = np.asarray(cols)
        return np.einsum("ij,ij->i", self.X[rows], self.Y[cols])

    def predict_observed(self, M: ObservedMatrix) -> np.ndarray:
        return self.predict(M.rows, M.cols)

    def full(self) -> np.ndarray:
        return self.X @ self.Y.T


# ---------------------------------------------------------------------------
# loaders

def _dedupe_last(rows, cols, vals, source):
    """Keep the last occurrence of each (row, col) pair, warning on duplicates."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    vals = np.asarray(vals, dtype=np.float64)
    if rows.size == 0:
        return rows, cols, vals
    key = np.stack([rows, cols], axis=1)
    # last occurrence wins: unique on the reversed array
    _, first_rev = np.unique(key[::-1], axis=0, return_index=True)
    keep = np.sort(rows.size - 1 - first_rev)
    n_dup = rows.size - keep.size
    if n_dup:
        warnings.warn(
            f"{source}: {n_dup} duplicate entries, keeping the last value",
            stacklevel=3,
        )
    return rows[keep], cols[keep], vals[keep]


def _read_movielens_lines(path, fmt):
    sep = {"tab_100k": "\t", "dat_1m": "::"}.get(fmt)
    if sep is None:
        raise ValueError(f"unknown MovieLens format {fmt!r}")
    users, items, ratings = [], [], []
    with open(path, encoding="latin-1") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split(sep)
            if len(parts) < 3:
                raise ParseError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
            try:
                users.append(int(parts[0]))
                items.append(int(parts[1]))
                ratings.append(float(parts[2]))
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
    return (np.array(users, dtype=np.int64), np.array(items, dtype=np.int64),
            np.array(ratings, dtype=np.float64))


def _remap(ids, table=None):
    if table is None:
        table = np.unique(ids)
    idx = np.searchsorted(table, ids)
    return idx, table


def load_movielens(path, format="tab_100k") -> ObservedMatrix:
    """Load a MovieLens ratings file.

    ``tab_100k`` reads ``user<TAB>item<TAB>rating<TAB>timestamp`` lines (``u.data``,
    ``u1.base``...), ``dat_1m`` reads ``user::item::rating::timestamp``. User
    and item ids are remapped to dense 0-based indices in sorted id order; the
    original ids are kept in ``row_ids``/``col_ids``.
    """
    users, items, ratings = _read_movielens_lines(path, format)
    if users.size == 0:
        raise DataError(f"{path}: no entries")
    r, row_ids = _remap(users)
    c, col_ids = _remap(items)
    r, c, v = _dedupe_last(r, c, ratings, str(path))
    return ObservedMatrix(row_ids.size, col_ids.size, r, c, v, row_ids, col_ids)


def load_movielens_split(base_path, test_path, format="tab_100k"):
    """Load a provided (train, test) pair such as ``u1.base``/``u1.test``.

    Both matrices share one id mapping built from the union of the two files,
    so the test set may contain items never seen in training.
    """
    parsed = [_read_movielens_lines(p, format) for p in (base_path, test_path)]
    for p, (u, _, _) in zip((base_path, test_path), parsed):
        if u.size == 0:
            raise DataError(f"{p}: no entries")
    row_ids = np.unique(np.concatenate([parsed[0][0], parsed[1][0]]))
    col_ids = np.unique(np.concatenate([parsed[0][1], parsed[1][1]]))
    out = []
    for p, (u, i, v) in zip((base_path, test_path), parsed):
        r, _ = _remap(u, row_ids)
        c, _ = _remap(i, col_ids)
        r, c, v = _dedupe_last(r, c, v, str(p))
        out.append(ObservedMatrix(row_ids.size, col_ids.size, r, c, v, row_ids, col_ids))
    return out[0], out[1]


def load_csv_coo(path, shape=None) -> ObservedMatrix:
    """Load ``i,j,value`` lines with 0-based indices.

    A non-numeric first line is treated as a header. Lines starting with ``#``
    are comments, except ``# shape=n,m`` which fixes the matrix shape (written
    by :func:`save_csv_coo`). Otherwise the shape is inferred from the largest
    indices.
    """
    rows, cols, vals = [], [], []
    file_shape = None
    seen_data = False
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if not s:
                continue
            if s.startswith("#"):
                body = s.lstrip("#").strip()
                if body.startswith("shape="):
                    n, m = body[len("shape="):].split(",")
                    file_shape = (int(n), int(m))
                continue
            parts = s.split(",")
            if len(parts) != 3:
                raise ParseError(f"{path}:{lineno}: expected 3 fields, got {len(parts)}")
            try:
                i, j = int(parts[0]), int(parts[1])
            except ValueError:
                if not seen_data:
                    seen_data = True
                    continue  # header
                raise ParseError(f"{path}:{lineno}: non-integer index") from None
            seen_data = True
            try:
                v = float(parts[2])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-numeric value {parts[2]!r}") from None
            rows.append(i)
            cols.append(j)
            vals.append(v)
    if not rows:
        raise DataError(f"{path}: no entries")
    r, c, v = _dedupe_last(rows, cols, vals, str(path))
    if shape is None:
        shape = file_shape
    if shape is None:
        shape = (int(r.max()) + 1, int(c.max()) + 1)
    return ObservedMatrix(shape[0], shape[1], r, c, v)


def save_csv_coo(M: ObservedMatrix, path) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(f"# shape={M.n_rows},{M.n_cols}\n")
        for i, j, v in zip(M.rows.tolist(), M.cols.tolist(), M.values.tolist()):
            fh.write(f"{i},{j},{v!r}\n")


def split_train_test(M: ObservedMatrix, test_fraction: float, seed=0):
    """Random disjoint train/test partition of the observed entries."""
    if M.nnz == 0:
        raise DataError("cannot split an empty matrix")
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    n_test = int(round(test_fraction * M.nnz))
    if n_test == 0 or n_test == M.nnz:
        raise ValueError(
            f"test_fraction={test_fraction} leaves an empty side for {M.nnz} entries"
        )
    perm = np.random.default_rng(seed).permutation(M.nnz)
    return M.subset(np.sort(perm[n_test:])), M.subset(np.sort(perm[:n_test]))


# ---------------------------------------------------------------------------
# configuration

@dataclass
class RunConfig:
    """Hyperparameters of one solve.

    The pairwise strengths live on the penalties (``penalty_x.gamma``);
    ``gamma_x``/``gamma_y`` are convenience views of them.
    """

    rank: int = 4
    alpha: float = 1.0
    eta: float = 1e4
    penalty_x: PenaltySpec = field(default_factory=lambda: PenaltySpec("mcp", 1.0, t=2.0))
    penalty_y: PenaltySpec = field(default_factory=lambda: PenaltySpec("mcp", 1.0, t=2.0))
    max_iter: int = 500
    tol1: float = 1e-1
    tol2: float = 1e-4
    cg_residual_scale: float = 1e3
    cg_residual_exponent: float = 1.2
    cg_max_inner: int | None = 5
    cg_min_inner: int = 1
    init_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError("rank must be positive")
        if self.alpha < 0:
            raise ConfigError("alpha must be nonnegative")
        if not self.eta > 0:
            raise ConfigError("eta must be positive")
        if self.tol1 <= 0 or self.tol2 <= 0:
            raise ConfigError("tolerances must be positive")
        if self.cg_max_inner is not None and self.cg_max_inner < 0:
            raise ConfigError("cg_max_inner must be nonnegative")

    @property
    def gamma_x(self) -> float:
        return self.penalty_x.gamma

    @property
    def gamma_y(self) -> float:
        return self.penalty_y.gamma

    def replace(self, **changes) -> RunConfig:
        """Copy with changes; ``gamma_x``/``gamma_y``/``t`` update the penalties."""
        px, py = self.penalty_x, self.penalty_y
        if "gamma_x" in changes:
            px = dataclasses.replace(px, gamma=float(changes.pop("gamma_x")))
        if "gamma_y" in changes:
            py = dataclasses.replace(py, gamma=float(changes.pop("gamma_y")))
        if "t" in changes:
            t = float(changes.pop("t"))
            px = dataclasses.replace(px, t=t)
            py = dataclasses.replace(py, t=t)
        changes.setdefault("penalty_x", px)
        changes.setdefault("penalty_y", py)
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, PenaltySpec):
                for k, pv in v.to_dict().items():
                    out[f"{f.name}.{k}"] = pv
            else:
                out[f.name] = v
        return out

    @classmethod
    def from_mapping(cls, mapping: dict) -> RunConfig:
        """Build from flat string keys, e.g. ``{"penalty_x.kind": "mcp", "eta": "1e4"}``."""
        base = cls()
        plain = {}
        pen = {"penalty_x": base.penalty_x.to_dict(), "penalty_y": base.penalty_y.to_dict()}
        overrides = {"penalty_x": set(), "penalty_y": set()}
        for key, raw in mapping.items():
            key = key.strip().replace("-", "_")
            if key in ("gamma_x", "gamma_y"):
                pen["penalty_" + key[-1]]["gamma"] = raw
                continue
            if "." in key:
                prefix, sub = key.split(".", 1)
                if prefix not in pen:
                    raise ConfigError(f"unknown config key {key!r}")
                pen[prefix][sub] = raw
                overrides[prefix].add(sub)
                continue
            plain[key] = raw
        kwargs = {}
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for key, raw in plain.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(key, raw, types[key])
        for prefix, d in pen.items():
            if d.get("kind") != getattr(base, prefix).kind:
                # a different kind must not inherit the default's parameters
                d = {k: v for k, v in d.items() if k in ("kind", "gamma")
                     or k in overrides[prefix]}
            try:
                kwargs[prefix] = PenaltySpec.from_dict(d)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{prefix}: {exc}") from None
        return cls(**kwargs)


def _coerce(key, raw, typ):
    if not isinstance(raw, str):
        return raw
    s = raw.strip()
    try:
        if "int" in str(typ):
            if s.lower() in ("none", "inf", ""):
                if "None" in str(typ):
                    return None
            return int(float(s))
        return float(s)
    except ValueError:
        raise ConfigError(f"cannot parse {key}={raw!r}") from None


def load_config(path) -> RunConfig:
    """Read a flat ``key=value`` config file (``#`` comments allowed)."""
    return RunConfig.from_mapping(read_key_values(path))


def read_key_values(path) -> dict:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        if "=" not in s:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        k, v = s.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def write_config(cfg: RunConfig, path) -> None:
    lines = [f"{k}={'' if v is None else v}" for k, v in cfg.to_dict().items()]
    Path(path).write_text("\n".join(lines) + "\n")
