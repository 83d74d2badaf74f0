"""Panel data model: outcomes, covariates, spatial weights, parameters.

Periods are indexed 1..T in every public signature to match the model
notation; unit indices are 0-based positions into the sorted unit labels.
All containers are immutable after construction and safe to share across
worker processes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
import pandas as pd
from scipy import sparse

from .errors import BadLagSpec, IsolatedUnit, NonBinaryAdjacency

logger = logging.getLogger(__name__)

# below this unit count dense storage beats CSR on every kernel we run
SPARSE_THRESHOLD = 200


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class SpatialWeightMatrix:
    """Square spatial weight matrix with an exactly zero diagonal.

    Parameters
    ----------
    entries : ndarray or scipy.sparse matrix
        n x n weights. Stored as given (CSR for sparse input).
    """

    entries: object
    row_sums: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        m = self.entries
        if sparse.issparse(m):
            m = m.tocsr().astype(float)
            if not np.all(np.isfinite(m.data)):
                raise ValueError("weight matrix has non-finite entries")
            for buf in (m.data, m.indices, m.indptr):
                buf.flags.writeable = False
        else:
            m = _freeze(np.asarray(m, dtype=float))
            if not np.all(np.isfinite(m)):
                raise ValueError("weight matrix has non-finite entries")
        if m.shape[0] != m.shape[1]:
            raise ValueError(f"weight matrix must be square, got {m.shape}")
        diag = m.diagonal()
        if np.any(diag != 0.0):
            raise ValueError("weight matrix diagonal must be exactly zero")
        rs = np.asarray(m.sum(axis=1)).ravel()
        object.__setattr__(self, "entries", m)
        object.__setattr__(self, "row_sums", _freeze(rs))

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    @property
    def is_sparse(self) -> bool:
        return sparse.issparse(self.entries)

    def toarray(self) -> np.ndarray:
        if self.is_sparse:
            return self.entries.toarray()
        return np.array(self.entries)

    def dot(self, v: np.ndarray) -> np.ndarray:
        return self.entries @ v

    def tdot(self, v: np.ndarray) -> np.ndarray:
        """Transpose product M'v."""
        return self.entries.T @ v


def as_weight(m) -> SpatialWeightMatrix:
    """Wrap a raw matrix, passing SpatialWeightMatrix through unchanged."""
    if isinstance(m, SpatialWeightMatrix):
        return m
    return SpatialWeightMatrix(m)


def _weights_grid(obj, T: int, what: str):
    """Coerce weights input to a tuple-of-tuples indexed [p][t-1]."""
    if obj is None:
        return ()
    if isinstance(obj, SpatialWeightMatrix) or sparse.issparse(obj) or isinstance(obj, np.ndarray):
        obj = [obj]
    rows = []
    for p, per_t in enumerate(obj):
        if isinstance(per_t, SpatialWeightMatrix) or sparse.issparse(per_t) or isinstance(per_t, np.ndarray):
            per_t = [per_t] * T
        per_t = tuple(as_weight(m) for m in per_t)
        if len(per_t) != T:
            raise ValueError(f"{what}[{p}] must supply one matrix per period ({T}), got {len(per_t)}")
        rows.append(per_t)
    return tuple(rows)


@dataclass(frozen=True)
class PanelData:
    """Balanced panel with spatial weights.

    Parameters
    ----------
    y : ndarray, shape (n, T)
        Outcomes.
    x : ndarray, shape (n, k_x, T), optional
        Weakly exogenous covariates.
    z : ndarray, shape (n, k_z, T) or (n, T), optional
        Strictly exogenous covariates; a 2-d array is treated as a single
        column. Time-invariant columns are repeated across periods and
        flagged (see ``z_time_invariant``).
    M : weights, optional
        Spatial weights for the outcome equation. Accepts a single matrix
        (constant across periods, P=1), a sequence of per-period matrices,
        or a sequence of such sequences indexed [p][t-1].
    M_err : weights, optional
        Spatial weights entering the error filter, same conventions.
    """

    y: np.ndarray
    x: np.ndarray | None = None
    z: np.ndarray | None = None
    M: object = None
    M_err: object = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        if y.ndim != 2:
            raise ValueError("y must be n x T")
        n, T = y.shape
        if n < 2 or T < 2:
            raise ValueError(f"need n >= 2 and T >= 2, got n={n}, T={T}")

        def cov(a, name):
            if a is None:
                a = np.zeros((n, 0, T))
            a = np.asarray(a, dtype=float)
            if a.ndim == 2:
                a = a[:, None, :]
            if a.shape[0] != n or a.ndim != 3 or a.shape[2] != T:
                raise ValueError(f"{name} must have shape (n, k, T) = ({n}, k, {T}), got {a.shape}")
            return a

        x = cov(self.x, "x")
        z = cov(self.z, "z")
        for name, a in (("y", y), ("x", x), ("z", z)):
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{name} contains non-finite entries")

        M = _weights_grid(self.M, T, "M")
        M_err = _weights_grid(self.M_err, T, "M_err")
        for grid in (M, M_err):
            for per_t in grid:
                for m in per_t:
                    if m.n != n:
                        raise ValueError(f"weight matrix is {m.n} x {m.n}, panel has n={n}")

        object.__setattr__(self, "y", _freeze(y))
        object.__setattr__(self, "x", _freeze(x))
        object.__setattr__(self, "z", _freeze(z))
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "M_err", M_err)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def T(self) -> int:
        return self.y.shape[1]

    @property
    def P(self) -> int:
        return len(self.M)

    @property
    def Q(self) -> int:
        return len(self.M_err)

    @property
    def k_x(self) -> int:
        return self.x.shape[1]

    @property
    def k_z(self) -> int:
        return self.z.shape[1]

    @property
    def z_time_invariant(self) -> tuple[bool, ...]:
        """Per z-column flag: True when the column repeats across periods."""
        return tuple(bool(np.all(self.z[:, j, :] == self.z[:, j, :1])) for j in range(self.k_z))


@dataclass(frozen=True)
class ParamVector:
    """Model parameter vector (lambda, beta, rho, f, variance profiles).

    Normalizations f_T = 1 and sigma_T^2 = 1 are enforced; they pin the
    scale of the factor loadings against the common shock variances.
    gamma_rho may be a scalar (homogeneous unit scaling) or an n-vector.
    """

    lam: np.ndarray
    beta: np.ndarray
    rho: np.ndarray
    f: np.ndarray
    gamma_sigma: np.ndarray
    gamma_rho: object = 1.0

    def __post_init__(self):
        lam = np.atleast_1d(np.asarray(self.lam, dtype=float))
        beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        rho = np.atleast_1d(np.asarray(self.rho, dtype=float)) if np.size(self.rho) else np.zeros(0)
        f = np.atleast_1d(np.asarray(self.f, dtype=float))
        gs = np.atleast_1d(np.asarray(self.gamma_sigma, dtype=float))
        gr = self.gamma_rho
        gr = float(gr) if np.ndim(gr) == 0 else _freeze(np.asarray(gr, dtype=float))
        if f.shape != gs.shape or f.ndim != 1:
            raise ValueError("f and gamma_sigma must be T-vectors of equal length")
        if f[-1] != 1.0:
            raise ValueError("normalization f_T = 1 violated")
        if gs[-1] != 1.0:
            raise ValueError("normalization sigma_T^2 = 1 violated")
        if np.any(gs <= 0):
            raise ValueError("all sigma_t^2 must be positive")
        if np.any(np.asarray(gr) <= 0):
            raise ValueError("all rho_i^2 must be positive")
        for name, a in (("lam", lam), ("beta", beta), ("rho", rho), ("f", f)):
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{name} contains non-finite entries")
        object.__setattr__(self, "lam", _freeze(lam))
        object.__setattr__(self, "beta", _freeze(beta))
        object.__setattr__(self, "rho", _freeze(rho))
        object.__setattr__(self, "f", _freeze(f))
        object.__setattr__(self, "gamma_sigma", _freeze(gs))
        object.__setattr__(self, "gamma_rho", gr)

    @property
    def T(self) -> int:
        return self.f.shape[0]

    @property
    def delta(self) -> np.ndarray:
        return np.concatenate([self.lam, self.beta])

    def rho_scale(self, n: int) -> np.ndarray:
        """Unit scaling vector rho_i (square roots of gamma_rho)."""
        gr = self.gamma_rho
        if np.ndim(gr) == 0:
            return np.full(n, np.sqrt(gr))
        if len(gr) != n:
            raise ValueError(f"gamma_rho has length {len(gr)}, panel has n={n}")
        return np.sqrt(np.asarray(gr))


class LagTerm(NamedTuple):
    """One column of Z_t: M^order applied to a source column.

    source is "z" or "x", col a 0-based column index, order the spatial
    power (0 = the raw column), weight the 0-based index of the M family
    used for the powers.
    """

    source: str
    col: int
    order: int = 0
    weight: int = 0


def row_normalize(D, isolated_policy: str = "zero_row") -> SpatialWeightMatrix:
    """Row-normalize a 0/1 adjacency matrix into spatial weights.

    Parameters
    ----------
    D : ndarray or scipy.sparse matrix
        Adjacency with zero diagonal, entries in {0, 1}.
    isolated_policy : {"zero_row", "error"}
        What to do with units that have no neighbors: keep an all-zero
        row (logged) or raise IsolatedUnit.

    Returns
    -------
    SpatialWeightMatrix
        m_ij = d_ij / sum_l d_il, sparse above the dense threshold.
    """
    if isolated_policy not in ("zero_row", "error"):
        raise ValueError(f"unknown isolated_policy {isolated_policy!r}")
    is_sp = sparse.issparse(D)
    data = D.tocsr().data if is_sp else np.asarray(D)
    vals = np.unique(np.asarray(data))
    if not np.all(np.isin(vals, (0.0, 1.0))):
        raise NonBinaryAdjacency(f"adjacency entries must be 0 or 1, found {vals[~np.isin(vals, (0.0, 1.0))][:5]}")
    n = D.shape[0]
    diag = D.diagonal() if is_sp else np.diagonal(np.asarray(D))
    if np.any(diag != 0):
        raise NonBinaryAdjacency("adjacency diagonal must be zero")

    deg = np.asarray(D.sum(axis=1), dtype=float).ravel()
    isolated = np.flatnonzero(deg == 0)
    if isolated.size:
        if isolated_policy == "error":
            raise IsolatedUnit(f"{isolated.size} unit(s) have no neighbors: {isolated[:10].tolist()}")
        logger.warning("row_normalize: %d isolated unit(s) kept as zero rows", isolated.size)
    scale = np.where(deg > 0, deg, 1.0)

    if n >= SPARSE_THRESHOLD or is_sp:
        Dc = D.tocsr().astype(float) if is_sp else sparse.csr_matrix(np.asarray(D, dtype=float))
        M = sparse.diags(1.0 / scale) @ Dc
        M = M.tocsr()
    else:
        M = np.asarray(D, dtype=float) / scale[:, None]
    return SpatialWeightMatrix(M)


def _apply_power(M: SpatialWeightMatrix, v: np.ndarray, order: int) -> np.ndarray:
    for _ in range(order):
        v = M.dot(v)
    return v


def build_design(panel: PanelData, t: int, lag_spec: Sequence) -> tuple[np.ndarray, np.ndarray]:
    """Assemble the period-t regressor blocks (W_t, Z_t).

    W_t stacks the spatial lags of the outcome first, then Z_t:
    W_t = [M_{1,t} y_t, ..., M_{P,t} y_t, Z_t]. Z_t holds one column per
    lag_spec term, in order.

    Parameters
    ----------
    panel : PanelData
    t : int
        Period, 1-based.
    lag_spec : sequence of LagTerm or tuples
        Columns of Z_t as (source, col, order[, weight]) terms.

    Returns
    -------
    (W_t, Z_t) : pair of ndarrays, shapes (n, P+k) and (n, k).
    """
    if not 1 <= t <= panel.T:
        raise BadLagSpec(f"period {t} outside 1..{panel.T}")
    ti = t - 1
    cols = []
    for raw in lag_spec:
        term = raw if isinstance(raw, LagTerm) else LagTerm(*raw)
        src = panel.z if term.source == "z" else panel.x if term.source == "x" else None
        if src is None:
            raise BadLagSpec(f"unknown source {term.source!r} (expected 'z' or 'x')")
        if not 0 <= term.col < src.shape[1]:
            raise BadLagSpec(f"column {term.col} out of range for source {term.source!r}")
        if term.order < 0:
            raise BadLagSpec(f"negative spatial order {term.order}")
        v = src[:, term.col, ti]
        if term.order > 0:
            if not 0 <= term.weight < panel.P:
                raise BadLagSpec(f"weight family {term.weight} out of range (P={panel.P})")
            v = _apply_power(panel.M[term.weight][ti], v, term.order)
        cols.append(v)
    Z_t = np.column_stack(cols) if cols else np.zeros((panel.n, 0))
    y_t = panel.y[:, ti]
    lags = [panel.M[p][ti].dot(y_t) for p in range(panel.P)]
    W_t = np.column_stack(lags + [Z_t]) if lags else Z_t
    return W_t, Z_t


# ---------------------------------------------------------------------------
# CSV ingestion / serialization


def read_panel_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray, list, list]:
    """Read a long-format panel CSV.

    Expected columns: unit, period, y, then any of x_1..x_kx, z_1..z_kz.
    Every (unit, period) pair must appear exactly once (balanced panel).

    Returns
    -------
    (y, x, z, units, periods)
        Arrays shaped (n, T), (n, k_x, T), (n, k_z, T); unit and period
        labels in sorted order defining the array axes.
    """
    df = pd.read_csv(path, float_precision="round_trip")
    required = {"unit", "period", "y"}
    missing = required - set(df.columns)
    if missing:
        raise ValueError(f"panel CSV missing columns: {sorted(missing)}")
    units = sorted(df["unit"].unique().tolist())
    periods = sorted(df["period"].unique().tolist())
    n, T = len(units), len(periods)
    if len(df) != n * T or df.duplicated(["unit", "period"]).any():
        raise ValueError("panel CSV must contain each (unit, period) exactly once")
    uix = {u: i for i, u in enumerate(units)}
    tix = {p: j for j, p in enumerate(periods)}
    rows = df["unit"].map(uix).to_numpy()
    cols = df["period"].map(tix).to_numpy()

    def grid(colnames):
        out = np.zeros((n, len(colnames), T))
        for j, c in enumerate(colnames):
            out[rows, j, cols] = df[c].to_numpy(dtype=float)
        return out

    x_names = sorted((c for c in df.columns if c.startswith("x_")), key=lambda c: int(c[2:]))
    z_names = sorted((c for c in df.columns if c.startswith("z_")), key=lambda c: int(c[2:]))
    y = np.zeros((n, T))
    y[rows, cols] = df["y"].to_numpy(dtype=float)
    return y, grid(x_names), grid(z_names), units, periods


def read_weights_csv(path, units: Sequence, T: int):
    """Read spatial weights from a coordinate-triplet CSV.

    Columns are either (i, j, value) for a single matrix used at every
    period, or (p, t, i, j, value) with 1-based p and period labels t.
    Unit labels i, j must match the panel's.

    Returns
    -------
    tuple of tuples of SpatialWeightMatrix, indexed [p][t-1].
    """
    df = pd.read_csv(path, float_precision="round_trip")
    uix = {u: i for i, u in enumerate(units)}
    n = len(units)

    def build(sub):
        r = sub["i"].map(uix)
        c = sub["j"].map(uix)
        if r.isna().any() or c.isna().any():
            bad = sorted(set(sub.loc[r.isna(), "i"]) | set(sub.loc[c.isna(), "j"]))
            raise ValueError(f"weights CSV references unknown units: {bad[:10]}")
        m = sparse.coo_matrix(
            (sub["value"].to_numpy(dtype=float), (r.to_numpy(int), c.to_numpy(int))), shape=(n, n)
        ).tocsr()
        return SpatialWeightMatrix(m if n >= SPARSE_THRESHOLD else m.toarray())

    if {"p", "t"}.issubset(df.columns):
        ps = sorted(df["p"].unique().tolist())
        if ps != list(range(1, len(ps) + 1)):
            raise ValueError(f"weight families must be numbered 1..P, got {ps}")
        ts = sorted(df["t"].unique().tolist())
        grid = []
        for p in ps:
            per_t = []
            for t in ts:
                per_t.append(build(df[(df["p"] == p) & (df["t"] == t)]))
            if len(per_t) == 1:
                per_t = per_t * T
            grid.append(tuple(per_t))
        return tuple(grid)
    if not {"i", "j", "value"}.issubset(df.columns):
        raise ValueError("weights CSV needs columns (i, j, value) or (p, t, i, j, value)")
    return ((build(df),) * T,)


def write_panel_csv(path, panel: PanelData, units: Sequence | None = None, periods: Sequence | None = None) -> None:
    """Write a PanelData's arrays as a long-format CSV (inverse of read)."""
    units = list(units) if units is not None else list(range(panel.n))
    periods = list(periods) if periods is not None else list(range(1, panel.T + 1))
    recs = {}
    ui, ti = np.meshgrid(np.arange(panel.n), np.arange(panel.T), indexing="ij")
    recs["unit"] = np.asarray(units, dtype=object)[ui.ravel()]
    recs["period"] = np.asarray(periods, dtype=object)[ti.ravel()]
    recs["y"] = panel.y.ravel()
    for j in range(panel.k_x):
        recs[f"x_{j + 1}"] = panel.x[:, j, :].ravel()
    for j in range(panel.k_z):
        recs[f"z_{j + 1}"] = panel.z[:, j, :].ravel()
    # %.17g round-trips doubles exactly
    pd.DataFrame(recs).to_csv(path, index=False, float_format="%.17g")


def write_weights_csv(path, M, units: Sequence | None = None) -> None:
    """Write weight matrices as (p, t, i, j, value) triplet rows."""
    rows = []
    for p, per_t in enumerate(M, start=1):
        for t, wm in enumerate(per_t, start=1):
            coo = sparse.coo_matrix(wm.entries if wm.is_sparse else wm.toarray())
            lab = (lambda k: units[k]) if units is not None else (lambda k: k)
            for i, j, v in zip(coo.row, coo.col, coo.data):
                rows.append((p, t, lab(i), lab(j), v))
    pd.DataFrame(rows, columns=["p", "t", "i", "j", "value"]).to_csv(path, index=False, float_format="%.17g")
