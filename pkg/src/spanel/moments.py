"""Instruments, quadratic weights, and the stacked moment vector.

Moments live on the transformed periods t = 1..T-P. Per period the block
is [H_t' u*_t / sqrt(n); u*_t' A_1 u*_t / sqrt(n); ...], linear entries
first, and blocks are concatenated in period order. The residual pipeline
behind u*_t is, in order: regression residual, spatial error filter,
forward transform, unit rescaling.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import sparse

from .errors import RankDeficientInstruments, SingularWeightMatrix
from .panel import PanelData, ParamVector, SpatialWeightMatrix, build_design
from .transform import HelmertTransform, cochrane_orcutt, forward_difference, helmert_weights

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelDesign:
    """A panel together with the regressor layout, with W_t/Z_t cached.

    Parameters
    ----------
    panel : PanelData
    lag_spec : sequence of lag terms
        Columns of Z_t, as accepted by build_design.
    estimate_factors : bool
        When True the estimator treats f_1..f_{T-1} as free parameters
        (single-factor model); otherwise f is held at its template value.
    """

    panel: PanelData
    lag_spec: tuple = ()
    estimate_factors: bool = False
    W: tuple = field(init=False, repr=False)
    Z: tuple = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "lag_spec", tuple(tuple(term) for term in self.lag_spec))
        built = [build_design(self.panel, t, self.lag_spec) for t in range(1, self.panel.T + 1)]
        object.__setattr__(self, "W", tuple(w for w, _ in built))
        object.__setattr__(self, "Z", tuple(z for _, z in built))

    @property
    def n(self) -> int:
        return self.panel.n

    @property
    def T(self) -> int:
        return self.panel.T

    @property
    def k(self) -> int:
        return self.Z[0].shape[1]

    def transform(self, params: ParamVector) -> HelmertTransform:
        return helmert_weights(params.f, params.gamma_sigma)

    def n_free(self, params: ParamVector) -> int:
        base = params.lam.size + params.beta.size + params.rho.size
        return base + (self.T - 1 if self.estimate_factors else 0)


@dataclass(frozen=True)
class MomentSet:
    """Instrument blocks and quadratic weights per transformed period.

    instruments[t] is n x p_t; quad_weights[t] is a sequence of symmetric
    zero-diagonal n x n matrices. Both are indexed by transformed period
    0..T-P-1. The global moment layout is linear-then-quadratic within a
    period, periods concatenated.
    """

    instruments: tuple
    quad_weights: tuple

    def __post_init__(self):
        H = tuple(np.asarray(h, dtype=float) for h in self.instruments)
        A = tuple(tuple(per_t) for per_t in self.quad_weights)
        if len(H) != len(A):
            raise ValueError(f"{len(H)} instrument blocks vs {len(A)} quadratic-weight lists")
        if not H:
            raise ValueError("moment set needs at least one period")
        n = H[0].shape[0]
        for t, h in enumerate(H):
            if h.ndim != 2 or h.shape[0] != n:
                raise ValueError(f"instrument block {t} must be n x p_t")
            if not np.all(np.isfinite(h)):
                raise ValueError(f"instrument block {t} has non-finite entries")
            h.flags.writeable = False
        for t, per_t in enumerate(A):
            for r, a in enumerate(per_t):
                if a.shape != (n, n):
                    raise ValueError(f"quadratic weight ({t},{r}) must be {n} x {n}")
                if sparse.issparse(a):
                    if np.any(a.diagonal() != 0.0) or (abs(a - a.T)).nnz != 0:
                        raise ValueError(f"quadratic weight ({t},{r}) must be symmetric with zero diagonal")
                else:
                    if np.any(np.diagonal(a) != 0.0) or not np.array_equal(a, a.T):
                        raise ValueError(f"quadratic weight ({t},{r}) must be symmetric with zero diagonal")
        object.__setattr__(self, "instruments", H)
        object.__setattr__(self, "quad_weights", A)

    @property
    def n(self) -> int:
        return self.instruments[0].shape[0]

    @property
    def n_periods(self) -> int:
        return len(self.instruments)

    @property
    def layout(self) -> tuple:
        """Per-period (p_t, q_t) moment counts."""
        return tuple((h.shape[1], len(a)) for h, a in zip(self.instruments, self.quad_weights))

    @property
    def total(self) -> int:
        return sum(p + q for p, q in self.layout)

    def block_slice(self, t: int) -> slice:
        off = sum(p + q for p, q in self.layout[:t])
        p, q = self.layout[t]
        return slice(off, off + p + q)

    def linear_slice(self, t: int) -> slice:
        b = self.block_slice(t)
        return slice(b.start, b.start + self.layout[t][0])

    def quad_slice(self, t: int) -> slice:
        b = self.block_slice(t)
        return slice(b.start + self.layout[t][0], b.stop)


@dataclass(frozen=True)
class MomentValue:
    """Stacked normalized moment vector with its layout tag."""

    m: np.ndarray
    layout: tuple

    def __post_init__(self):
        m = np.asarray(self.m, dtype=float)
        if not np.all(np.isfinite(m)):
            raise ValueError("moment vector has non-finite entries")
        m.flags.writeable = False
        object.__setattr__(self, "m", m)

    def linear(self, t: int) -> np.ndarray:
        off = sum(p + q for p, q in self.layout[:t])
        return self.m[off : off + self.layout[t][0]]

    def quadratic(self, t: int) -> np.ndarray:
        off = sum(p + q for p, q in self.layout[:t]) + self.layout[t][0]
        return self.m[off : off + self.layout[t][1]]


# ---------------------------------------------------------------------------
# construction helpers


def prune_columns(X: np.ndarray, tol: float = 1e-10) -> tuple[np.ndarray, list[int]]:
    """Drop columns (order-preserving) that are near-duplicates of earlier ones.

    A column is kept when its residual after projecting on the kept ones
    exceeds tol times its own norm. Returns the kept columns and indices.
    """
    X = np.asarray(X, dtype=float)
    basis = []
    kept = []
    for j in range(X.shape[1]):
        col = X[:, j]
        norm0 = np.linalg.norm(col)
        r = col.copy()
        for _ in range(2):  # reorthogonalize once for stability
            for b in basis:
                r -= (b @ r) * b
        if norm0 > 0 and np.linalg.norm(r) > tol * norm0:
            basis.append(r / np.linalg.norm(r))
            kept.append(j)
    return X[:, kept], kept


def build_instruments(
    panel: PanelData,
    M: SpatialWeightMatrix | None = None,
    max_order: int = 2,
    periods: Sequence[int] | None = None,
    transform: HelmertTransform | None = None,
    sources: Sequence[str] = ("z",),
    tol: float = 1e-10,
    required: int | None = None,
) -> list[np.ndarray]:
    """Spatial-lag instrument blocks [v, Mv, ..., M^s v], pruned.

    Powers are applied period by period to the raw covariate columns and
    then, when a transform is given, mapped to the transformed periods
    (for constant M this equals powering the transformed columns). Near-
    duplicate columns are removed per block with relative tolerance tol.

    Parameters
    ----------
    panel : PanelData
    M : SpatialWeightMatrix, optional
        Weight matrix for the powers; defaults to the panel's first
        family (per period).
    max_order : int
        Highest spatial power s >= 0.
    periods : sequence of int, optional
        1-based period indices to emit (transformed periods when a
        transform is given, original otherwise). Defaults to all.
    transform : HelmertTransform, optional
        When given, blocks are built on the transformed scale and one
        block per transformed period is returned.
    sources : sequence of {"z", "x"}
        Which covariate groups provide base columns.
    required : int, optional
        Minimum column count per block; fewer raises
        RankDeficientInstruments.

    Returns
    -------
    list of ndarray, one n x p_t block per requested period.
    """
    if max_order < 0:
        raise ValueError("max_order must be >= 0")
    n, T = panel.n, panel.T
    base = []
    for src in sources:
        arr = {"z": panel.z, "x": panel.x}.get(src)
        if arr is None:
            raise ValueError(f"unknown source {src!r}")
        base.extend(arr[:, j, :] for j in range(arr.shape[1]))
    if not base:
        raise RankDeficientInstruments("no base columns to build instruments from")

    def family(t0):
        if M is not None:
            return M
        if panel.P == 0:
            raise ValueError("panel has no weight matrices; pass M explicitly")
        return panel.M[0][t0]

    # raw[s][b] is the n x T stack of M^s applied to base column b per period
    raw = [[col.copy() for col in base]]
    for s in range(1, max_order + 1):
        prev = raw[-1]
        raw.append([np.column_stack([family(t0).dot(col[:, t0]) for t0 in range(T)]) for col in prev])

    if transform is not None:
        stacks = [[forward_difference(transform, col) for col in level] for level in raw]
        n_out = transform.n_rows
    else:
        stacks = raw
        n_out = T
    idx = range(1, n_out + 1) if periods is None else periods
    blocks = []
    for t in idx:
        if not 1 <= t <= n_out:
            raise ValueError(f"period {t} outside 1..{n_out}")
        cols = np.column_stack([col[:, t - 1] for level in stacks for col in level])
        H, kept = prune_columns(cols, tol=tol)
        if len(kept) < cols.shape[1]:
            logger.info("build_instruments: period %d kept %d of %d columns", t, len(kept), cols.shape[1])
        if required is not None and H.shape[1] < required:
            raise RankDeficientInstruments(
                f"period {t}: {H.shape[1]} independent instrument columns, {required} required"
            )
        blocks.append(H)
    return blocks


_KIND_RE = re.compile(r"^(sym|gram)(?:_power\((\d+)\))?$")


def build_quadratic_weights(M: SpatialWeightMatrix, kinds: Sequence[str]) -> list:
    """Quadratic moment weights from a spatial weight matrix.

    Kinds: "sym" = (M+M')/2, "gram" = M'M - diag(M'M), "sym_power(tau)"
    and "gram_power(tau)" for powers of the symmetrized matrix and of the
    Gram matrix. Every output is symmetrized and has its diagonal zeroed
    exactly.
    """
    mat = M.entries if isinstance(M, SpatialWeightMatrix) else M
    is_sp = sparse.issparse(mat)
    sym = ((mat + mat.T) * 0.5).tocsr() if is_sp else (mat + mat.T) * 0.5
    gram = (mat.T @ mat).tocsr() if is_sp else mat.T @ mat
    out = []
    for kind in kinds:
        m = _KIND_RE.match(kind)
        if not m:
            raise ValueError(f"unknown quadratic weight kind {kind!r}")
        root = sym if m.group(1) == "sym" else gram
        tau = int(m.group(2)) if m.group(2) else 1
        if tau < 1:
            raise ValueError(f"power must be >= 1 in {kind!r}")
        A = root.copy()
        for _ in range(tau - 1):
            A = A @ root
        A = (A + A.T) * 0.5
        if is_sp:
            A = A.tolil()
            A.setdiag(0.0)
            A = A.tocsr()
            A.eliminate_zeros()
        else:
            A = np.asarray(A)
            np.fill_diagonal(A, 0.0)
        out.append(A)
    return out


def default_moment_set(
    design: ModelDesign,
    params: ParamVector,
    max_order: int = 2,
    kinds: Sequence[str] = ("sym", "gram"),
    M: SpatialWeightMatrix | None = None,
    tol: float = 1e-10,
) -> MomentSet:
    """Standard moment set: powered-lag instruments plus sym/gram weights.

    One instrument block per transformed period and the same quadratic
    weight list at every period (weights built from the first panel
    matrix, or M when given and the panel's weights vary over time the
    first period's matrix is used).
    """
    tr = design.transform(params)
    H = build_instruments(design.panel, M=M, max_order=max_order, transform=tr, tol=tol)
    base = M if M is not None else design.panel.M[0][0]
    A = build_quadratic_weights(base, kinds)
    return MomentSet(instruments=tuple(H), quad_weights=tuple(tuple(A) for _ in H))


# ---------------------------------------------------------------------------
# residual pipeline and moment evaluation


def _filtered_residuals(design: ModelDesign, params: ParamVector) -> np.ndarray:
    """R_s(rho) (y_s - W_s delta) for every original period, as n x T."""
    delta = params.delta
    cols = []
    for s in range(design.T):
        e = design.panel.y[:, s] - design.W[s] @ delta
        if params.rho.size:
            e = cochrane_orcutt(params.rho, [design.panel.M_err[q][s] for q in range(design.panel.Q)], e)
        cols.append(e)
    return np.column_stack(cols)


def _scaled_transformed(design: ModelDesign, params: ParamVector, arr: np.ndarray, tr=None) -> np.ndarray:
    tr = tr or design.transform(params)
    return forward_difference(tr, arr) / params.rho_scale(design.n)[:, None]


def evaluate_moments(params: ParamVector, design: ModelDesign, ms: MomentSet) -> MomentValue:
    """Stacked normalized moment vector at the given parameters.

    Pipeline per original period s: e_s = y_s - W_s delta, then the
    spatial error filter, then forward transform across periods, then
    per-unit rescaling; linear and quadratic contributions are assembled
    into the period-major layout, divided by sqrt(n).
    """
    n = design.n
    tr = design.transform(params)
    if ms.n_periods != tr.n_rows:
        raise ValueError(f"moment set has {ms.n_periods} periods, transform produces {tr.n_rows}")
    U = _scaled_transformed(design, params, _filtered_residuals(design, params), tr)
    root = np.sqrt(n)
    out = []
    for t in range(ms.n_periods):
        u = U[:, t]
        out.append(ms.instruments[t].T @ u / root)
        quad = [u @ (A @ u) / root for A in ms.quad_weights[t]]
        out.append(np.asarray(quad))
    return MomentValue(m=np.concatenate(out), layout=ms.layout)


def moment_jacobian(params: ParamVector, design: ModelDesign, ms: MomentSet, fd_step: float = 1e-6) -> np.ndarray:
    """Derivative of the stacked moment vector in the free parameters.

    Parameter order: lambda, beta, rho, then f_1..f_{T-1} when the design
    estimates factors. The delta and rho blocks are analytic (the
    residual pipeline is affine in both); the f block uses central finite
    differences on the transform weights with a relative step.
    """
    n, T = design.n, design.T
    P, k, Q = params.lam.size, params.beta.size, params.rho.size
    tr = design.transform(params)
    scale = params.rho_scale(n)[:, None]
    E = _filtered_residuals(design, params)
    U = forward_difference(tr, E) / scale

    def filt(cols_by_period):
        stack = np.stack(cols_by_period, axis=1)  # n x T
        return forward_difference(tr, stack) / scale

    # dU[:, t, j]: derivative of u*_t in free parameter j
    n_free = design.n_free(params)
    dU = np.zeros((n, tr.n_rows, n_free))
    for j in range(P + k):
        cols = []
        for s in range(T):
            w = design.W[s][:, j]
            if Q:
                w = cochrane_orcutt(params.rho, [design.panel.M_err[q][s] for q in range(design.panel.Q)], w)
            cols.append(-w)
        dU[:, :, j] = filt(cols)
    e_cols = None
    for q in range(Q):
        if e_cols is None:
            delta = params.delta
            e_cols = [design.panel.y[:, s] - design.W[s] @ delta for s in range(T)]
        cols = [-(design.panel.M_err[q][s].dot(e_cols[s])) for s in range(T)]
        dU[:, :, P + k + q] = filt(cols)

    root = np.sqrt(n)
    J = np.zeros((ms.total, n_free))
    for t in range(ms.n_periods):
        u = U[:, t]
        dblock = dU[:, t, :]
        ls, qs = ms.linear_slice(t), ms.quad_slice(t)
        J[ls, :] = ms.instruments[t].T @ dblock / root
        for r, A in enumerate(ms.quad_weights[t]):
            J[qs.start + r, :] = 2.0 * ((A @ u) @ dblock) / root

    if design.estimate_factors:
        base = P + k + Q
        f0 = np.array(params.f)
        for j in range(T - 1):
            h = fd_step * max(1.0, abs(f0[j]))
            up, dn = f0.copy(), f0.copy()
            up[j] += h
            dn[j] -= h
            m_up = evaluate_moments(_with_f(params, up), design, ms).m
            m_dn = evaluate_moments(_with_f(params, dn), design, ms).m
            J[:, base + j] = (m_up - m_dn) / (2.0 * h)
    return J


def _with_f(params: ParamVector, f: np.ndarray) -> ParamVector:
    return ParamVector(
        lam=params.lam, beta=params.beta, rho=params.rho, f=f,
        gamma_sigma=params.gamma_sigma, gamma_rho=params.gamma_rho,
    )


def _tr_product(A, B) -> float:
    """tr(A B) for symmetric A and B, any mix of dense and sparse."""
    if sparse.issparse(A):
        return float(A.multiply(B).sum())
    if sparse.issparse(B):
        return float(B.multiply(A).sum())
    return float(np.sum(np.asarray(A) * np.asarray(B)))


@dataclass(frozen=True)
class WeightMatrix:
    """Optimal moment variance V~ with its (pseudo-)inverse."""

    V: np.ndarray
    V_inv: np.ndarray
    pseudo: bool
    eigenvalues: np.ndarray


def weight_matrix(ms: MomentSet, allow_pseudo: bool = True) -> WeightMatrix:
    """Block-diagonal moment variance and its inverse.

    Per period the block is diag(H'H/n, 2 * tr-products of the quadratic
    weights / n); linear and quadratic moments are uncorrelated under the
    maintained transform, so off-diagonal blocks are zero. Inversion goes
    through an eigendecomposition; eigenvalues below 1e-10 times the
    largest trigger a logged pseudo-inverse (or SingularWeightMatrix when
    disallowed).
    """
    n = ms.n
    V = np.zeros((ms.total, ms.total))
    for t in range(ms.n_periods):
        H = ms.instruments[t]
        ls, qs = ms.linear_slice(t), ms.quad_slice(t)
        V[ls, ls] = H.T @ H / n
        A_list = ms.quad_weights[t]
        for r, Ar in enumerate(A_list):
            for s_, As in enumerate(A_list[: r + 1]):
                v = 2.0 * _tr_product(Ar, As) / n
                V[qs.start + r, qs.start + s_] = v
                V[qs.start + s_, qs.start + r] = v
    vals, vecs = np.linalg.eigh(V)
    top = vals.max(initial=0.0)
    bad = vals < 1e-10 * top
    if bad.any() or top == 0.0:
        if not allow_pseudo:
            raise SingularWeightMatrix(
                f"{int(bad.sum())} eigenvalue(s) below 1e-10 of the largest ({top:.3e})"
            )
        logger.warning("weight_matrix: pseudo-inverse over %d near-zero eigenvalue(s)", int(bad.sum()))
        inv_vals = np.where(bad, 0.0, 1.0 / np.where(bad, 1.0, vals))
        pseudo = True
    else:
        inv_vals = 1.0 / vals
        pseudo = False
    Vi = (vecs * inv_vals) @ vecs.T
    return WeightMatrix(V=V, V_inv=(Vi + Vi.T) * 0.5, pseudo=pseudo, eigenvalues=vals)


# ---------------------------------------------------------------------------
# transformed design pieces shared by the closed-form estimators


@dataclass(frozen=True)
class TransformedDesign:
    """Filtered, transformed, rescaled design: y+, W+_t, Z+_t per period."""

    y: np.ndarray
    W: tuple
    Z: tuple

    @property
    def n_periods(self) -> int:
        return self.y.shape[1]


def transformed_design(design: ModelDesign, params: ParamVector) -> TransformedDesign:
    """Apply the full residual pipeline to y and to each design column."""
    tr = design.transform(params)
    n, T = design.n, design.T

    def filt(cols):
        if not params.rho.size:
            return cols
        return [
            cochrane_orcutt(params.rho, [design.panel.M_err[q][s] for q in range(design.panel.Q)], c)
            for s, c in enumerate(cols)
        ]

    yp = _scaled_transformed(design, params, np.column_stack(filt([design.panel.y[:, s] for s in range(T)])), tr)
    scale = params.rho_scale(n)[:, None]

    def block(mats):
        d = mats[0].shape[1]
        if d == 0:
            return tuple(np.zeros((n, 0)) for _ in range(tr.n_rows))
        out = []
        for j in range(d):
            stack = np.column_stack(filt([mats[s][:, j] for s in range(T)]))
            out.append(forward_difference(tr, stack) / scale)
        return tuple(np.column_stack([c[:, t] for c in out]) for t in range(tr.n_rows))

    return TransformedDesign(y=yp, W=block(design.W), Z=block(design.Z))
