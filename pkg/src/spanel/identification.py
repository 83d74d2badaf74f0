"""Empirical rank diagnostics for the linear and quadratic moment conditions.

The linear moments identify the full coefficient vector when the
instrument cross-moment with the design columns has full column rank.
When it does not, identification can still come from the quadratic
moments, provided the instruments remain relevant for the exogenous
columns and the q x 2 matrix S_n built from instrument-residualized
outcomes has full column rank. Population statements are checked here
through smallest singular values against configurable thresholds:
finite-sample matrices are never exactly rank deficient.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import SingularProjection
from .moments import ModelDesign, MomentSet, transformed_design
from .panel import ParamVector

logger = logging.getLogger(__name__)

VERDICTS = ("linear_identified", "quadratic_identified", "not_identified")

DEFAULT_TAU1 = 1e-4
DEFAULT_TAU2 = 1e-4


def _verdict(sigma_hw: float, sigma_hz: float, sigma_s: float, tau1: float, tau2: float) -> str:
    if sigma_hw > tau1:
        return "linear_identified"
    if sigma_hz > tau1 and sigma_s > tau2:
        return "quadratic_identified"
    return "not_identified"


@dataclass(frozen=True)
class IdentificationReport:
    """Smallest singular values of the moment cross-products and the verdict.

    sigma_min_HW and sigma_min_HZ are the smallest singular values of the
    stacked n^{-1} H't W+t and n^{-1} H't Z+t; by convention a matrix with
    fewer rows than columns gets 0 (it cannot have full column rank).
    S_n stacks the per-period q x 2 quadratic-identification matrices.
    """

    sigma_min_HW: float
    sigma_min_HZ: float
    S_n: np.ndarray
    sigma_min_S: float
    det_StS: float
    verdict: str
    tau1: float = DEFAULT_TAU1
    tau2: float = DEFAULT_TAU2

    def __post_init__(self):
        s = np.asarray(self.S_n, dtype=float)
        s.flags.writeable = False
        object.__setattr__(self, "S_n", s)
        for name in ("sigma_min_HW", "sigma_min_HZ", "sigma_min_S"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.verdict not in VERDICTS:
            raise ValueError(f"unknown verdict {self.verdict!r}")
        expected = _verdict(self.sigma_min_HW, self.sigma_min_HZ, self.sigma_min_S, self.tau1, self.tau2)
        if self.verdict != expected:
            raise ValueError(f"verdict {self.verdict!r} inconsistent with thresholds (expected {expected!r})")

    def to_dict(self) -> dict:
        return {
            "sigma_min_HW": float(self.sigma_min_HW),
            "sigma_min_HZ": float(self.sigma_min_HZ),
            "S_n": np.asarray(self.S_n).tolist(),
            "sigma_min_S": float(self.sigma_min_S),
            "det_StS": float(self.det_StS),
            "verdict": self.verdict,
            "tau1": float(self.tau1),
            "tau2": float(self.tau2),
        }


def compute_projectors(H: np.ndarray, Z_plus: np.ndarray):
    """Instrument projector and its Z-annihilating companion, matrix-free.

    Returns closures (p_h, q_h) acting on n-vectors or n x m arrays:
    p_h(v) = H (H'H)^{-1} H'v and q_h(v) = v - Z (Z'P_H Z)^{-1} Z'P_H v,
    so q_h(Z_plus) = 0. Neither n x n projector is ever materialized.
    Singular H'H falls back to a pseudo-inverse with a log message.

    Raises
    ------
    SingularProjection
        If Z'P_H Z is numerically singular.
    """
    H = np.asarray(H, dtype=float)
    Z = np.asarray(Z_plus, dtype=float)
    if H.ndim != 2 or Z.ndim != 2 or H.shape[0] != Z.shape[0]:
        raise ValueError("H and Z_plus must be n x p and n x k")
    G = H.T @ H
    use_pinv = False
    if G.size:
        cond = np.linalg.cond(G)
        if not np.isfinite(cond) or cond > 1e12:
            use_pinv = True
            logger.info("compute_projectors: H'H singular (cond %.2e), using pseudo-inverse", cond)
    Ginv = np.linalg.pinv(G) if use_pinv else None

    def p_h(v):
        Hv = H.T @ np.asarray(v, dtype=float)
        return H @ (Ginv @ Hv) if use_pinv else H @ np.linalg.solve(G, Hv)

    if Z.shape[1] == 0:
        return p_h, lambda v: np.asarray(v, dtype=float)

    PZ = p_h(Z)
    ZPZ = Z.T @ PZ
    cond = np.linalg.cond(ZPZ)
    if not np.isfinite(cond) or cond > 1e12:
        raise SingularProjection(f"Z'P_H Z is numerically singular (cond {cond:.2e})")

    def q_h(v):
        v = np.asarray(v, dtype=float)
        return v - Z @ np.linalg.solve(ZPZ, PZ.T @ v)

    return p_h, q_h


def _s_rows(a: np.ndarray, b: np.ndarray, A_list, n: int) -> np.ndarray:
    rows = [[float(a @ (A @ b)) / n, float(a @ (A @ a)) / n] for A in A_list]
    return np.asarray(rows, dtype=float).reshape(len(rows), 2)


def compute_S(y_plus: np.ndarray, M, A_list, q_h) -> np.ndarray:
    """q x 2 quadratic-identification matrix for one transformed period.

    Row r is n^{-1} [ (Q_H M y+)' A_r (Q_H y+), (Q_H M y+)' A_r (Q_H M y+) ].
    """
    y = np.asarray(y_plus, dtype=float)
    if y.ndim != 1:
        raise ValueError("y_plus must be a vector")
    My = M.dot(y) if hasattr(M, "dot") else np.asarray(M) @ y
    if My.shape != y.shape:
        raise ValueError("M must be n x n")
    return _s_rows(q_h(My), q_h(y), A_list, y.size)


def _sigma_min_full_rank(mat: np.ndarray) -> float:
    """Smallest singular value, with 0 for matrices too short to have full column rank."""
    if mat.shape[1] == 0:
        return np.inf
    if mat.shape[0] < mat.shape[1]:
        return 0.0
    return float(np.linalg.svd(mat, compute_uv=False)[-1])


def diagnose(
    design: ModelDesign,
    ms: MomentSet,
    params: ParamVector | None = None,
    tau1: float = DEFAULT_TAU1,
    tau2: float = DEFAULT_TAU2,
) -> IdentificationReport:
    """Identification verdict from the empirical moment cross-products.

    linear_identified when the smallest singular value of the stacked
    n^{-1} H'W+ exceeds tau1; otherwise quadratic_identified when both
    the stacked n^{-1} H'Z+ clears tau1 and the stacked S_n clears tau2;
    otherwise not_identified. With more than one transformed period the
    per-period matrices are stacked vertically; this pooled extension of
    the single-period rank conditions is a diagnostic heuristic.

    Only a single spatial-lag family is supported: S_n is defined for one
    endogenous column.
    """
    if design.panel.P != 1:
        raise ValueError("identification diagnostics require exactly one spatial lag family")
    if tau1 < 0 or tau2 < 0:
        raise ValueError("thresholds must be nonnegative")
    from .estimator import default_template

    params = params or default_template(design)
    td = transformed_design(design, params)
    if ms.n_periods != td.n_periods:
        raise ValueError(f"moment set has {ms.n_periods} periods, transform produces {td.n_periods}")
    n = design.n

    hw_blocks, hz_blocks, s_blocks = [], [], []
    for t in range(ms.n_periods):
        H = ms.instruments[t]
        hw_blocks.append(H.T @ td.W[t] / n)
        hz_blocks.append(H.T @ td.Z[t] / n)
        _, q_h = compute_projectors(H, td.Z[t])
        # the spatial lag of y+ is the first design column by construction
        My_plus = td.W[t][:, 0]
        rows = _s_rows(q_h(My_plus), q_h(td.y[:, t]), ms.quad_weights[t], n)
        if rows.size:
            s_blocks.append(rows)
    S_n = np.vstack(s_blocks) if s_blocks else np.zeros((0, 2))
    sigma_hw = _sigma_min_full_rank(np.vstack(hw_blocks))
    sigma_hz = _sigma_min_full_rank(np.vstack(hz_blocks))
    sigma_s = _sigma_min_full_rank(S_n)
    det = float(np.linalg.det(S_n.T @ S_n))
    return IdentificationReport(
        sigma_min_HW=sigma_hw,
        sigma_min_HZ=sigma_hz,
        S_n=S_n,
        sigma_min_S=sigma_s,
        det_StS=det,
        verdict=_verdict(sigma_hw, sigma_hz, sigma_s, tau1, tau2),
        tau1=tau1,
        tau2=tau2,
    )
