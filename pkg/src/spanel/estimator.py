"""GMM estimation, starting values, comparators, and Wald inference.

The objective is q(theta) = m_bar' Xi m_bar / n over the free parameters
(lambda, beta, rho, optionally f_1..f_{T-1}). Minimization runs a bounded
quasi-Newton pass followed by a damped Newton polish so that convergence
can be certified by a projected-gradient and last-step test rather than
the optimizer's own heuristics.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import optimize, stats

from .errors import (
    DidNotConverge,
    NoStartingValue,
    RankDeficientJacobian,
    RankDeficientRestriction,
    SingularProjection,
)
from .moments import (
    ModelDesign,
    MomentSet,
    evaluate_moments,
    moment_jacobian,
    transformed_design,
    weight_matrix,
)
from .panel import ParamVector

logger = logging.getLogger(__name__)

GRAD_TOL = 1e-8
STEP_TOL = 1e-10
OBJ_TIE_TOL = 1e-12


# ---------------------------------------------------------------------------
# parameter packing


def default_template(design: ModelDesign) -> ParamVector:
    """All-zero coefficients with unit factor and variance profiles."""
    T = design.T
    return ParamVector(
        lam=np.zeros(design.panel.P),
        beta=np.zeros(design.k),
        rho=np.zeros(design.panel.Q),
        f=np.ones(T),
        gamma_sigma=np.ones(T),
        gamma_rho=1.0,
    )


def pack_free(params: ParamVector, design: ModelDesign) -> np.ndarray:
    parts = [params.lam, params.beta, params.rho]
    if design.estimate_factors:
        parts.append(params.f[:-1])
    return np.concatenate(parts)


def unpack_free(theta: np.ndarray, template: ParamVector, design: ModelDesign) -> ParamVector:
    theta = np.asarray(theta, dtype=float)
    P, k, Q = template.lam.size, template.beta.size, template.rho.size
    f = np.append(theta[P + k + Q :], 1.0) if design.estimate_factors else template.f
    return ParamVector(
        lam=theta[:P],
        beta=theta[P : P + k],
        rho=theta[P + k : P + k + Q],
        f=f,
        gamma_sigma=template.gamma_sigma,
        gamma_rho=template.gamma_rho,
    )


def _bounds(template: ParamVector, design: ModelDesign, lambda_bounds, rho_bounds):
    P, k, Q = template.lam.size, template.beta.size, template.rho.size
    lo = [lambda_bounds[0]] * P + [-np.inf] * k + [rho_bounds[0]] * Q
    hi = [lambda_bounds[1]] * P + [np.inf] * k + [rho_bounds[1]] * Q
    if design.estimate_factors:
        # f_T = 1 keeps phi_t >= 1, so free loadings need no box
        lo += [-np.inf] * (template.T - 1)
        hi += [np.inf] * (template.T - 1)
    return np.array(lo), np.array(hi)


# ---------------------------------------------------------------------------
# results


@dataclass(frozen=True)
class GmmResult:
    """Estimation outcome.

    theta_hat is the free parameter vector in (lambda, beta, rho[, f])
    order; params is the same point as a full ParamVector. G_hat is the
    derivative of the sqrt(n)-renormalized moment vector, V_hat the
    optimal moment variance, Psi_hat the sandwich so that
    Var(theta_hat) ~ Psi_hat / n.
    """

    params: ParamVector
    theta_hat: np.ndarray
    objective: float
    G_hat: np.ndarray
    V_hat: np.ndarray
    Psi_hat: np.ndarray
    converged: bool
    iterations: int
    starts: int
    n: int
    first_step: "GmmResult | None" = None

    def __post_init__(self):
        if self.objective < -1e-12:
            raise ValueError("objective must be nonnegative")
        psi = np.asarray(self.Psi_hat)
        if not np.allclose(psi, psi.T, atol=1e-8):
            raise ValueError("Psi_hat must be symmetric")


@dataclass(frozen=True)
class WaldOutcome:
    """Wald statistic with its reference distribution outcome."""

    statistic: float
    dof: int
    p_value: float

    def __post_init__(self):
        if not (self.statistic >= 0 and 0.0 <= self.p_value <= 1.0):
            raise ValueError("invalid Wald outcome")


@dataclass(frozen=True)
class StartCandidate:
    lam: float
    beta: np.ndarray
    criterion: float


# ---------------------------------------------------------------------------
# profiling and Algorithm-1 starting values (single spatial lag)


class _Profile:
    """Concentrated slope coefficients: beta(lam) = b0 - lam*b1 and the
    profiled residuals u_t(lam) = u0_t - lam*u1_t on transformed data."""

    def __init__(self, design: ModelDesign, instruments, params: ParamVector):
        if design.panel.P != 1:
            raise ValueError("profiling requires exactly one spatial lag family")
        td = transformed_design(design, params)
        H_list = instruments.instruments if isinstance(instruments, MomentSet) else list(instruments)
        if len(H_list) != td.n_periods:
            raise ValueError(f"{len(H_list)} instrument blocks for {td.n_periods} transformed periods")
        k = design.k
        S = np.zeros((k, k))
        c0 = np.zeros(k)
        c1 = np.zeros(k)
        self.proj = []
        for t in range(td.n_periods):
            H = np.asarray(H_list[t], dtype=float)
            Z = td.W[t][:, 1:]
            y = td.y[:, t]
            my = td.W[t][:, 0]
            G = H.T @ H
            PZ = H @ np.linalg.solve(G, H.T @ Z) if k else np.zeros((H.shape[0], 0))
            S += Z.T @ PZ if k else 0.0
            c0 += PZ.T @ y if k else 0.0
            c1 += PZ.T @ my if k else 0.0
            self.proj.append((y, my, Z))
        if k:
            zz_scale = sum(np.trace(Z.T @ Z) for (_, _, Z) in self.proj) / k
            S = (S + S.T) / 2.0
            smin = np.linalg.eigvalsh(S).min()
            cond = np.linalg.cond(S)
            if not np.isfinite(cond) or cond > 1e12 or smin <= 1e-12 * max(zz_scale, 1.0):
                raise SingularProjection(
                    f"projected covariates are numerically collinear "
                    f"(condition {cond:.2e}, min eigenvalue {smin:.2e})"
                )
            self.b0 = np.linalg.solve(S, c0)
            self.b1 = np.linalg.solve(S, c1)
        else:
            self.b0 = np.zeros(0)
            self.b1 = np.zeros(0)
        self.u0 = [y - Z @ self.b0 for (y, my, Z) in self.proj]
        self.u1 = [my - Z @ self.b1 for (y, my, Z) in self.proj]

    def beta(self, lam: float) -> np.ndarray:
        return self.b0 - lam * self.b1

    def residuals(self, lam: float) -> list[np.ndarray]:
        return [u0 - lam * u1 for u0, u1 in zip(self.u0, self.u1)]


def partial_out_beta(lam: float, design: ModelDesign, instruments, params: ParamVector | None = None):
    """Concentrate the slope coefficients out at a given lambda.

    Projects the transformed covariates on the instrument space and
    solves for beta(lam); returns (beta, residuals-per-period) with
    u_t(lam) = (y+ - lam*My+)_t - Z+_t beta. beta is affine in lam.

    Raises
    ------
    SingularProjection
        If the concentration matrix has condition number above 1e12.
    """
    params = params or default_template(design)
    prof = _Profile(design, instruments, params)
    return prof.beta(lam), prof.residuals(lam)


def _quad_block_weight(ms: MomentSet) -> tuple[np.ndarray, list]:
    """V^a across all quadratic moments (block-diagonal over periods)."""
    wm = weight_matrix(ms)
    idx = []
    for t in range(ms.n_periods):
        qs = ms.quad_slice(t)
        idx.extend(range(qs.start, qs.stop))
    Va = wm.V[np.ix_(idx, idx)] / 2.0
    return Va, idx


def quadratic_moment_polynomials(
    design: ModelDesign, ms: MomentSet, params: ParamVector | None = None
) -> tuple[np.ndarray, _Profile]:
    """Exact quadratic coefficients of every profiled quadratic moment.

    Each m_r(lam) = u(lam)' A_r u(lam) / sqrt(n) is an exact quadratic in
    lam once beta is concentrated out; coefficients (a0, a1, a2) are
    recovered from evaluations at lam in {-1, 0, 1}. Returns an
    (n_quad, 3) array and the profile used.
    """
    params = params or default_template(design)
    prof = _Profile(design, ms, params)
    root = np.sqrt(design.n)
    scale = params.rho_scale(design.n)

    def quad_values(lam: float) -> np.ndarray:
        out = []
        for t, u in enumerate(prof.residuals(lam)):
            us = u / scale
            out.extend(us @ (A @ us) / root for A in ms.quad_weights[t])
        return np.asarray(out)

    m0, mp, mn = quad_values(0.0), quad_values(1.0), quad_values(-1.0)
    a0 = m0
    a2 = (mp + mn) / 2.0 - m0
    a1 = (mp - mn) / 2.0
    return np.column_stack([a0, a1, a2]), prof


def starting_values(
    design: ModelDesign,
    ms: MomentSet,
    params: ParamVector | None = None,
    grid: np.ndarray | None = None,
) -> list[StartCandidate]:
    """Root-based starting values for (lambda, beta).

    Solves each profiled quadratic moment for its real roots in lambda,
    scores every root by the quadratic-moment criterion
    m_q' (V^a)^{-1} m_q / n, and returns candidates best-first. When no
    moment has real roots the criterion is minimized over a fixed grid.

    Raises
    ------
    NoStartingValue
        If the grid fallback cannot produce a finite criterion either.
    """
    params = params or default_template(design)
    polys, prof = quadratic_moment_polynomials(design, ms, params)
    Va, _ = _quad_block_weight(ms)
    n = design.n

    def criterion(lam: float) -> float:
        mq = polys[:, 0] + polys[:, 1] * lam + polys[:, 2] * lam * lam
        try:
            return float(mq @ np.linalg.solve(Va, mq)) / n
        except np.linalg.LinAlgError:
            return float(mq @ np.linalg.lstsq(Va, mq, rcond=None)[0]) / n

    roots: list[float] = []
    for a0, a1, a2 in polys:
        if abs(a2) < 1e-14 * max(1.0, abs(a0), abs(a1)):
            if a1 != 0.0:
                roots.append(-a0 / a1)
            continue
        disc = a1 * a1 - 4.0 * a0 * a2
        if disc >= 0.0:
            sq = np.sqrt(disc)
            roots.extend([(-a1 - sq) / (2 * a2), (-a1 + sq) / (2 * a2)])

    uniq: list[float] = []
    for lam in roots:
        if np.isfinite(lam) and not any(abs(lam - u) < 1e-10 for u in uniq):
            uniq.append(lam)
    cands = [StartCandidate(lam=lam, beta=prof.beta(lam), criterion=criterion(lam)) for lam in uniq]
    cands = [c for c in cands if np.isfinite(c.criterion)]
    if not cands:
        grid = np.linspace(-0.99, 0.99, 41) if grid is None else np.asarray(grid)
        vals = [(criterion(lam), lam) for lam in grid]
        vals = [(v, lam) for v, lam in vals if np.isfinite(v)]
        if not vals:
            raise NoStartingValue("no real roots and the grid produced no finite criterion")
        v, lam = min(vals)
        logger.info("starting_values: grid fallback selected lambda=%.4f", lam)
        cands = [StartCandidate(lam=lam, beta=prof.beta(lam), criterion=v)]
    cands.sort(key=lambda c: c.criterion)
    return cands


# ---------------------------------------------------------------------------
# GMM optimization


class _AffineResidualMoments:
    """Closed-form moments when residuals are affine in theta.

    With no error filter and a fixed factor profile, u_t(theta) =
    y+_t - W+_t theta, so each linear moment is affine and each quadratic
    moment is an exact quadratic in theta. Precomputing the coefficient
    tensors makes objective evaluations independent of n.
    """

    def __init__(self, design: ModelDesign, ms: MomentSet, template: ParamVector):
        td = transformed_design(design, template)
        root = np.sqrt(design.n)
        self.blocks = []
        for t in range(ms.n_periods):
            H = ms.instruments[t]
            W = td.W[t]
            y = td.y[:, t]
            h0 = H.T @ y / root
            HW = H.T @ W / root
            quads = []
            for A in ms.quad_weights[t]:
                Ay = A @ y
                AW = A @ W
                C2 = W.T @ AW / root
                quads.append((float(y @ Ay) / root, W.T @ Ay / root, (C2 + C2.T) / 2.0))
            self.blocks.append((h0, HW, quads))

    def moments_jac(self, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        m_parts, j_parts = [], []
        for h0, HW, quads in self.blocks:
            m_parts.append(h0 - HW @ theta)
            j_parts.append(-HW)
            for c0, c1, C2 in quads:
                C2t = C2 @ theta
                m_parts.append(np.atleast_1d(c0 - 2.0 * (c1 @ theta) + theta @ C2t))
                j_parts.append(2.0 * (C2t - c1)[None, :])
        return np.concatenate(m_parts), np.vstack(j_parts)


def _can_use_affine_path(design: ModelDesign, template: ParamVector) -> bool:
    return not design.estimate_factors and template.rho.size == 0


def _coerce_xi(Xi, p: int) -> np.ndarray:
    if Xi is None:
        return np.eye(p)
    if hasattr(Xi, "V_inv"):
        Xi = Xi.V_inv
    Xi = np.asarray(Xi, dtype=float)
    if Xi.shape != (p, p):
        raise ValueError(f"weighting matrix must be {p} x {p}, got {Xi.shape}")
    if not np.allclose(Xi, Xi.T, atol=1e-10):
        raise ValueError("weighting matrix must be symmetric")
    return Xi


def _project(x, lo, hi):
    return np.minimum(np.maximum(x, lo), hi)


def _projected_gradient(x, g, lo, hi):
    pg = g.copy()
    pg[(x <= lo) & (g > 0)] = 0.0
    pg[(x >= hi) & (g < 0)] = 0.0
    return pg


def _newton_polish(value, value_grad, x0, lo, hi, max_iter=60, fd_step=1e-6):
    """Damped Newton iterations until projected gradient and step are tiny.

    Convergence requires max|projected gradient| < GRAD_TOL and the last
    accepted step < STEP_TOL, both certified by this loop itself (at
    least one iteration always runs, whatever the seeding optimizer
    claimed).
    """
    x = x0.copy()
    d = x.size
    f0, g = value_grad(x)
    last_step = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        pg = _projected_gradient(x, g, lo, hi)
        if np.max(np.abs(pg)) < GRAD_TOL and last_step < STEP_TOL:
            return x, f0, True, it - 1
        # forward-difference Hessian of the analytic gradient
        H = np.empty((d, d))
        for j in range(d):
            h = fd_step * max(1.0, abs(x[j]))
            xp = x.copy()
            xp[j] += h
            H[:, j] = (value_grad(xp)[1] - g) / h
        H = (H + H.T) / 2.0
        try:
            step = np.linalg.solve(H + 1e-12 * np.eye(d), -g)
        except np.linalg.LinAlgError:
            step = -g
        if g @ step > 0:  # not a descent direction, fall back to steepest
            step = -g
        fx = f0
        alpha, accepted = 1.0, False
        while alpha > 1e-14:
            cand = _project(x + alpha * step, lo, hi)
            f_cand = value(cand)
            if f_cand <= fx - 1e-4 * alpha * abs(g @ step) or f_cand < fx - 1e-16:
                accepted = True
                break
            alpha *= 0.5
        if accepted:
            last_step = float(np.max(np.abs(cand - x)))
            x = cand
            f0, g = value_grad(x)
        else:
            last_step = 0.0  # no admissible move from here
        if last_step == 0.0:
            pg = _projected_gradient(x, g, lo, hi)
            return x, f0, bool(np.max(np.abs(pg)) < GRAD_TOL), it
    pg = _projected_gradient(x, g, lo, hi)
    return x, f0, bool(np.max(np.abs(pg)) < GRAD_TOL and last_step < STEP_TOL), it


def gmm_estimate(
    design: ModelDesign,
    ms: MomentSet,
    template: ParamVector | None = None,
    Xi=None,
    starts: Sequence | None = None,
    lambda_bounds: tuple[float, float] = (-0.99, 0.99),
    rho_bounds: tuple[float, float] = (-0.99, 0.99),
    algorithm1: bool = True,
    include_tsls_start: bool = True,
    require_convergence: bool = False,
    max_iter: int = 200,
    fast: bool = True,
) -> GmmResult:
    """Minimize the GMM objective over the free parameters.

    Multi-start local minimization: provided starts, then root-based
    candidates (single-lag designs), then the linear-IV point. The best
    local optimum wins; exact ties prefer the smallest parameter norm,
    then the earliest start.

    Parameters
    ----------
    template : ParamVector, optional
        Source of the held-fixed parts (f, variance profiles) and of the
        default start. Defaults to zeros with unit profiles.
    Xi : ndarray or WeightMatrix, optional
        Moment weighting; identity when omitted.
    starts : sequence of ParamVector or free vectors, optional
    require_convergence : bool
        Raise DidNotConverge instead of returning converged=False.
    fast : bool
        Use the precomputed polynomial form of the objective when the
        residuals are affine in theta (same function, evaluated without
        touching n-sized arrays). Disable to force the general pipeline.
    """
    template = template or default_template(design)
    n = design.n
    Xi_mat = _coerce_xi(Xi, ms.total)
    lo, hi = _bounds(template, design, lambda_bounds, rho_bounds)

    if fast and _can_use_affine_path(design, template):
        poly = _AffineResidualMoments(design, ms, template)

        def value_grad(theta):
            m, J = poly.moments_jac(theta)
            Xm = Xi_mat @ m
            return float(m @ Xm) / n, 2.0 * (J.T @ Xm) / n

        def value(theta):
            m, _ = poly.moments_jac(theta)
            return float(m @ (Xi_mat @ m)) / n

    else:

        def value_grad(theta):
            pv = unpack_free(theta, template, design)
            m = evaluate_moments(pv, design, ms).m
            J = moment_jacobian(pv, design, ms)
            Xm = Xi_mat @ m
            return float(m @ Xm) / n, 2.0 * (J.T @ Xm) / n

        def value(theta):
            pv = unpack_free(theta, template, design)
            m = evaluate_moments(pv, design, ms).m
            return float(m @ (Xi_mat @ m)) / n

    start_list = []
    for s in starts or []:
        vec = pack_free(s, design) if isinstance(s, ParamVector) else np.asarray(s, dtype=float)
        start_list.append(vec)
    if algorithm1 and design.panel.P == 1:
        try:
            for c in starting_values(design, ms, template)[:4]:
                start_list.append(_assemble_start(c.lam, c.beta, template, design))
        except (NoStartingValue, SingularProjection) as exc:
            logger.info("gmm_estimate: root-based starts unavailable (%s)", exc)
    if include_tsls_start:
        try:
            delta = tsls_estimate(design, ms, template)
            start_list.append(_assemble_start(delta[: design.panel.P], delta[design.panel.P :], template, design))
        except (np.linalg.LinAlgError, ValueError) as exc:
            logger.info("gmm_estimate: linear-IV start unavailable (%s)", exc)
    if not start_list:
        start_list.append(pack_free(template, design))

    best = None
    for idx, x0 in enumerate(start_list):
        x0 = _project(x0, lo, hi)
        res = optimize.minimize(
            value_grad,
            x0,
            jac=True,
            method="L-BFGS-B",
            bounds=list(zip(lo, hi)),
            options=dict(maxiter=max_iter, ftol=1e-14, gtol=1e-10),
        )
        x, fval, ok, polish_its = _newton_polish(value, value_grad, res.x, lo, hi)
        key = (fval, float(np.linalg.norm(x)), idx)
        entry = (key, x, fval, ok, int(res.nit) + polish_its)
        if best is None or _better(key, best[0]):
            best = entry
    _, x_hat, obj, converged, iters = best

    if not converged:
        msg = f"convergence criterion not met (starts={len(start_list)})"
        if require_convergence:
            raise DidNotConverge(msg)
        logger.warning("gmm_estimate: %s", msg)

    params_hat = unpack_free(x_hat, template, design)
    J = moment_jacobian(params_hat, design, ms)
    G = J / np.sqrt(n)
    V_hat = weight_matrix(ms).V
    Psi = sandwich_psi(G, Xi_mat, V_hat)
    return GmmResult(
        params=params_hat,
        theta_hat=x_hat,
        objective=obj,
        G_hat=G,
        V_hat=V_hat,
        Psi_hat=Psi,
        converged=converged,
        iterations=iters,
        starts=len(start_list),
        n=n,
    )


def _better(a, b) -> bool:
    """Lexicographic with an objective tie tolerance."""
    if a[0] < b[0] - OBJ_TIE_TOL:
        return True
    if a[0] > b[0] + OBJ_TIE_TOL:
        return False
    return (a[1], a[2]) < (b[1], b[2])


def _assemble_start(lam, beta, template: ParamVector, design: ModelDesign) -> np.ndarray:
    vec = np.concatenate([np.atleast_1d(lam), np.atleast_1d(beta), template.rho])
    if design.estimate_factors:
        vec = np.concatenate([vec, template.f[:-1]])
    return vec


def efficient_gmm(
    design: ModelDesign,
    ms: MomentSet,
    template: ParamVector | None = None,
    gamma_hook: Callable[[GmmResult, ModelDesign], tuple] | None = None,
    starts: Sequence | None = None,
    **options,
) -> GmmResult:
    """Two-step GMM: identity weighting, then inverse optimal variance.

    The first step runs at the template's unit scaling profiles; an
    optional gamma_hook(result, design) -> (gamma_sigma, gamma_rho) can
    replace them before the second step (root-n consistency of that
    plug-in is the caller's responsibility). Psi_hat on the returned
    result is (G' V~^{-1} G)^{-1}.
    """
    template = template or default_template(design)
    step1 = gmm_estimate(design, ms, template, Xi=None, starts=starts, **options)
    if gamma_hook is not None:
        gamma_sigma, gamma_rho = gamma_hook(step1, design)
        template = ParamVector(
            lam=template.lam, beta=template.beta, rho=template.rho, f=template.f,
            gamma_sigma=gamma_sigma, gamma_rho=gamma_rho,
        )
    wm = weight_matrix(ms)
    step2 = gmm_estimate(
        design, ms, template, Xi=wm,
        starts=[step1.theta_hat] + list(starts or []),
        **options,
    )
    A = step2.G_hat.T @ wm.V_inv @ step2.G_hat
    Psi = np.linalg.inv(A)
    Psi = (Psi + Psi.T) / 2.0
    return GmmResult(
        params=step2.params,
        theta_hat=step2.theta_hat,
        objective=step2.objective,
        G_hat=step2.G_hat,
        V_hat=wm.V,
        Psi_hat=Psi,
        converged=step2.converged,
        iterations=step2.iterations,
        starts=step2.starts,
        n=step2.n,
        first_step=step1,
    )


# ---------------------------------------------------------------------------
# inference


def sandwich_psi(G: np.ndarray, Xi: np.ndarray, V: np.ndarray) -> np.ndarray:
    """(G'XiG)^{-1} G'Xi V Xi G (G'XiG)^{-1}, symmetrized.

    Collapses to (G'V^{-1}G)^{-1} when Xi = V^{-1}. Invariant to scaling
    Xi by any positive constant.
    """
    G = np.asarray(G, dtype=float)
    if np.linalg.cond(G) > 1e12:
        raise RankDeficientJacobian(f"Jacobian condition {np.linalg.cond(G):.2e} > 1e12")
    A = G.T @ Xi @ G
    B = G.T @ Xi @ V @ Xi @ G
    Psi = np.linalg.solve(A, np.linalg.solve(A, B).T)
    return (Psi + Psi.T) / 2.0


def wald_test(result, R, r) -> WaldOutcome:
    """Test R theta = r against the chi-square reference.

    Accepts any object exposing theta_hat, Psi_hat, and n. The statistic
    is n (R theta - r)' (R Psi R')^{-1} (R theta - r) on dof = rows of R.
    """
    R = np.atleast_2d(np.asarray(R, dtype=float))
    r = np.atleast_1d(np.asarray(r, dtype=float))
    q = R.shape[0]
    if r.shape != (q,):
        raise ValueError(f"r must have length {q}, got shape {r.shape}")
    if np.linalg.matrix_rank(R) < q:
        raise RankDeficientRestriction(f"restriction matrix has rank < {q}")
    diff = R @ np.asarray(result.theta_hat) - r
    S = R @ np.asarray(result.Psi_hat) @ R.T
    try:
        stat = float(result.n * (diff @ np.linalg.solve(S, diff)))
    except np.linalg.LinAlgError as exc:
        raise RankDeficientRestriction("R Psi R' is singular") from exc
    if stat < 0:
        if stat < -1e-8:
            raise RankDeficientRestriction("R Psi R' is not positive definite")
        stat = 0.0
    return WaldOutcome(statistic=stat, dof=q, p_value=float(stats.chi2.sf(stat, q)))


# ---------------------------------------------------------------------------
# comparators


def ols_estimate(design: ModelDesign, params: ParamVector | None = None) -> np.ndarray:
    """Pooled least squares of y+ on W+ across transformed periods."""
    params = params or default_template(design)
    td = transformed_design(design, params)
    X = np.vstack(td.W)
    y = np.concatenate([td.y[:, t] for t in range(td.n_periods)])
    return np.linalg.solve(X.T @ X, X.T @ y)


def tsls_estimate(design: ModelDesign, instruments, params: ParamVector | None = None) -> np.ndarray:
    """Pooled two-stage least squares with per-period instrument blocks."""
    params = params or default_template(design)
    td = transformed_design(design, params)
    H_list = instruments.instruments if isinstance(instruments, MomentSet) else list(instruments)
    if len(H_list) != td.n_periods:
        raise ValueError(f"{len(H_list)} instrument blocks for {td.n_periods} transformed periods")
    d = td.W[0].shape[1]
    A = np.zeros((d, d))
    b = np.zeros(d)
    for t in range(td.n_periods):
        H = np.asarray(H_list[t], dtype=float)
        W = td.W[t]
        y = td.y[:, t]
        What = H @ np.linalg.solve(H.T @ H, H.T @ W)
        A += What.T @ W
        b += What.T @ y
    return np.linalg.solve(A, b)
