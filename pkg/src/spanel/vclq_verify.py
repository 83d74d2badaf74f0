"""Brute-force verification of the covariance formulas for linear-quadratic forms.

For forward-differenced disturbances u_t+ = sum_s pi_ts u_s and
u_t^x = sum_s gamma_ts u_s built from innovations with
E[u_it^2] = sigma_t^2 rho_i^2, the moments of

    v = u_t+' A u_t^x + a' u_t+

have closed forms:

  mean        (pi Sigma_sigma gamma') tr(A Sigma_rho)
  same-t cov  (pi Sigma_sigma pi')(gamma Sigma_sigma gamma') tr(A Sigma_rho B' Sigma_rho)
              + (pi Sigma_sigma gamma')^2 tr(A Sigma_rho B Sigma_rho)
              + (pi Sigma_sigma pi') a' Sigma_rho b  + K1
  cross-t cov K2

The correction terms K1, K2 vanish when both weight matrices have zero
diagonals and the two weight-row vectors coincide and form rows of a
transformation Pi with Pi Sigma_sigma Pi' = I.  This module computes the
K-free predictions, flags configurations outside that sufficient regime
as incomplete (it never guesses K1 or K2), and provides a batched Monte
Carlo oracle that estimates the same moments empirically, with standard
errors, so the predictions can be checked to statistical accuracy.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import partial
from typing import Sequence

import numpy as np
import pandas as pd

from .errors import OutsideSufficientConditions
from .montecarlo import _parallel_map
from .streams import ORACLE_BATCH_STAGE, ORACLE_CONFIG_STAGE, substream

logger = logging.getLogger(__name__)

ORTHO_TOL = 1e-8

MIN_DRAWS = 10_000

DISTRIBUTIONS = ("normal", "chisq")


def _finite_array(value, name: str, shape: tuple) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.shape != shape:
        raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    return arr


@dataclass(frozen=True)
class LqForm:
    """One linear-quadratic form: weight matrix A, shift vector a, and the
    forward-difference rows pi (for u+) and gamma (for u^x).

    Only finiteness and matching dimensions are required; zero diagonals
    and orthonormal rows are deliberately NOT imposed, because the point
    of the oracle is to exercise both the regime where the correction
    terms vanish and the regime where they do not.
    """

    A: np.ndarray
    a: np.ndarray
    pi_row: np.ndarray
    gamma_row: np.ndarray

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError(f"A must be square, got shape {A.shape}")
        n = A.shape[0]
        object.__setattr__(self, "A", _finite_array(A, "A", (n, n)))
        object.__setattr__(self, "a", _finite_array(self.a, "a", (n,)))
        pi = np.atleast_1d(np.asarray(self.pi_row, dtype=float)).ravel()
        gamma = np.atleast_1d(np.asarray(self.gamma_row, dtype=float)).ravel()
        T = pi.size
        object.__setattr__(self, "pi_row", _finite_array(pi, "pi_row", (T,)))
        object.__setattr__(self, "gamma_row", _finite_array(gamma, "gamma_row", (T,)))

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def T(self) -> int:
        return self.pi_row.size

    def value(self, u: np.ndarray) -> np.ndarray:
        """Evaluate the form on a batch of innovation panels u (draws, n, T)."""
        u = np.asarray(u, dtype=float)
        if u.shape[-2:] != (self.n, self.T):
            raise ValueError(f"u must have trailing shape {(self.n, self.T)}, got {u.shape}")
        u_plus = u @ self.pi_row
        u_cross = u @ self.gamma_row
        return np.einsum("...i,ij,...j->...", u_plus, self.A, u_cross) + u_plus @ self.a


@dataclass(frozen=True)
class InnovationModel:
    """Innovation law for the oracle: u_it = sigma_t rho_i eps_it with
    eps_it i.i.d. standardized draws.

    sigma2 and rho2 are the diagonal VARIANCE vectors (length T and n).
    distribution 'normal' gives symmetric mesokurtic innovations;
    'chisq' gives standardized centered chi-square(df) draws, whose
    nonzero skewness and excess kurtosis exercise the third- and
    fourth-moment terms of the covariance formulas.
    """

    sigma2: np.ndarray
    rho2: np.ndarray
    distribution: str = "normal"
    df: int = 1

    def __post_init__(self):
        sigma2 = np.atleast_1d(np.asarray(self.sigma2, dtype=float)).ravel()
        rho2 = np.atleast_1d(np.asarray(self.rho2, dtype=float)).ravel()
        object.__setattr__(self, "sigma2", _finite_array(sigma2, "sigma2", sigma2.shape))
        object.__setattr__(self, "rho2", _finite_array(rho2, "rho2", rho2.shape))
        if np.any(self.sigma2 <= 0) or np.any(self.rho2 <= 0):
            raise ValueError("variance profiles must be strictly positive")
        if self.distribution not in DISTRIBUTIONS:
            raise ValueError(f"distribution must be one of {DISTRIBUTIONS}")
        if self.df < 1:
            raise ValueError("df must be >= 1")

    @property
    def n(self) -> int:
        return self.rho2.size

    @property
    def T(self) -> int:
        return self.sigma2.size

    def draw(self, rng: np.random.Generator, draws: int) -> np.ndarray:
        """Draw (draws, n, T) innovation panels."""
        shape = (draws, self.n, self.T)
        if self.distribution == "normal":
            eps = rng.standard_normal(shape)
        else:
            eps = (rng.chisquare(self.df, shape) - self.df) / np.sqrt(2.0 * self.df)
        scale = np.sqrt(self.rho2)[:, None] * np.sqrt(self.sigma2)[None, :]
        return eps * scale


# ---------------------------------------------------------------------------
# closed-form predictions


def _check_pair(form1: LqForm, form2: LqForm, sigma2: np.ndarray, rho2: np.ndarray):
    if form1.n != form2.n or form1.T != form2.T:
        raise ValueError(
            f"forms must share dimensions, got ({form1.n},{form1.T}) and ({form2.n},{form2.T})"
        )
    sigma2 = _finite_array(np.atleast_1d(sigma2).ravel(), "Sigma_sigma", (form1.T,))
    rho2 = _finite_array(np.atleast_1d(rho2).ravel(), "Sigma_rho", (form1.n,))
    if np.any(sigma2 <= 0) or np.any(rho2 <= 0):
        raise ValueError("variance profiles must be strictly positive")
    return sigma2, rho2


def _violations(form1: LqForm, form2: LqForm, sigma2: np.ndarray) -> tuple[str, ...]:
    """Which of the sufficient conditions for K1 = K2 = 0 fail."""
    found = []
    for label, form in (("first", form1), ("second", form2)):
        if np.any(np.abs(np.diag(form.A)) > 0):
            found.append(f"{label} form: weight matrix has a nonzero diagonal")
        if not np.allclose(form.pi_row, form.gamma_row, atol=ORTHO_TOL, rtol=0):
            found.append(f"{label} form: pi and gamma rows differ")
        norm = form.pi_row @ (sigma2 * form.pi_row)
        if abs(norm - 1.0) > ORTHO_TOL:
            found.append(f"{label} form: pi Sigma_sigma pi' = {norm:.6g} != 1")
    if not np.array_equal(form1.pi_row, form2.pi_row):
        cross = form1.pi_row @ (sigma2 * form2.pi_row)
        if abs(cross) > ORTHO_TOL:
            found.append(f"rows of the two forms are not Sigma_sigma-orthogonal ({cross:.6g})")
    return tuple(found)


@dataclass(frozen=True)
class PredictedMoments:
    """K-free closed-form moments for a pair of linear-quadratic forms.

    cov_same_t is the prediction when both forms are built on the same
    forward-difference rows (it uses each form's own rows); cov_cross_t
    (always zero) is the prediction when the rows belong to different
    periods.  same_rows says which situation the two forms are in.
    When violations is non-empty the pair sits outside the sufficient
    conditions, the dropped correction terms need not vanish, and the
    predictions are flagged incomplete rather than trusted.
    """

    mean1: float
    mean2: float
    cov_same_t: float
    cov_cross_t: float
    same_rows: bool
    violations: tuple[str, ...]

    @property
    def complete(self) -> bool:
        return not self.violations


def predicted_moments(
    form1: LqForm, form2: LqForm, Sigma_sigma, Sigma_rho, require_complete: bool = False
) -> PredictedMoments:
    """Closed-form mean and covariance predictions with the correction
    terms set to zero.

    The mean formula is exact for fixed (non-random) forms.  The
    covariance entries omit the correction terms K1 and K2, whose
    general expressions are not reproduced here; under the sufficient
    conditions (zero diagonals, pi = gamma, rows orthonormal under
    Sigma_sigma) the omitted terms are exactly zero and the predictions
    are complete.  Otherwise the result carries the list of violated
    conditions; with require_complete=True that case raises instead.
    """
    sigma2, rho2 = _check_pair(form1, form2, Sigma_sigma, Sigma_rho)

    def form_mean(form: LqForm) -> float:
        weight = form.pi_row @ (sigma2 * form.gamma_row)
        return float(weight * (np.diag(form.A) @ rho2))

    pi1_s_pi1 = float(form1.pi_row @ (sigma2 * form1.pi_row))
    g1_s_g1 = float(form1.gamma_row @ (sigma2 * form1.gamma_row))
    pi1_s_g1 = float(form1.pi_row @ (sigma2 * form1.gamma_row))
    # tr(A S B' S) = sum_ij a_ij b_ij rho_i^2 rho_j^2 and
    # tr(A S B S)  = sum_ij a_ij b_ji rho_i^2 rho_j^2 for S = diag(rho^2)
    rho_outer = rho2[:, None] * rho2[None, :]
    cov_same = (
        pi1_s_pi1 * g1_s_g1 * float(np.sum(form1.A * form2.A * rho_outer))
        + pi1_s_g1**2 * float(np.sum(form1.A * form2.A.T * rho_outer))
        + pi1_s_pi1 * float(form1.a @ (rho2 * form2.a))
    )
    violations = _violations(form1, form2, sigma2)
    if violations:
        logger.info("outside the sufficient conditions: %s", "; ".join(violations))
        if require_complete:
            raise OutsideSufficientConditions("; ".join(violations))
    return PredictedMoments(
        mean1=form_mean(form1),
        mean2=form_mean(form2),
        cov_same_t=cov_same,
        cov_cross_t=0.0,
        same_rows=bool(
            np.array_equal(form1.pi_row, form2.pi_row)
            and np.array_equal(form1.gamma_row, form2.gamma_row)
        ),
        violations=violations,
    )


# ---------------------------------------------------------------------------
# the Monte Carlo oracle


@dataclass(frozen=True)
class EmpiricalMoments:
    """Sample moments of a pair of forms with Monte Carlo standard errors.

    cov12 is the sample covariance of the two form values on common
    draws: the same-t covariance when the forms share rows, the cross-t
    covariance when they do not.
    """

    mean1: float
    mean2: float
    cov12: float
    se_mean1: float
    se_mean2: float
    se_cov12: float
    draws: int


def _oracle_batch(batch: int, form1: LqForm, form2: LqForm, model: InnovationModel,
                  seed: int, batch_size: int, total: int) -> tuple[np.ndarray, np.ndarray]:
    start = batch * batch_size
    size = min(batch_size, total - start)
    rng = substream(seed, batch, ORACLE_BATCH_STAGE)
    u = model.draw(rng, size)
    return form1.value(u), form2.value(u)


def simulate_moments(
    form1: LqForm,
    form2: LqForm,
    model: InnovationModel,
    draws: int = 100_000,
    seed: int = 0,
    batch_size: int = 20_000,
    workers: int = 1,
) -> EmpiricalMoments:
    """Estimate the moments of a pair of forms by brute force.

    Draws are generated in batches, each from its own substream keyed by
    (seed, batch index), so the result is identical for every worker
    count.  Reductions use numpy's pairwise summation.
    """
    if draws < MIN_DRAWS:
        raise ValueError(f"draws must be >= {MIN_DRAWS}, got {draws}")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if model.n != form1.n or model.T != form1.T:
        raise ValueError(
            f"innovation model has shape ({model.n},{model.T}), forms need ({form1.n},{form1.T})"
        )
    _check_pair(form1, form2, model.sigma2, model.rho2)
    n_batches = -(-draws // batch_size)
    worker = partial(
        _oracle_batch, form1=form1, form2=form2, model=model,
        seed=seed, batch_size=batch_size, total=draws,
    )
    pieces = _parallel_map(worker, n_batches, workers)
    v1 = np.concatenate([p[0] for p in pieces])
    v2 = np.concatenate([p[1] for p in pieces])
    mean1, mean2 = float(np.mean(v1)), float(np.mean(v2))
    centered = (v1 - mean1) * (v2 - mean2)
    cov12 = float(np.mean(centered))
    root = np.sqrt(draws)
    return EmpiricalMoments(
        mean1=mean1,
        mean2=mean2,
        cov12=cov12,
        se_mean1=float(np.std(v1) / root),
        se_mean2=float(np.std(v2) / root),
        se_cov12=float(np.std(centered) / root),
        draws=draws,
    )


# ---------------------------------------------------------------------------
# randomized verification table


def orthonormal_rows(sigma2: np.ndarray, T_out: int, rng: np.random.Generator) -> np.ndarray:
    """Random (T_out, T) matrix Pi with Pi diag(sigma2) Pi' = I."""
    sigma2 = np.atleast_1d(np.asarray(sigma2, dtype=float)).ravel()
    T = sigma2.size
    if not 1 <= T_out <= T:
        raise ValueError(f"need 1 <= T_out <= {T}, got {T_out}")
    raw = rng.standard_normal((T, T_out))
    q, _ = np.linalg.qr(raw)
    return q.T / np.sqrt(sigma2)[None, :]


def _zero_diag(mat: np.ndarray) -> np.ndarray:
    out = mat.copy()
    np.fill_diagonal(out, 0.0)
    return out


def random_config(rng: np.random.Generator, n: int = 20) -> dict:
    """One randomized test configuration inside the sufficient regime."""
    T = int(rng.integers(2, 5))
    sigma2 = rng.uniform(0.5, 1.5, size=T)
    rho2 = rng.uniform(0.5, 1.5, size=n)
    rows = orthonormal_rows(sigma2, 2, rng)
    A = _zero_diag(rng.standard_normal((n, n)))
    B = _zero_diag(rng.standard_normal((n, n)))
    a = rng.standard_normal(n)
    b = rng.standard_normal(n)
    distribution = "normal" if rng.random() < 0.5 else "chisq"
    df = int(rng.integers(1, 4))
    return {
        "A": A, "B": B, "a": a, "b": b, "rows": rows,
        "model": InnovationModel(sigma2, rho2, distribution=distribution, df=df),
    }


def _config_checks(cfg: dict) -> list[tuple[str, LqForm, LqForm]]:
    """The four (name, form1, form2) comparisons run per configuration."""
    A, B, a, b, rows = cfg["A"], cfg["B"], cfg["a"], cfg["b"], cfg["rows"]
    n = a.size
    zeros_mat, zeros_vec = np.zeros((n, n)), np.zeros(n)
    f1 = LqForm(A, a, rows[0], rows[0])
    f2_same = LqForm(B, b, rows[0], rows[0])
    f2_cross = LqForm(B, b, rows[1], rows[1])
    quad_only = LqForm(A, zeros_vec, rows[0], rows[0])
    lin_only = LqForm(zeros_mat, b, rows[0], rows[0])
    return [
        ("mean", f1, f2_same),
        ("cov_same_t", f1, f2_same),
        ("cov_cross_t", f1, f2_cross),
        ("lin_quad_orthogonality", quad_only, lin_only),
    ]


def verify_configurations(
    configs: int = 20,
    n: int = 20,
    draws: int = 100_000,
    seed: int = 0,
    workers: int = 1,
) -> pd.DataFrame:
    """Check predictions against the oracle on randomized configurations.

    Each configuration is drawn inside the sufficient regime and checked
    on four quantities: the mean of a linear-quadratic form, the same-t
    covariance of two forms, the cross-t covariance of forms on
    orthogonal rows, and the covariance between a pure quadratic and a
    pure linear form.  A row passes when |empirical - predicted| <= 3
    Monte Carlo standard errors.
    """
    if configs < 1:
        raise ValueError("configs must be >= 1")
    records = []
    for c in range(configs):
        rng = substream(seed, c, ORACLE_CONFIG_STAGE)
        cfg = random_config(rng, n=n)
        oracle_seed = int(rng.integers(2**63))
        for name, f1, f2 in _config_checks(cfg):
            pred = predicted_moments(f1, f2, cfg["model"].sigma2, cfg["model"].rho2)
            if not pred.complete:
                raise AssertionError(
                    f"configuration {c} left the sufficient regime: {pred.violations}"
                )
            emp = simulate_moments(
                f1, f2, cfg["model"], draws=draws, seed=oracle_seed, workers=workers
            )
            if name == "mean":
                predicted, empirical, se = pred.mean1, emp.mean1, emp.se_mean1
            else:
                predicted = pred.cov_same_t if pred.same_rows else pred.cov_cross_t
                empirical, se = emp.cov12, emp.se_cov12
            records.append({
                "config": c,
                "quantity": name,
                "distribution": cfg["model"].distribution,
                "predicted": predicted,
                "empirical": empirical,
                "se": se,
                "within_3se": bool(abs(empirical - predicted) <= 3.0 * se),
            })
    table = pd.DataFrame.from_records(records)
    n_fail = int((~table["within_3se"]).sum())
    logger.info(
        "verified %d configurations x 4 quantities: %d outside 3 SE", configs, n_fail
    )
    return table


def trace_zero_pair(n: int = 20, T: int = 3) -> tuple[LqForm, LqForm, InnovationModel]:
    """Constructed example: homoskedastic innovations and weight matrices
    with zero TRACE but nonzero diagonal entries.

    Both forms have mean zero (the mean depends on the trace only), yet
    their cross-period covariance does not vanish once the innovations
    have excess kurtosis — zero trace alone does not buy orthogonality
    across periods, only zero diagonals do.
    """
    if n < 2 or n % 2:
        raise ValueError("n must be even and >= 2")
    if T < 3:
        raise ValueError("need T >= 3 for two orthogonal forward-difference rows")
    sign = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
    A = np.diag(sign)
    sigma2 = np.ones(T)
    rows = np.zeros((2, T))
    rows[0, 0], rows[0, 1] = 1.0 / np.sqrt(2), -1.0 / np.sqrt(2)
    rows[1, :2], rows[1, 2] = 1.0 / np.sqrt(6), -2.0 / np.sqrt(6)
    zeros = np.zeros(n)
    form_t = LqForm(A, zeros, rows[0], rows[0])
    form_s = LqForm(A, zeros, rows[1], rows[1])
    model = InnovationModel(sigma2, np.ones(n), distribution="chisq", df=1)
    return form_t, form_s, model
