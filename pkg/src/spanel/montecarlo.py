"""Replication engine for the simulated link-formation design.

Runs the outcome simulation and the competing estimators (pooled least
squares, pooled linear IV, and GMM with linear and quadratic moments)
over many replications, summarizing the spatial-lag estimates by median
bias and mean absolute error.  A companion experiment records the
rejection rate of the Wald test of the true spatial coefficient.

Every replication is keyed to its own deterministic random substream,
so results are bit-identical for a given master seed regardless of how
the work is split across worker processes.
"""

from __future__ import annotations

import logging
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import partial
from typing import Callable, NamedTuple, Sequence

import numpy as np
import pandas as pd

from .errors import SpanelError
from .estimator import (
    default_template,
    gmm_estimate,
    ols_estimate,
    tsls_estimate,
    wald_test,
)
from .moments import ModelDesign, default_moment_set
from .netsim import McDesign, simulate_panel

logger = logging.getLogger(__name__)

# Regressor layout of the simulated outcome equation: Z_t = [z_t, M z_t].
DURBIN_LAGS = (("z", 0, 0, 0), ("z", 0, 1, 0))

# The replication estimator minimizes the one-step criterion over a wide
# compact box, so occasional extreme-sample solutions land at their full
# criterion minimum instead of being clipped at the stationarity
# boundary; their whole error then flows into the MAE column.
GMM_LAMBDA_BOUNDS = (-10.0, 10.0)

ESTIMATORS = ("ols", "iv", "gmm")

GRID_COLUMNS = (
    "lambda", "delta",
    "ols_bias", "ols_mae", "iv_bias", "iv_mae", "gmm_bias", "gmm_mae",
    "ols_fail", "iv_fail", "gmm_fail",
)


@dataclass(frozen=True)
class McSummary:
    """Replication summary for one estimator's spatial-lag estimates.

    median_bias and mae are computed over successful replications only;
    failed replications (estimator errors or non-convergence) are
    counted in n_fail, never silently dropped.  With no successes both
    summary statistics are NaN.
    """

    estimator: str
    median_bias: float
    mae: float
    n_success: int
    n_fail: int

    def __post_init__(self):
        if self.n_success < 0 or self.n_fail < 0:
            raise ValueError("replication counts must be non-negative")
        if self.n_success == 0:
            if not (np.isnan(self.median_bias) and np.isnan(self.mae)):
                raise ValueError("summaries must be NaN when nothing succeeded")
        elif self.mae < 0:
            raise ValueError(f"mean absolute error must be >= 0, got {self.mae}")

    @property
    def replications(self) -> int:
        return self.n_success + self.n_fail


class RepOutcome(NamedTuple):
    """One estimator's result on one replication."""

    estimate: float
    error: str | None


def summarize(estimator: str, estimates, truth: float, replications: int) -> McSummary:
    """Median bias and mean absolute error of the successful estimates."""
    values = np.asarray(list(estimates), dtype=float)
    if values.size > replications:
        raise ValueError("more estimates than replications")
    if values.size and not np.all(np.isfinite(values)):
        raise ValueError("estimates must be finite; record failures separately")
    if values.size == 0:
        return McSummary(estimator, float("nan"), float("nan"), 0, replications)
    return McSummary(
        estimator=estimator,
        median_bias=float(np.median(values) - truth),
        mae=float(np.mean(np.abs(values - truth))),
        n_success=int(values.size),
        n_fail=int(replications - values.size),
    )


# ---------------------------------------------------------------------------
# per-replication work


def _fit_design(design: McDesign, replication: int) -> tuple[ModelDesign, object]:
    sim = simulate_panel(design, replication)
    fit = ModelDesign(sim.panel, lag_spec=DURBIN_LAGS)
    ms = default_moment_set(fit, default_template(fit))
    return fit, ms


def estimate_replication(
    design: McDesign, replication: int, estimators: Sequence[str] = ESTIMATORS
) -> dict[str, RepOutcome]:
    """Simulate one panel and run the requested estimators on it.

    Raw estimates are kept however extreme; a replication is a failure
    for an estimator only when it raises or does not converge.
    """
    out: dict[str, RepOutcome] = {}
    try:
        fit, ms = _fit_design(design, replication)
    except SpanelError as exc:
        reason = f"simulation failed: {exc}"
        return {name: RepOutcome(float("nan"), reason) for name in estimators}
    for name in estimators:
        try:
            if name == "ols":
                lam = float(ols_estimate(fit)[0])
            elif name == "iv":
                lam = float(tsls_estimate(fit, ms)[0])
            elif name == "gmm":
                res = gmm_estimate(fit, ms, lambda_bounds=GMM_LAMBDA_BOUNDS)
                if not res.converged:
                    out[name] = RepOutcome(float("nan"), "did not converge")
                    continue
                lam = float(res.theta_hat[0])
            else:
                raise ValueError(f"unknown estimator {name!r}")
            if not np.isfinite(lam):
                out[name] = RepOutcome(float("nan"), "non-finite estimate")
            else:
                out[name] = RepOutcome(lam, None)
        except (SpanelError, np.linalg.LinAlgError) as exc:
            out[name] = RepOutcome(float("nan"), str(exc))
    return out


def _wald_replication(design: McDesign, replication: int) -> RepOutcome:
    """P-value of the Wald test of the true spatial coefficient."""
    try:
        fit, ms = _fit_design(design, replication)
        res = gmm_estimate(fit, ms, lambda_bounds=GMM_LAMBDA_BOUNDS)
        if not res.converged:
            return RepOutcome(float("nan"), "did not converge")
        R = np.zeros((1, res.theta_hat.size))
        R[0, 0] = 1.0
        return RepOutcome(wald_test(res, R, [design.lambda0]).p_value, None)
    except (SpanelError, np.linalg.LinAlgError) as exc:
        return RepOutcome(float("nan"), str(exc))


# ---------------------------------------------------------------------------
# parallel map over replications


def _parallel_map(worker: Callable[[int], object], replications: int, workers: int) -> list:
    """Apply worker to 0..replications-1, preserving replication order.

    Each replication draws from substreams keyed only by (seed,
    replication), so the result list — and everything reduced from it —
    is identical for every worker count.
    """
    reps = range(replications)
    if workers <= 1:
        return [worker(r) for r in reps]
    ctx = multiprocessing.get_context("fork")
    chunk = max(1, replications // (workers * 8))
    with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
        return list(pool.map(worker, reps, chunksize=chunk))


def run_design(
    design: McDesign,
    estimators: Sequence[str] = ESTIMATORS,
    replications: int | None = None,
    workers: int = 1,
) -> dict[str, McSummary]:
    """Replicate a design and summarize each estimator's spatial-lag estimates."""
    estimators = tuple(estimators)
    unknown = set(estimators) - set(ESTIMATORS)
    if unknown:
        raise ValueError(f"unknown estimators: {sorted(unknown)}")
    reps = design.replications if replications is None else int(replications)
    if reps < 1:
        raise ValueError("replications must be >= 1")
    worker = partial(estimate_replication, design, estimators=estimators)
    results = _parallel_map(worker, reps, workers)
    summaries: dict[str, McSummary] = {}
    for name in estimators:
        outcomes = [res[name] for res in results]
        for rep, oc in enumerate(outcomes):
            if oc.error is not None:
                logger.debug("replication %d, %s failed: %s", rep, name, oc.error)
        values = [oc.estimate for oc in outcomes if oc.error is None]
        summaries[name] = summarize(name, values, design.lambda0, reps)
        if summaries[name].n_fail:
            logger.warning(
                "%s failed on %d of %d replications", name, summaries[name].n_fail, reps
            )
    logger.info(
        "design n=%d lambda=%.3g delta=%.3g: %s",
        design.n, design.lambda0, design.delta,
        {k: (round(v.median_bias, 4), round(v.mae, 4)) for k, v in summaries.items()},
    )
    return summaries


def coverage_experiment(
    design: McDesign,
    level: float = 0.05,
    replications: int | None = None,
    workers: int = 1,
) -> float:
    """Rejection rate of the nominal-level Wald test of the true coefficient.

    Returns rejections divided by the number of replications that
    produced a test; failed replications are logged and excluded.
    """
    if not 0.0 <= level <= 1.0:
        raise ValueError(f"level must be in [0, 1], got {level}")
    reps = design.replications if replications is None else int(replications)
    if reps < 1:
        raise ValueError("replications must be >= 1")
    worker = partial(_wald_replication, design)
    results = _parallel_map(worker, reps, workers)
    p_values = np.array([oc.estimate for oc in results if oc.error is None])
    n_fail = reps - p_values.size
    if n_fail:
        logger.warning("Wald experiment failed on %d of %d replications", n_fail, reps)
    if p_values.size == 0:
        raise SpanelError("every replication of the Wald experiment failed")
    rate = float(np.mean(p_values < level))
    logger.info(
        "Wald rejection rate %.4f at level %.3g (%d replications, %d failures)",
        rate, level, p_values.size, n_fail,
    )
    return rate


# ---------------------------------------------------------------------------
# the summary table


def run_grid(
    lambdas: Sequence[float] = (0.1, 0.5, 0.7),
    deltas: Sequence[float] = (0.5, 0.3, 0.1),
    n: int = 100,
    T: int = 2,
    replications: int = 1000,
    seed: int = 0,
    workers: int = 1,
) -> pd.DataFrame:
    """Bias/MAE table over a (lambda, delta) grid, one row per cell.

    All cells share the master seed; replication r of every cell uses
    the same substreams, so cells differ only through the design
    parameters (common random numbers).
    """
    rows = []
    for lam in lambdas:
        for delta in deltas:
            design = McDesign(
                n=n, T=T, lambda0=lam, delta=delta, seed=seed, replications=replications
            )
            summaries = run_design(design, ESTIMATORS, workers=workers)
            row = {"lambda": lam, "delta": delta}
            for name in ESTIMATORS:
                s = summaries[name]
                row[f"{name}_bias"] = s.median_bias
                row[f"{name}_mae"] = s.mae
                row[f"{name}_fail"] = s.n_fail
            rows.append(row)
    return pd.DataFrame(rows, columns=list(GRID_COLUMNS))


def grid_csv(table: pd.DataFrame) -> str:
    """Serialize a grid table deterministically (canonical column order)."""
    missing = [c for c in GRID_COLUMNS if c not in table.columns]
    if missing:
        raise ValueError(f"grid table is missing columns: {missing}")
    return table.loc[:, list(GRID_COLUMNS)].to_csv(index=False, lineterminator="\n")
