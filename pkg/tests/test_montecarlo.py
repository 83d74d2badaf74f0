import logging
import statistics

import numpy as np
import pytest

import spanel.estimator as est
from spanel.errors import SpanelError
from spanel.estimator import ols_estimate
from spanel.moments import ModelDesign
from spanel.montecarlo import (
    DURBIN_LAGS,
    ESTIMATORS,
    GRID_COLUMNS,
    McSummary,
    RepOutcome,
    coverage_experiment,
    estimate_replication,
    grid_csv,
    run_design,
    run_grid,
    summarize,
)
from spanel.netsim import McDesign, simulate_panel


def small_design(n=60, lam=0.5, delta=0.5, seed=7, replications=12, T=2):
    return McDesign(n=n, T=T, lambda0=lam, delta=delta, seed=seed, replications=replications)


class TestSummarize:
    def test_known_values(self):
        s = summarize("gmm", [0.9, 1.0, 1.2], truth=1.0, replications=3)
        assert s.median_bias == 0.0
        assert s.mae == pytest.approx(0.1, abs=1e-15)
        assert s.n_success == 3 and s.n_fail == 0

    def test_matches_independent_reference(self):
        rng = np.random.default_rng(0)
        values = rng.standard_normal(1000) * 3.0 + 0.4
        s = summarize("ols", values, truth=0.4, replications=1200)
        med = statistics.median(values.tolist())
        mae = sum(abs(v - 0.4) for v in values.tolist()) / len(values)
        assert s.median_bias == pytest.approx(med - 0.4, rel=1e-12)
        assert s.mae == pytest.approx(mae, rel=1e-12)
        assert s.n_fail == 200
        assert s.replications == 1200

    def test_empty_gives_nan(self):
        s = summarize("iv", [], truth=0.0, replications=5)
        assert np.isnan(s.median_bias) and np.isnan(s.mae)
        assert s.n_success == 0 and s.n_fail == 5

    def test_too_many_estimates_rejected(self):
        with pytest.raises(ValueError, match="more estimates"):
            summarize("gmm", [0.1, 0.2], truth=0.0, replications=1)

    def test_non_finite_estimates_rejected(self):
        with pytest.raises(ValueError, match="finite"):
            summarize("gmm", [0.1, np.inf], truth=0.0, replications=4)

    def test_summary_validation(self):
        with pytest.raises(ValueError, match="non-negative"):
            McSummary("gmm", 0.0, 0.1, n_success=-1, n_fail=0)
        with pytest.raises(ValueError, match=">= 0"):
            McSummary("gmm", 0.0, -0.1, n_success=3, n_fail=0)
        with pytest.raises(ValueError, match="NaN"):
            McSummary("gmm", 0.0, 0.1, n_success=0, n_fail=3)


class TestEstimateReplication:
    def test_all_estimators_succeed(self):
        out = estimate_replication(small_design(n=100), 0)
        assert set(out) == set(ESTIMATORS)
        for oc in out.values():
            assert oc.error is None and np.isfinite(oc.estimate)

    def test_deterministic(self):
        d = small_design()
        assert estimate_replication(d, 3) == estimate_replication(d, 3)

    def test_ols_matches_direct_call(self):
        d = small_design(n=80)
        sim = simulate_panel(d, 2)
        fit = ModelDesign(sim.panel, lag_spec=DURBIN_LAGS)
        direct = float(ols_estimate(fit)[0])
        assert estimate_replication(d, 2, ["ols"])["ols"].estimate == direct

    def test_unknown_estimator(self):
        with pytest.raises(ValueError, match="unknown estimator"):
            estimate_replication(small_design(), 0, ["ols", "mle"])

    def test_non_convergence_is_a_failure(self, monkeypatch):
        monkeypatch.setattr(est, "GRAD_TOL", -1.0)
        out = estimate_replication(small_design(), 0)
        assert out["gmm"].error == "did not converge"
        assert np.isnan(out["gmm"].estimate)
        assert out["ols"].error is None


class TestRunDesign:
    def test_counts_add_up(self):
        d = small_design(replications=10)
        summaries = run_design(d)
        for name in ESTIMATORS:
            assert summaries[name].replications == 10

    def test_failures_counted_and_logged(self, monkeypatch, caplog):
        monkeypatch.setattr(est, "GRAD_TOL", -1.0)
        d = small_design(replications=4)
        with caplog.at_level(logging.WARNING, logger="spanel.montecarlo"):
            summaries = run_design(d)
        g = summaries["gmm"]
        assert g.n_fail == 4 and g.n_success == 0
        assert np.isnan(g.mae)
        assert summaries["ols"].n_fail == 0
        assert any("gmm failed on 4 of 4" in rec.message for rec in caplog.records)

    def test_estimator_subset_and_override(self):
        d = small_design(replications=10)
        summaries = run_design(d, estimators=("ols",), replications=3)
        assert set(summaries) == {"ols"}
        assert summaries["ols"].replications == 3

    def test_bad_arguments(self):
        with pytest.raises(ValueError, match="unknown estimators"):
            run_design(small_design(), estimators=("ols", "mle"))
        with pytest.raises(ValueError, match="replications"):
            run_design(small_design(), replications=0)

    def test_gmm_beats_ols_here(self):
        summaries = run_design(small_design(n=100, replications=60))
        assert summaries["gmm"].mae < summaries["ols"].mae
        assert abs(summaries["gmm"].median_bias) < abs(summaries["ols"].median_bias)

    def test_worker_counts_agree(self):
        d = small_design(replications=8)
        assert run_design(d, workers=1) == run_design(d, workers=3)


class TestCoverageExperiment:
    def test_degenerate_levels(self):
        d = small_design(replications=8)
        assert coverage_experiment(d, level=0.0) == 0.0
        assert coverage_experiment(d, level=1.0) == 1.0

    def test_level_validated(self):
        with pytest.raises(ValueError, match="level"):
            coverage_experiment(small_design(), level=1.5)

    def test_rate_in_unit_interval(self):
        rate = coverage_experiment(small_design(replications=10), level=0.2)
        assert 0.0 <= rate <= 1.0

    def test_worker_counts_agree(self):
        d = small_design(replications=8)
        assert coverage_experiment(d, 0.3, workers=1) == coverage_experiment(d, 0.3, workers=2)

    def test_all_failures_raise(self, monkeypatch):
        monkeypatch.setattr(est, "GRAD_TOL", -1.0)
        with pytest.raises(SpanelError, match="every replication"):
            coverage_experiment(small_design(replications=3))


class TestRunGrid:
    def test_schema_and_ordering(self):
        table = run_grid(lambdas=(0.1, 0.5), deltas=(0.5, 0.1), n=40, replications=3, seed=1)
        assert tuple(table.columns) == GRID_COLUMNS
        assert len(table) == 4
        cells = list(zip(table["lambda"], table["delta"]))
        assert cells == [(0.1, 0.5), (0.1, 0.1), (0.5, 0.5), (0.5, 0.1)]

    def test_matches_run_design_cell(self):
        table = run_grid(lambdas=(0.5,), deltas=(0.5,), n=50, replications=5, seed=9)
        design = McDesign(n=50, T=2, lambda0=0.5, delta=0.5, seed=9, replications=5)
        summaries = run_design(design)
        row = table.iloc[0]
        assert row["gmm_bias"] == summaries["gmm"].median_bias
        assert row["gmm_mae"] == summaries["gmm"].mae
        assert row["iv_fail"] == summaries["iv"].n_fail

    def test_csv_identical_across_worker_counts(self):
        kwargs = dict(lambdas=(0.1, 0.7), deltas=(0.3,), n=40, replications=6, seed=11)
        csv1 = grid_csv(run_grid(workers=1, **kwargs))
        csv2 = grid_csv(run_grid(workers=2, **kwargs))
        assert csv1 == csv2
        header = csv1.splitlines()[0]
        assert header == ",".join(GRID_COLUMNS)

    def test_grid_csv_requires_columns(self):
        table = run_grid(lambdas=(0.1,), deltas=(0.5,), n=40, replications=2, seed=0)
        with pytest.raises(ValueError, match="missing columns"):
            grid_csv(table.drop(columns=["iv_mae"]))
