"""End-to-end acceptance gate.

Each test covers one acceptance criterion, accumulates every sub-check,
prints exactly one summary line ("ACCEPTANCE CRITERION k: PASS|FAIL"),
and only then asserts.  The replication fixtures are module-scoped
because they dominate the runtime (roughly ten minutes on one core for
the full module).
"""

import numpy as np
import pytest

from spanel.estimator import (
    default_template,
    efficient_gmm,
    gmm_estimate,
    tsls_estimate,
)
from spanel.identification import diagnose
from spanel.moments import (
    ModelDesign,
    MomentSet,
    build_quadratic_weights,
    default_moment_set,
    evaluate_moments,
    moment_jacobian,
    weight_matrix,
)
from spanel.montecarlo import coverage_experiment, grid_csv, run_grid
from spanel.netsim import McDesign, generate_outcomes, row_normalize, simulate_panel
from spanel.panel import PanelData, ParamVector, SpatialWeightMatrix
from spanel.transform import helmert_weights, multi_factor_weights
from spanel.vclq_verify import simulate_moments, trace_zero_pair, verify_configurations

LAGS = (("z", 0, 0, 0), ("z", 0, 1, 0))

# Benchmark values for the replication design, per (lambda, delta) cell:
# OLS median bias and GMM mean absolute error at n = 100.
BENCHMARK_N100 = {
    (0.1, 0.5): (0.058, 0.142),
    (0.1, 0.3): (0.056, 0.142),
    (0.1, 0.1): (0.065, 0.142),
    (0.5, 0.5): (0.276, 0.120),
    (0.5, 0.3): (0.290, 0.118),
    (0.5, 0.1): (0.299, 0.116),
    (0.7, 0.5): (0.258, 0.122),
    (0.7, 0.3): (0.276, 0.113),
    (0.7, 0.1): (0.285, 0.111),
}
# At n = 1000 the benchmark GMM MAE is constant within each lambda row.
BENCHMARK_GMM_MAE_N1000 = {0.1: 0.045, 0.5: 0.036, 0.7: 0.027}


def finish(criterion, failures):
    status = "FAIL" if failures else "PASS"
    print(f"ACCEPTANCE CRITERION {criterion}: {status}")
    assert not failures, f"criterion {criterion}: " + "; ".join(failures)


def check(failures, ok, message):
    if not ok:
        failures.append(message)


def by_cell(table):
    return {
        (round(row["lambda"], 3), round(row["delta"], 3)): row
        for _, row in table.iterrows()
    }


@pytest.fixture(scope="module")
def table1_n100():
    return run_grid(n=100, T=2, replications=1000, seed=0, workers=1)


@pytest.fixture(scope="module")
def table1_n1000():
    return run_grid(n=1000, T=2, replications=500, seed=0, workers=1)


@pytest.fixture(scope="module")
def coverage_rate():
    design = McDesign(n=1000, T=3, lambda0=0.5, delta=0.5, seed=0)
    return coverage_experiment(design, level=0.05, replications=2000, workers=1)


def test_criterion_1_small_sample_grid(table1_n100):
    failures = []
    cells = by_cell(table1_n100)
    for key, (ols_bias_ref, gmm_mae_ref) in BENCHMARK_N100.items():
        row = cells[key]
        check(
            failures,
            abs(row["gmm_bias"]) <= 0.02,
            f"{key}: |GMM median bias| {abs(row['gmm_bias']):.4f} > 0.02",
        )
        check(
            failures,
            0.8 * gmm_mae_ref <= row["gmm_mae"] <= 1.2 * gmm_mae_ref,
            f"{key}: GMM MAE {row['gmm_mae']:.4f} outside 20% of {gmm_mae_ref}",
        )
        check(
            failures,
            abs(row["ols_bias"] - ols_bias_ref) <= 0.05,
            f"{key}: OLS bias {row['ols_bias']:.4f} not within 0.05 of {ols_bias_ref}",
        )
    finish(1, failures)


def test_criterion_2_large_sample_grid(table1_n1000):
    failures = []
    cells = by_cell(table1_n1000)
    for (lam, delta), row in cells.items():
        ref = BENCHMARK_GMM_MAE_N1000[lam]
        check(
            failures,
            0.8 * ref <= row["gmm_mae"] <= 1.2 * ref,
            f"({lam}, {delta}): GMM MAE {row['gmm_mae']:.4f} outside 20% of {ref}",
        )
        if delta == 0.1:
            check(
                failures,
                row["iv_mae"] >= 10.0 * row["gmm_mae"],
                f"({lam}, {delta}): IV MAE {row['iv_mae']:.3f} < 10x GMM MAE"
                f" {row['gmm_mae']:.4f}",
            )
        if lam == 0.5:
            check(
                failures,
                0.28 <= row["ols_bias"] <= 0.35,
                f"({lam}, {delta}): OLS bias {row['ols_bias']:.4f} outside [0.28, 0.35]",
            )
    finish(2, failures)


def test_criterion_3_transform_property_suite():
    failures = []
    rng = np.random.default_rng(0)
    worst_ann = worst_orth = 0.0
    for _ in range(1000):
        T = int(rng.integers(2, 11))
        f = rng.standard_normal(T)
        sigma2 = rng.uniform(0.3, 3.0, T)
        ht = helmert_weights(f, sigma2)
        worst_ann = max(worst_ann, np.max(np.abs(ht.pi @ ht.f)))
        gram = ht.pi @ np.diag(sigma2) @ ht.pi.T - np.eye(T - 1)
        worst_orth = max(worst_orth, np.max(np.abs(gram)))
    check(failures, worst_ann <= 1e-12, f"factor annihilation max {worst_ann:.2e}")
    check(failures, worst_orth <= 1e-12, f"orthonormality max {worst_orth:.2e}")

    for T in range(2, 7):
        pi = np.zeros((T - 1, T))
        for t in range(1, T):
            lead = np.sqrt((T - t) / (T - t + 1))
            pi[t - 1, t - 1] = lead
            pi[t - 1, t:] = -lead / (T - t)
        ht = helmert_weights(np.ones(T), np.ones(T))
        check(
            failures,
            np.array_equal(ht.pi, pi),
            f"T={T}: unit-loading weights differ from the closed form",
        )

    for _ in range(300):
        P = int(rng.integers(1, 4))
        T = int(rng.integers(P + 1, 11))
        F = rng.standard_normal((T, P))
        sigma2 = rng.uniform(0.3, 3.0, T)
        ht = multi_factor_weights(F, sigma2)
        ann = np.max(np.abs(ht.pi @ F))
        gram = ht.pi @ np.diag(sigma2) @ ht.pi.T - np.eye(T - P)
        check(failures, ann <= 1e-12, f"P={P}, T={T}: factor residual {ann:.2e}")
        check(
            failures,
            np.max(np.abs(gram)) <= 1e-12,
            f"P={P}, T={T}: orthonormality residual {np.max(np.abs(gram)):.2e}",
        )
    finish(3, failures)


def test_criterion_4_covariance_formula_oracle():
    failures = []
    table = verify_configurations(configs=20, n=20, draws=100_000, seed=4, workers=1)
    check(failures, len(table) == 80, f"expected 80 comparison rows, got {len(table)}")
    for _, row in table[~table["within_3se"]].iterrows():
        failures.append(
            f"config {row['config']} {row['quantity']}: predicted {row['predicted']:.4f}"
            f" vs empirical {row['empirical']:.4f} (se {row['se']:.4f})"
        )

    form1, form2, model = trace_zero_pair(n=20, T=3)
    emp = simulate_moments(form1, form2, model, draws=100_000, seed=0)
    check(
        failures,
        abs(emp.cov12) > 3.0 * emp.se_cov12,
        f"trace-zero example: cross-period covariance {emp.cov12:.3f} within"
        f" 3 SE ({emp.se_cov12:.3f}) of zero",
    )
    finish(4, failures)


def test_criterion_5_identification_verdicts():
    failures = []
    n, m = 1000, 5
    blk = (np.ones((m, m)) - np.eye(m)) / (m - 1)
    M = SpatialWeightMatrix(np.kron(np.eye(n // m), blk))
    mc = McDesign(n=n, T=2, lambda0=0.5, delta=0.5, seed=3)
    panel = generate_outcomes(M, mc, np.random.default_rng(3))
    design = ModelDesign(panel, lag_spec=LAGS)
    ms = default_moment_set(design, default_template(design))
    ring = np.zeros((n, n))
    for i in range(n):
        ring[i, (i - 1) % n] = 0.5
        ring[i, (i + 1) % n] = 0.5
    A_grp = build_quadratic_weights(M, ["sym"])[0]
    A_ring = build_quadratic_weights(SpatialWeightMatrix(ring), ["sym"])[0]
    ms = MomentSet(instruments=ms.instruments, quad_weights=((A_grp, A_ring),))
    report = diagnose(design, ms)
    check(
        failures,
        report.sigma_min_HW < report.tau1,
        f"equal groups: sigma_min(H'W+) {report.sigma_min_HW:.2e} not below"
        f" tau1 {report.tau1:.0e}",
    )
    check(
        failures,
        report.sigma_min_S > report.tau2,
        f"equal groups: sigma_min(S_n) {report.sigma_min_S:.2e} not above"
        f" tau2 {report.tau2:.0e}",
    )
    check(
        failures,
        report.verdict == "quadratic_identified",
        f"equal groups: verdict {report.verdict!r}",
    )

    sim = simulate_panel(McDesign(n=1000, T=2, lambda0=0.5, delta=0.5, seed=0), 0)
    endo = ModelDesign(sim.panel, lag_spec=LAGS)
    report2 = diagnose(endo, default_moment_set(endo, default_template(endo)))
    check(
        failures,
        report2.verdict == "linear_identified",
        f"link-formation design: verdict {report2.verdict!r}",
    )
    finish(5, failures)


def test_criterion_6_wald_coverage(coverage_rate):
    failures = []
    check(
        failures,
        0.035 <= coverage_rate <= 0.065,
        f"rejection rate {coverage_rate:.4f} outside [0.035, 0.065]",
    )
    finish(6, failures)


def random_weight(n, seed, density=0.4):
    rng = np.random.default_rng(seed)
    D = (rng.random((n, n)) < density).astype(float)
    np.fill_diagonal(D, 0.0)
    D[D.sum(axis=1) == 0, 0] = 1.0
    np.fill_diagonal(D, 0.0)
    return row_normalize(D)


def test_criterion_7_gradient_and_structure():
    failures = []
    rng = np.random.default_rng(17)
    n, T = 24, 3
    panel = PanelData(
        y=rng.standard_normal((n, T)),
        z=rng.standard_normal((n, 2, T)),
        M=random_weight(n, 18),
        M_err=random_weight(n, 19),
    )
    design = ModelDesign(panel, lag_spec=[("z", 0, 0), ("z", 1, 1)])
    f = np.array([0.7, 1.4, 1.0])
    gs = np.array([1.3, 0.8, 1.0])

    def point():
        return ParamVector(
            lam=rng.uniform(-0.5, 0.5, 1),
            beta=rng.standard_normal(2),
            rho=rng.uniform(-0.4, 0.4, 1),
            f=f,
            gamma_sigma=gs,
            gamma_rho=rng.uniform(0.5, 2.0, n),
        )

    def fd_jacobian(params, ms, step=2e-6):
        free = [("lam", 0), ("beta", 0), ("beta", 1), ("rho", 0)]
        m0 = evaluate_moments(params, design, ms).m
        J = np.zeros((m0.size, len(free)))
        for j, (name, i) in enumerate(free):
            vec = np.array(getattr(params, name), dtype=float)
            h = step * max(1.0, abs(vec[i]))
            up, dn = vec.copy(), vec.copy()
            up[i] += h
            dn[i] -= h
            kw = dict(
                lam=params.lam, beta=params.beta, rho=params.rho, f=params.f,
                gamma_sigma=params.gamma_sigma, gamma_rho=params.gamma_rho,
            )
            m_up = evaluate_moments(ParamVector(**{**kw, name: up}), design, ms).m
            m_dn = evaluate_moments(ParamVector(**{**kw, name: dn}), design, ms).m
            J[:, j] = (m_up - m_dn) / (2 * h)
        return J

    worst = 0.0
    for _ in range(20):
        params = point()
        ms = default_moment_set(design, params)
        J = moment_jacobian(params, design, ms)
        err = np.abs(J - fd_jacobian(params, ms)) / (1.0 + np.abs(fd_jacobian(params, ms)))
        worst = max(worst, err.max())
    check(failures, worst < 1e-6, f"Jacobian vs central differences: max rel err {worst:.2e}")

    # The moment vector is a quadratic polynomial along any direction that
    # moves (lambda, beta) at fixed rho, and along any direction in rho at
    # fixed (lambda, beta): fit the quadratic from three points, verify at
    # a fourth.
    base = point()
    ms = default_moment_set(design, base)
    directions = [
        (rng.standard_normal(1), rng.standard_normal(2), np.zeros(1)),
        (np.zeros(1), np.zeros(2), rng.standard_normal(1)),
    ]
    for d_lam, d_beta, d_rho in directions:
        def at(c):
            pv = ParamVector(
                lam=base.lam + c * d_lam, beta=base.beta + c * d_beta,
                rho=base.rho + c * d_rho, f=f, gamma_sigma=gs,
                gamma_rho=base.gamma_rho,
            )
            return evaluate_moments(pv, design, ms).m

        m0, m1, m2 = at(0.0), at(1.0), at(-1.0)
        a0, a1, a2 = m0, (m1 - m2) / 2, (m1 + m2) / 2 - m0
        c = 1.7
        dev = np.max(np.abs(a0 + a1 * c + a2 * c * c - at(c)))
        check(failures, dev <= 1e-10, f"four-point interpolation residual {dev:.2e}")

    # No spatial error term: every free direction is a (lambda, beta)
    # direction and the whole parameter is covered jointly.
    flat = PanelData(
        y=panel.y, z=panel.z, M=panel.M,
    )
    flat_design = ModelDesign(flat, lag_spec=[("z", 0, 0), ("z", 1, 1)])
    base_flat = ParamVector(
        lam=[0.2], beta=[0.8, -0.3], rho=[], f=f, gamma_sigma=gs,
    )
    ms_flat = default_moment_set(flat_design, base_flat)
    d_lam, d_beta = rng.standard_normal(1), rng.standard_normal(2)

    def at_flat(c):
        pv = ParamVector(
            lam=base_flat.lam + c * d_lam, beta=base_flat.beta + c * d_beta,
            rho=[], f=f, gamma_sigma=gs,
        )
        return evaluate_moments(pv, flat_design, ms_flat).m

    m0, m1, m2 = at_flat(0.0), at_flat(1.0), at_flat(-1.0)
    a0, a1, a2 = m0, (m1 - m2) / 2, (m1 + m2) / 2 - m0
    dev = np.max(np.abs(a0 + a1 * 0.6 + a2 * 0.36 - at_flat(0.6)))
    check(failures, dev <= 1e-10, f"joint-direction interpolation residual {dev:.2e}")

    # Pure regression design (no outcome lag, no error weights) with only
    # linear moments: the GMM minimizer has the closed two-stage form.
    rng2 = np.random.default_rng(23)
    n2 = 90
    z2 = rng2.standard_normal((n2, 2, 2))
    y2 = z2[:, 0, :] * 1.2 - z2[:, 1, :] * 0.7 + 0.3 * rng2.standard_normal((n2, 2))
    lin_panel = PanelData(y=y2, z=z2)
    lin_design = ModelDesign(lin_panel, lag_spec=[("z", 0, 0), ("z", 1, 0)])
    H = np.column_stack([z2[:, 0, 0], z2[:, 1, 0], z2[:, 0, 1] * z2[:, 1, 1]])
    lin_ms = MomentSet(instruments=(H,), quad_weights=((),))
    res = gmm_estimate(lin_design, lin_ms, Xi=weight_matrix(lin_ms))
    closed = tsls_estimate(lin_design, lin_ms)
    gap = np.max(np.abs(res.theta_hat - closed))
    check(failures, res.converged, "linear-only fit did not converge")
    check(failures, gap <= 1e-8, f"iterative vs closed-form two-stage gap {gap:.2e}")
    finish(7, failures)


def test_criterion_8_worker_count_determinism():
    failures = []
    tables = {
        workers: grid_csv(
            run_grid(
                lambdas=(0.1, 0.7), deltas=(0.5, 0.1), n=60, T=2,
                replications=30, seed=9, workers=workers,
            )
        )
        for workers in (1, 2, 3)
    }
    check(
        failures,
        tables[1] == tables[2] == tables[3],
        "summary CSV bytes differ across worker counts",
    )
    finish(8, failures)
