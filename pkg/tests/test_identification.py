import logging

import numpy as np
import pytest
from numpy.testing import assert_allclose

from spanel.errors import SingularProjection
from spanel.estimator import default_template
from spanel.identification import (
    IdentificationReport,
    compute_S,
    compute_projectors,
    diagnose,
)
from spanel.moments import ModelDesign, MomentSet, build_quadratic_weights, default_moment_set
from spanel.netsim import McDesign, generate_outcomes, simulate_panel
from spanel.panel import SpatialWeightMatrix

LAGS = (("z", 0, 0, 0), ("z", 0, 1, 0))


def endo_case(n=1000, lam=0.5, delta=0.5, seed=0, T=2):
    mc = McDesign(n=n, T=T, lambda0=lam, delta=delta, seed=seed)
    sim = simulate_panel(mc, 0)
    design = ModelDesign(sim.panel, lag_spec=LAGS)
    ms = default_moment_set(design, default_template(design))
    return design, ms


def group_matrix(n, m):
    """Equal groups, within-group means excluding self."""
    blk = (np.ones((m, m)) - np.eye(m)) / (m - 1)
    return SpatialWeightMatrix(np.kron(np.eye(n // m), blk))


def ring_weight(n):
    ring = np.zeros((n, n))
    for i in range(n):
        ring[i, (i - 1) % n] = 0.5
        ring[i, (i + 1) % n] = 0.5
    return build_quadratic_weights(SpatialWeightMatrix(ring), ["sym"])[0]


def group_case(n=1000, m=5, lam=0.5, delta=0.5, beta1=1.0, seed=3, mixed_weights=False):
    M = group_matrix(n, m)
    mc = McDesign(n=n, T=2, lambda0=lam, delta=delta, beta1=beta1, seed=seed)
    panel = generate_outcomes(M, mc, np.random.default_rng(seed))
    design = ModelDesign(panel, lag_spec=LAGS)
    ms = default_moment_set(design, default_template(design))
    if mixed_weights:
        A_grp = build_quadratic_weights(M, ["sym"])[0]
        ms = MomentSet(instruments=ms.instruments, quad_weights=((A_grp, ring_weight(n)),))
    return design, ms


class TestProjectors:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.n = 60
        self.H = rng.standard_normal((self.n, 4))
        self.Z = rng.standard_normal((self.n, 2))
        self.p_h, self.q_h = compute_projectors(self.H, self.Z)

    def test_annihilates_partialled_columns(self):
        assert_allclose(self.q_h(self.Z), 0.0, atol=1e-10)

    def test_projection_fixed_point(self):
        assert_allclose(self.p_h(self.H[:, 2]), self.H[:, 2], atol=1e-10)

    def test_idempotent(self):
        v = np.random.default_rng(1).standard_normal(self.n)
        assert_allclose(self.p_h(self.p_h(v)), self.p_h(v), atol=1e-10)
        assert_allclose(self.q_h(self.q_h(v)), self.q_h(v), atol=1e-10)

    def test_matrix_argument(self):
        V = np.random.default_rng(2).standard_normal((self.n, 3))
        cols = np.column_stack([self.p_h(V[:, j]) for j in range(3)])
        assert_allclose(self.p_h(V), cols, atol=1e-12)

    def test_pseudo_inverse_fallback_logged(self, caplog):
        H_dup = np.column_stack([self.H, self.H[:, 0]])
        with caplog.at_level(logging.INFO, logger="spanel.identification"):
            p_h, _ = compute_projectors(H_dup, self.Z)
        assert any("pseudo-inverse" in r.message for r in caplog.records)
        assert_allclose(p_h(self.H[:, 0]), self.H[:, 0], atol=1e-10)

    def test_singular_partialling_raises(self):
        # Z orthogonal to the instrument span makes Z'P_H Z singular
        rng = np.random.default_rng(3)
        H = np.eye(10)[:, :3]
        Z = np.zeros((10, 1))
        Z[5:, 0] = rng.standard_normal(5)
        with pytest.raises(SingularProjection):
            compute_projectors(H, Z)

    def test_empty_z_gives_identity_companion(self):
        p_h, q_h = compute_projectors(self.H, np.zeros((self.n, 0)))
        v = np.random.default_rng(4).standard_normal(self.n)
        assert_allclose(q_h(v), v)

    def test_shape_validation(self):
        with pytest.raises(ValueError):
            compute_projectors(self.H, np.zeros((self.n + 1, 2)))


class TestComputeS:
    def test_outcome_in_instrumented_span_gives_zero(self):
        # with Z = [z, Mz] and y = z, both Q_H y and Q_H M y vanish
        rng = np.random.default_rng(5)
        n = 80
        M = group_matrix(n, 4)
        z = rng.standard_normal(n)
        Z = np.column_stack([z, M.dot(z)])
        H = np.column_stack([Z, rng.standard_normal(n)])
        _, q_h = compute_projectors(H, Z)
        A_list = build_quadratic_weights(M, ["sym", "gram"])
        S = compute_S(z, M, A_list, q_h)
        assert S.shape == (2, 2)
        assert_allclose(S, 0.0, atol=1e-10)

    def test_zero_weight_gives_zero_row(self):
        rng = np.random.default_rng(6)
        n = 40
        M = group_matrix(n, 4)
        y = rng.standard_normal(n)
        Z = rng.standard_normal((n, 2))
        _, q_h = compute_projectors(np.column_stack([Z, rng.standard_normal(n)]), Z)
        S = compute_S(y, M, [np.zeros((n, n))], q_h)
        assert_allclose(S, 0.0)

    def test_equal_group_design_ordering(self):
        # within-group means with equal group sizes: M(I-lambda M)^{-1} is
        # affine in M, so the squared-lag instrument prunes away and the
        # linear cross-moment cannot have full column rank; the quadratic
        # matrix S_n keeps rank 2 once the weight list is not all
        # polynomials in M (here: group weight plus an exogenous ring)
        design, ms = group_case(mixed_weights=True)
        report = diagnose(design, ms)
        assert ms.instruments[0].shape[1] == 2  # M^2 z pruned exactly
        assert report.sigma_min_HW == 0.0
        assert report.sigma_min_S > 1e-3
        assert report.sigma_min_HW < report.sigma_min_S
        assert report.verdict == "quadratic_identified"
        assert report.det_StS > 0

    def test_equal_group_polynomial_weights_collapse(self):
        # both default weights are polynomials in the group matrix, making
        # the rows of S_n exactly proportional: rank 1 no matter the data
        design, ms = group_case(mixed_weights=False)
        report = diagnose(design, ms)
        assert report.sigma_min_S < 1e-12
        assert report.verdict == "not_identified"


class TestDiagnose:
    def test_strong_design_linear_identified(self):
        design, ms = endo_case(n=1000, delta=0.5, seed=0)
        report = diagnose(design, ms)
        assert report.verdict == "linear_identified"
        assert report.sigma_min_HW > 1e-2
        assert report.sigma_min_HZ > report.sigma_min_HW

    def test_vanishing_durbin_direction_quadratic_identified(self):
        # beta2 = -lambda * beta1 makes the lag collinear with Z in the
        # limit; finite samples leave a noise floor around 1e-3, so the
        # example pins a threshold above it
        design, ms = endo_case(n=1000, delta=0.0, seed=0)
        report = diagnose(design, ms, tau1=8e-3)
        assert report.verdict == "quadratic_identified"
        assert report.sigma_min_HZ > 8e-3
        assert report.sigma_min_S > report.tau2
        strong, _ = endo_case(n=1000, delta=0.5, seed=0)
        ms_strong = default_moment_set(strong, default_template(strong))
        r_strong = diagnose(strong, ms_strong, tau1=8e-3)
        assert r_strong.verdict == "linear_identified"
        assert report.sigma_min_HW < r_strong.sigma_min_HW / 3

    def test_no_covariate_signal_not_identified(self):
        # beta = 0 with the group design: the lag carries no exogenous
        # signal and the default quadratic weights are collinear
        design, ms = group_case(beta1=0.0, delta=0.0, seed=7)
        report = diagnose(design, ms)
        assert report.verdict == "not_identified"
        assert report.sigma_min_HW == 0.0
        assert report.sigma_min_S < 1e-12

    def test_scale_invariance_of_report(self):
        design, ms = endo_case(n=300, delta=0.5, seed=8)
        scaled = MomentSet(
            instruments=tuple(3.0 * h for h in ms.instruments),
            quad_weights=ms.quad_weights,
        )
        r1 = diagnose(design, ms)
        r2 = diagnose(design, scaled, )
        assert_allclose(r2.S_n, r1.S_n, atol=1e-12 * max(1.0, np.abs(r1.S_n).max()))
        assert_allclose(r2.sigma_min_S, r1.sigma_min_S, atol=1e-12)

    def test_threshold_monotonicity(self):
        rank = {"not_identified": 0, "quadratic_identified": 1, "linear_identified": 2}
        cases = [
            endo_case(n=300, delta=0.5, seed=9),
            endo_case(n=300, delta=0.0, seed=10),
            group_case(n=300, m=5, mixed_weights=True, seed=11),
        ]
        grids = [(1e-6, 1e-6), (1e-4, 1e-4), (1e-3, 1e-2), (1e-2, 1e-3), (0.05, 0.05)]
        for design, ms in cases:
            verdicts = [rank[diagnose(design, ms, tau1=t1, tau2=t2).verdict] for t1, t2 in grids]
            for (t1a, t2a), va in zip(grids, verdicts):
                for (t1b, t2b), vb in zip(grids, verdicts):
                    if t1a <= t1b and t2a <= t2b and va < vb:
                        raise AssertionError(
                            f"loosening ({t1b},{t2b})->({t1a},{t2a}) downgraded {vb}->{va}"
                        )

    def test_multi_period_stacking(self):
        design, ms = endo_case(n=500, delta=0.5, seed=12, T=3)
        report = diagnose(design, ms)
        assert report.S_n.shape == (4, 2)  # two transformed periods, two weights
        assert report.verdict == "linear_identified"

    def test_requires_single_lag_family(self):
        from spanel.panel import PanelData

        design, ms = endo_case(n=100, seed=13)
        old = design.panel
        M_t = list(old.M[0])
        two_fam = PanelData(y=old.y, z=old.z, M=[M_t, M_t])
        assert two_fam.P == 2
        design2 = ModelDesign(two_fam, lag_spec=LAGS)
        ms2 = default_moment_set(design2, default_template(design2), M=old.M[0][0])
        with pytest.raises(ValueError, match="one spatial lag"):
            diagnose(design2, ms2)

    def test_report_validation(self):
        S = np.array([[0.1, 0.2], [0.3, 0.4]])
        common = dict(S_n=S, sigma_min_S=0.05, det_StS=0.001, tau1=1e-4, tau2=1e-4)
        IdentificationReport(sigma_min_HW=0.1, sigma_min_HZ=0.2, verdict="linear_identified", **common)
        with pytest.raises(ValueError, match="inconsistent"):
            IdentificationReport(sigma_min_HW=0.1, sigma_min_HZ=0.2, verdict="not_identified", **common)
        with pytest.raises(ValueError, match="nonnegative"):
            IdentificationReport(sigma_min_HW=-0.1, sigma_min_HZ=0.2, verdict="linear_identified", **common)
        with pytest.raises(ValueError, match="verdict"):
            IdentificationReport(sigma_min_HW=0.1, sigma_min_HZ=0.2, verdict="maybe", **common)

    def test_to_dict_round_trips_json(self):
        import json

        design, ms = endo_case(n=200, seed=14)
        report = diagnose(design, ms)
        blob = json.dumps(report.to_dict())
        back = json.loads(blob)
        assert back["verdict"] == report.verdict
        assert_allclose(np.asarray(back["S_n"]), report.S_n)
