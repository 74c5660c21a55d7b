import math

import numpy as np
import pytest

from lastexit.efficiency import (
    BandwidthProblem,
    BandwidthTarget,
    SandwichSpec,
    abs_normal_moment,
    abs_normal_moment_closed,
    are_scalar,
    are_trace,
    bandwidth_argmin,
    bandwidth_paper_objective,
    derivative_bandwidth_argmin,
    derivative_objective,
    eq_chisq_excess,
    eq_trace,
    golden_argmin,
    is_unimodal,
    mse_objective,
    normal_model_sandwich,
    sandwich,
    skewness_limit_var,
)
from lastexit.experiments import exit_task
from lastexit.mc_engine import ExperimentPlan, run_replications


class TestScalarAre:
    def test_equal_variances(self):
        assert are_scalar(1.7, 1.7) == 1.0

    def test_ratio(self):
        assert are_scalar(2.0, 1.0) == 2.0

    def test_mean_vs_median_at_normal(self):
        assert are_scalar(1.0, math.pi / 2) == pytest.approx(2 / math.pi)
        assert round(are_scalar(1.0, math.pi / 2), 4) == 0.6366

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            are_scalar(0.0, 1.0)


class TestTraces:
    def test_identity(self):
        assert eq_trace(np.eye(3), np.eye(3)) == 3.0
        assert are_trace(np.eye(2), np.eye(2), np.eye(2)) == 1.0

    def test_doubled_covariance(self):
        assert are_trace(np.eye(2), np.diag([2.0, 2.0]), np.eye(2)) == 2.0

    def test_mahalanobis_trace_is_dimension(self):
        S = np.array([[2.0, 0.3, 0.1], [0.3, 1.0, 0.2], [0.1, 0.2, 0.5]])
        assert eq_trace(np.linalg.inv(S), S) == pytest.approx(3.0, abs=1e-12)
        assert are_trace(np.linalg.inv(S), S, S) == pytest.approx(1.0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            eq_trace(np.eye(2), np.eye(3))

    def test_minimax_binomial_trace_is_quarter(self):
        for p in (0.1, 0.3, 0.5, 0.9):
            assert p * (1 - p) + (0.5 - p) ** 2 == pytest.approx(0.25)

    def test_binomial_simulation(self):
        p, eps, R = 0.3, 0.02, 1500
        out = run_replications(ExperimentPlan(exit_task, {"model": {"name": "binomial", "p": p},
                                                          "epsilon": eps}, R, 31))
        q = out[:, 1] * eps**2
        assert abs(q.mean() - eq_trace(1.0, p * (1 - p))) <= 0.02


class TestChiSquareExcess:
    def test_zero_level(self):
        assert eq_chisq_excess(0.0, 1) == pytest.approx(1.0)
        assert eq_chisq_excess(0.0, 3) == pytest.approx(3.0)

    def test_half_at_095(self):
        assert round(eq_chisq_excess(0.95, 1), 3) == 0.5

    def test_matches_quadrature(self):
        from scipy import integrate, stats

        b = 1.7
        v, _ = integrate.quad(lambda x: (x - b) * stats.chi2.pdf(x, 2), b, np.inf)
        assert eq_chisq_excess(b, 2) == pytest.approx(v, rel=1e-9)

    def test_rejects_bad_arguments(self):
        with pytest.raises(ValueError):
            eq_chisq_excess(-1.0)
        with pytest.raises(ValueError):
            eq_chisq_excess(1.0, 0)


class TestSandwich:
    def test_correct_model(self):
        J = np.array([[2.0, 0.5], [0.5, 1.0]])
        assert np.allclose(sandwich(SandwichSpec(J, J)), np.linalg.inv(J))

    def test_normal_truth(self):
        assert np.array_equal(normal_model_sandwich(0.0), np.eye(2))

    def test_uniform_data(self):
        assert np.allclose(normal_model_sandwich(-1.2), np.diag([1.0, 0.4]))

    def test_validation(self):
        with pytest.raises(ValueError):
            SandwichSpec(np.eye(2), np.eye(3))
        with pytest.raises(ValueError):
            SandwichSpec(np.array([[1.0, 1.0], [0.0, 1.0]]), np.eye(2))
        with pytest.raises(ValueError):
            SandwichSpec(-np.eye(2), np.eye(2))
        with pytest.raises(ValueError):
            normal_model_sandwich(-2.0)


class TestSkewnessVariance:
    def test_normal(self):
        assert skewness_limit_var(0, 3, 15, 1) == 6.0

    def test_tau_homogeneity(self):
        assert skewness_limit_var(0, 3, 15, 2) == 64 * 6.0

    def test_arithmetic_only(self):
        assert skewness_limit_var(0, 0, 0, 1) == 9.0

    def test_exponential(self):
        # standardized central moments of Exp(1): 2, 9, 265
        assert skewness_limit_var(2, 9, 265, 1) == 216.0

    def test_normal_brute_force(self):
        g = np.random.Generator(np.random.Philox(5))
        n, R = 10_000, 2000
        th = np.empty(R)
        for r in range(R):
            x = g.standard_normal(n)
            th[r] = np.mean((x - x.mean()) ** 3)
        v = n * th.var(ddof=1)
        se = v * math.sqrt(2 / (R - 1))
        assert abs(v - 6.0) <= 3 * se

    def test_rejects_bad_tau(self):
        with pytest.raises(ValueError):
            skewness_limit_var(0, 3, 15, 0)


class TestAbsNormalMoment:
    def test_centred_matches_closed_form(self):
        for q in (1.0, 2.0, 2.5, 3.5):
            assert abs_normal_moment(0.0, q) == pytest.approx(abs_normal_moment_closed(q), rel=1e-10)

    def test_shifted_second_moment(self):
        assert abs_normal_moment(1.3, 2.0) == pytest.approx(1 + 1.3**2, rel=1e-10)


class TestBandwidth:
    def test_objective_blows_up_at_both_ends(self):
        mid = bandwidth_paper_objective(1.0)
        assert bandwidth_paper_objective(1e-3) > 100 * mid
        assert bandwidth_paper_objective(10.0) > 100 * mid
        with pytest.raises(ValueError):
            bandwidth_paper_objective(0.0)

    def test_density_argmins(self):
        assert round(bandwidth_argmin(2.5), 3) == 1.008
        assert abs(bandwidth_argmin(1.25) - 1.008) > 0.3

    def test_derivative_argmin(self):
        assert abs(derivative_bandwidth_argmin() - 1.049) <= 1e-3

    def test_mse_analogue_argmin_is_one(self):
        for target in ("density", "derivative"):
            assert golden_argmin(lambda a: mse_objective(a, target)) == pytest.approx(1.0, abs=1e-4)

    def test_unimodal(self):
        assert is_unimodal(bandwidth_paper_objective)
        assert is_unimodal(derivative_objective)
        assert not is_unimodal(lambda a: math.cos(6 * a))

    def test_problem_constants(self):
        b = BandwidthProblem(BandwidthTarget.DENSITY, 0.4, -0.4, 0.3)
        assert b.c0 == pytest.approx((0.3 * 0.4 / 0.16) ** 0.2)
        assert b.rate == 0.2
        assert b.argmin() == pytest.approx(bandwidth_argmin(2.5))
        d = BandwidthProblem("DERIVATIVE", 0.4, 0.4, 0.1)
        assert d.c0 == pytest.approx((3 * 0.1 * 0.4 / 0.16) ** (1 / 7))
        assert d.rate == pytest.approx(1 / 7)

    def test_problem_validation(self):
        with pytest.raises(ValueError):
            BandwidthProblem("DENSITY", 0.4, 0.0, 0.3)
        with pytest.raises(ValueError):
            BandwidthProblem("MODE", 0.4, 1.0, 0.3)
