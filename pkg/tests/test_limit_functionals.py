import math

import numpy as np
import pytest

from lastexit.errors import InvalidDimensionError, InvalidGridError
from lastexit.gauss_paths import GaussPath, KieferSheet, TimeGrid, brownian_path, kiefer_sheet
from lastexit.limit_functionals import (
    CATALAN,
    LawKind,
    LimitLawSpec,
    chi_p_max,
    cvm_sup,
    epanechnikov_v_cov,
    gaussian_kernel_v_cov,
    v_cov_for_kernel,
    drifted_w_max_sq,
    g_p_max_sq,
    kiefer_horizon,
    kiefer_max,
    multi_brownian_path,
    occupation_q,
    quantile_table,
    sample_law,
    v_path,
    w_horizon,
    w_max,
    w_max_cdf,
    w_max_constants,
    w_max_moment,
    w_max_pdf,
    w_max_quantile,
    z_max_52,
)
from lastexit.efficiency import abs_normal_moment
from lastexit.mc_engine import ExperimentPlan, run_replications
from lastexit.rng import RngStream
from lastexit.limit_functionals import _law_task

G01 = TimeGrid.uniform(0.0, 1.0, 4096)


def _law(kind, R, seed, grid=4096, **kw):
    law = LimitLawSpec(kind, **kw)
    return run_replications(ExperimentPlan(_law_task, {"law_dict": law.params(),
                                                       "grid_points": grid}, R, seed))[:, 0]


class TestWMaxClosedForms:
    def test_cdf_anchor(self):
        assert abs(w_max_cdf(2.241) - 0.95) <= 0.001

    def test_uniform_needs_more_than_pointwise(self):
        assert w_max_cdf(1.96) < 0.95

    def test_quantile(self):
        assert abs(w_max_quantile(0.95) - 2.241) <= 0.001

    def test_cdf_monotone_and_bounded(self):
        x = np.linspace(0.01, 6, 600)
        F = w_max_cdf(x)
        assert np.all(np.diff(F) >= 0)
        assert F[0] >= 0 and F[-1] <= 1

    def test_series_branches_agree(self):
        # both series are valid at x = 1
        assert abs(w_max_cdf(1.0 - 1e-12) - w_max_cdf(1.0)) < 1e-9

    def test_pdf_integrates_to_cdf(self):
        from scipy import integrate
        assert abs(integrate.quad(w_max_pdf, 0, 2.0)[0] - w_max_cdf(2.0)) < 1e-8

    def test_moments(self):
        c = w_max_constants()
        assert abs(c["mean"] - math.sqrt(math.pi / 2)) < 1e-8
        assert abs(c["mean_sq"] - 2 * CATALAN) < 1e-8
        assert abs(c["sd"] - 0.5110) < 5e-5
        assert abs(c["sd_sq"] - 1.6055) < 5e-5
        assert abs(c["skew_sq"] - 2.3308) < 5e-4
        assert abs(w_max_moment(2) - 1.8319) < 1e-4


class TestWMax:
    def test_zero_path(self):
        assert w_max(GaussPath(G01, np.zeros(4096))) == 0.0

    def test_needs_rng_for_bridge(self):
        with pytest.raises(ValueError):
            w_max(GaussPath(G01, np.zeros(4096)), bridge_correct=True)

    def test_simulated_moments(self):
        w2 = _law("WMAX2", 100_000, 31)
        w = np.sqrt(w2)
        assert abs(w.mean() - 1.2533) <= 0.01
        assert abs(w2.mean() - 1.8319) <= 0.015


class TestChiPMax:
    def test_p1_is_w_max_sq(self, rng):
        p = brownian_path(G01, rng)
        assert chi_p_max(p) == pytest.approx(w_max(p) ** 2)

    def test_g_p_reductions(self, rng):
        p1 = brownian_path(G01, rng)
        assert g_p_max_sq(p1, [[2.5]], [[1.0]]) == pytest.approx(2.5 * w_max(p1) ** 2)
        S = np.array([[2.0, 0.5], [0.5, 1.0]])
        p2 = multi_brownian_path(2, G01, rng)
        assert g_p_max_sq(p2, S, np.linalg.inv(S)) == pytest.approx(chi_p_max(p2))

    def test_g_p_dimension_check(self, rng):
        with pytest.raises(InvalidDimensionError):
            g_p_max_sq(brownian_path(G01, rng), np.eye(2), np.eye(2))

    def test_p1_mean(self):
        v = _law("CHI_P_MAX", 100_000, 32, p=1)
        assert abs(v.mean() - 1.8319) <= 0.015

    def test_normal_model_sandwich_case(self):
        # Sigma0 = diag(1, 1) with A = I is the chi^2_2,max law
        a = _law("GPMAX2", 20_000, 33, Sigma0=np.eye(2), A=np.eye(2))
        b = _law("CHI_P_MAX", 20_000, 34, p=2)
        se = math.hypot(a.std(), b.std()) / math.sqrt(20_000)
        assert abs(a.mean() - b.mean()) <= max(0.01 * b.mean(), 3 * se)

    def test_p_dimension_increases_mean(self):
        v2 = _law("CHI_P_MAX", 5000, 35, p=2)
        assert v2.mean() > 1.8319 + 0.5


class TestKiefer:
    def test_zero_sheet(self):
        s, t = TimeGrid.uniform(0.25, 1, 4), TimeGrid.uniform(0, 1, 5)
        sh = KieferSheet(s, t, np.zeros((4, 5)))
        assert kiefer_max(sh) == 0.0
        assert cvm_sup(sh).value == 0.0

    def test_dominates_bridge_slice(self):
        v = _law("KMAX2", 20_000, 36, grid=64)
        assert v.mean() > math.pi**2 / 12

    def test_cvm_slice_mean_and_dominance(self):
        rng = RngStream(37, 0)
        sg, tg = TimeGrid.uniform(1 / 64, 1, 64), TimeGrid.uniform(0, 1, 129)
        vals = [cvm_sup(kiefer_sheet(sg, tg, rng)) for _ in range(20_000)]
        sl = np.array([c.slice_at_one for c in vals])
        assert all(c.value >= c.slice_at_one for c in vals)
        assert abs(sl.mean() - 1 / 6) <= 0.005
        assert not vals[0].coarse_grid

    def test_pre_limit_agreement(self):
        # exact sqrt(m) sup_{n >= m} ||F_n - F|| at m = 2000 on a level grid
        from lastexit.experiments import ecdf_tail_task
        m = 2000
        b = np.round(np.arange(0.5, 2.0, 0.025), 6)
        K = kiefer_horizon(1e-4) / b[0] ** 2
        reached = run_replications(ExperimentPlan(ecdf_tail_task, {
            "m": m, "b_grid": tuple(b), "horizon_mult": K}, 5000, 38))[:, 0]
        pre = np.array([np.mean(reached > i) for i in range(b.size)])
        lim = np.sqrt(_law("KMAX2", 10_000, 39, grid=64))
        post = np.array([np.mean(lim >= x) for x in b])
        assert np.max(np.abs(pre - post)) <= 0.03


class TestOccupation:
    def test_q_means(self):
        T = 40.0
        g = TimeGrid(np.linspace(0.0, T, 40_000))
        rng = RngStream(40, 0)
        q0, q95 = [], []
        for _ in range(4000):
            p = brownian_path(g, rng)
            q0.append(occupation_q(p, 1.0, 0.0))
            q95.append(occupation_q(p, 1.0, 0.95))
        se0 = np.std(q0) / math.sqrt(len(q0))
        se95 = np.std(q95) / math.sqrt(len(q95))
        assert abs(np.mean(q0) - 1.0) <= max(0.02, 3 * se0)
        assert abs(np.mean(q95) - 0.5) <= max(0.01, 3 * se95)

    def test_zero_for_quiet_path(self):
        g = TimeGrid(np.linspace(0.0, 10, 100))
        assert occupation_q(GaussPath(g, 0.5 * np.ones(100)), 1.0, 2.0) == 0.0

    def test_rejects_short_horizon(self):
        g = TimeGrid(np.linspace(0.0, 1, 10))
        with pytest.raises(InvalidGridError):
            occupation_q(GaussPath(g, np.zeros(10)), 1.0, 2.0)


class TestZMax:
    def test_degenerate(self):
        g = TimeGrid(np.exp(np.linspace(0, 5, 50)))
        zero = GaussPath(g, np.zeros(50))
        assert z_max_52(1.0, 0.3, 0.0, 0.28, zero) == 0.0
        assert z_max_52(1.2, 0.3, -0.7, 0.28, zero) == pytest.approx(
            abs(0.5 * 1.2**2 * -0.7) ** 2.5)

    def test_single_time_point(self):
        # at t = 1, Z(1) = b + s N with b = c^2 f''/2, s^2 = f beta / c
        c, f, f2, beta = 1.0, 0.4, -0.4, 1 / (2 * math.sqrt(math.pi))
        rng = RngStream(41, 0)
        z1 = []
        for _ in range(20_000):
            v = v_path(rng, t_max=10.0, count=8)
            z1.append(abs(0.5 * c * c * f2 + math.sqrt(f / c) * v.scalar[0]) ** 2.5)
        s = math.sqrt(f * beta / c)
        b = 0.5 * c * c * f2
        want = s**2.5 * abs_normal_moment(b / s, 2.5)
        assert abs(np.mean(z1) / want - 1) <= max(0.01, 3 * np.std(z1) / math.sqrt(2e4) / want)


    @pytest.mark.parametrize("name,closed", [("gaussian", gaussian_kernel_v_cov),
                                             ("epanechnikov", epanechnikov_v_cov)])
    def test_v_covariance_closed_forms(self, name, closed):
        from lastexit.seq_models import KernelSpec

        generic = v_cov_for_kernel(KernelSpec(name).K)
        s = np.array([1.0, 1.0, 2.0, 7.5, 300.0])
        t = np.array([1.0, 3.0, 1.5, 7.5, 1.0])
        np.testing.assert_allclose(closed(s, t), generic(s, t), rtol=1e-7, atol=1e-12)
        assert closed(2.0, 2.0) == pytest.approx(KernelSpec(name).beta_K, rel=1e-12)

    def test_law_kernel_option(self):
        with pytest.raises(ValueError):
            LimitLawSpec(LawKind.ZMAX_52, density_params=(1, 0.4, -0.4, 0.27), kernel="box")
        law = LimitLawSpec(LawKind.ZMAX_52, density_params=(1, 0.4, -0.4, 0.27),
                           kernel="epanechnikov")
        assert law.params()["kernel"] == "epanechnikov"


class TestDrifted:
    def test_b0(self, rng):
        p = brownian_path(G01, rng)
        assert drifted_w_max_sq(0.0, p) == pytest.approx(w_max(p) ** 2)

    def test_drift_dominates(self):
        rng = RngStream(42, 0)
        b = 0.3 / math.sqrt(0.16)
        assert b == pytest.approx(0.75)
        d0, d1 = [], []
        for _ in range(5000):
            p = brownian_path(G01, rng)
            d0.append(drifted_w_max_sq(0.0, p))
            d1.append(drifted_w_max_sq(b, p))
        assert np.mean(d1) > np.mean(d0)


class TestQuantileTable:
    def test_wmax2_and_chi1(self, tmp_path):
        for kind in ("WMAX2", "CHI_P_MAX"):
            t = quantile_table(LimitLawSpec(kind), [0.95], 20_000, RngStream(43), 4096,
                               cache_dir=tmp_path)
            assert abs(t.quantile(0.95) - 5.022) <= 0.05 * 2

    def test_cache_roundtrip(self, tmp_path):
        law = LimitLawSpec("CHI_P_MAX", p=2)
        a = quantile_table(law, [0.5, 0.95], 10_000, RngStream(44), 64, cache_dir=tmp_path)
        assert list(tmp_path.iterdir())
        b = quantile_table(law, [0.5, 0.95], 10_000, RngStream(44), 64, cache_dir=tmp_path)
        assert a.quantile(0.95) == b.quantile(0.95)

    def test_kmax2_stable_across_seeds(self, tmp_path):
        q = []
        for seed in (45, 46):
            v = _law("KMAX2", 10_000, seed, grid=64)
            q.append(np.quantile(v, 0.95))
        boots = []
        g = np.random.default_rng(0)
        for _ in range(100):
            boots.append(np.quantile(g.choice(v, v.size), 0.95))
        assert abs(q[0] - q[1]) <= 2 * math.sqrt(2) * np.std(boots)


class TestHorizons:
    def test_w_horizon_tail(self):
        T = w_horizon(1e-3, 1.0)
        assert abs((1 - w_max_cdf(math.sqrt(T))) - 1e-3) < 1e-6

    def test_kiefer_horizon(self):
        assert kiefer_horizon(1e-3) == pytest.approx(0.5 * math.log(4000))
