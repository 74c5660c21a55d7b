import numpy as np
import pytest

from lastexit.errors import (
    InvalidDimensionError,
    InvalidGridError,
    InvalidSamplerError,
    NotPSDError,
    UnsupportedGridError,
)
from lastexit.gauss_paths import (
    RADEMACHER_INCREMENTS,
    CovarianceFactor,
    IncrementSampler,
    NORMAL_INCREMENTS,
    TimeGrid,
    brownian_path,
    bridge_corrected_max_abs,
    drifted_root_path,
    gaussian_path_from_covariance,
    kiefer_refined_max_abs,
    kiefer_sheet,
    multi_brownian_path,
    random_walk_path,
)
from lastexit.limit_functionals import gaussian_kernel_v_cov, w_max_cdf
from lastexit.mc_engine import ks_distance, ks_two_sample
from lastexit.rng import RngStream


class TestTimeGrid:
    def test_rejects_bad_grids(self):
        with pytest.raises(InvalidGridError):
            TimeGrid([0.0, 0.5, 0.5])
        with pytest.raises(InvalidGridError):
            TimeGrid([-0.1, 1.0])
        with pytest.raises(InvalidGridError):
            TimeGrid([0.0, np.inf])
        with pytest.raises(InvalidGridError):
            TimeGrid([])

    def test_single_point_allowed(self):
        assert TimeGrid([0.0]).count == 1

    def test_equispaced(self):
        assert TimeGrid.uniform(0, 1, 11).is_equispaced()
        assert not TimeGrid([0.0, 0.1, 0.5]).is_equispaced()


class TestBrownianPath:
    def test_starts_at_zero(self, rng):
        assert brownian_path(TimeGrid([0.0]), rng).scalar[0] == 0.0

    def test_variance_at_one(self):
        rng = RngStream(1, 0)
        g = TimeGrid([0.0, 1.0])
        v = np.array([brownian_path(g, rng).scalar[1] for _ in range(100_000)])
        assert abs(v.var() - 1.0) <= 0.02

    def test_covariance_is_min(self):
        rng = RngStream(2, 0)
        g = TimeGrid([0.0, 0.5, 1.0])
        v = np.array([brownian_path(g, rng).scalar[1:] for _ in range(100_000)])
        assert abs(np.cov(v.T)[0, 1] - 0.5) <= 0.02

    def test_reproducible(self):
        g = TimeGrid.uniform(0, 1, 100)
        a = brownian_path(g, RngStream(7, 3)).scalar
        b = brownian_path(g, RngStream(7, 3)).scalar
        assert np.array_equal(a, b)


class TestMultiBrownian:
    def test_rejects_bad_p(self, rng):
        with pytest.raises(InvalidDimensionError):
            multi_brownian_path(0, TimeGrid([0, 1]), rng)

    def test_p1_matches_scalar_law(self):
        g = TimeGrid([0.0, 1.0])
        rng = RngStream(3, 0)
        a = [multi_brownian_path(1, g, rng).values[1, 0] for _ in range(20_000)]
        b = [brownian_path(g, rng).scalar[1] for _ in range(20_000)]
        assert ks_two_sample(a, b) < 0.02

    def test_coordinates_uncorrelated(self):
        rng = RngStream(4, 0)
        g = TimeGrid([0.0, 1.0])
        v = np.array([multi_brownian_path(2, g, rng).values[1] for _ in range(100_000)])
        assert abs(np.corrcoef(v.T)[0, 1]) <= 0.01

    def test_chi2_3_mean(self):
        rng = RngStream(5, 0)
        g = TimeGrid([0.0, 1.0])
        v = [np.sum(multi_brownian_path(3, g, rng).values[1] ** 2) for _ in range(100_000)]
        assert abs(np.mean(v) - 3.0) <= 0.05


class TestDriftedRootPath:
    def test_zero_at_origin(self, rng):
        p = drifted_root_path(2.0, TimeGrid.uniform(0, 1, 5), rng)
        assert p.scalar[0] == 0.0

    def test_b0_is_brownian(self):
        g = TimeGrid.uniform(0, 1, 5)
        a = drifted_root_path(0.0, g, RngStream(9, 1)).scalar
        b = brownian_path(g, RngStream(9, 1)).scalar
        assert np.allclose(a, b)

    def test_mean_at_one(self):
        rng = RngStream(6, 0)
        g = TimeGrid([0.0, 1.0])
        v = [drifted_root_path(1.0, g, rng).scalar[1] for _ in range(100_000)]
        assert abs(np.mean(v) - 1.0) <= 0.01

    def test_rejects_grid_beyond_one(self, rng):
        with pytest.raises(InvalidGridError):
            drifted_root_path(1.0, TimeGrid([0.0, 2.0]), rng)


class TestKieferSheet:
    def test_pinned_edges(self, rng):
        sh = kiefer_sheet(TimeGrid.uniform(1 / 64, 1, 64), TimeGrid.uniform(0, 1, 64), rng)
        assert np.all(sh.values[:, 0] == 0.0)
        assert np.all(sh.values[:, -1] == 0.0)

    def test_covariance(self):
        rng = RngStream(8, 0)
        sg = TimeGrid.uniform(1 / 64, 1, 64)
        tg = TimeGrid.uniform(0, 1, 65)  # contains t = 0.5
        j = 32
        i_half = 31  # s = 0.5
        v = np.array([kiefer_sheet(sg, tg, rng).values[[i_half, -1], j] for _ in range(40_000)])
        c = np.cov(v.T)
        assert abs(c[1, 1] - 0.25) <= 0.01
        assert abs(c[0, 1] - 0.125) <= 0.01

    def test_rejects_uneven_s(self, rng):
        with pytest.raises(UnsupportedGridError):
            kiefer_sheet(TimeGrid([0.1, 0.2, 1.0]), TimeGrid.uniform(0, 1, 5), rng)

    def test_rejects_t_beyond_one(self, rng):
        with pytest.raises(InvalidGridError):
            kiefer_sheet(TimeGrid.uniform(0.5, 1, 2), TimeGrid([0.0, 1.5]), rng)


class TestCovariancePaths:
    def test_min_cov_matches_brownian(self):
        g = TimeGrid(np.linspace(0.1, 1.0, 10))
        fac = CovarianceFactor(np.minimum.outer(g.points, g.points))
        rng = RngStream(10, 0)
        a = [gaussian_path_from_covariance(None, g, rng, fac).scalar[4] for _ in range(100_000)]
        b = np.array([brownian_path(g, rng).scalar[4] for _ in range(100_000)])
        assert ks_two_sample(a, b) <= 0.01

    def test_constant_cov_gives_flat_paths(self, rng):
        g = TimeGrid.uniform(0, 1, 8)
        p = gaussian_path_from_covariance(lambda s, t: 2.0 + 0.0 * s, g, rng).scalar
        assert np.allclose(p, p[0])

    def test_v_process_variance(self):
        g = TimeGrid(np.exp(np.linspace(0, np.log(100.0), 16)))
        fac = CovarianceFactor(np.asarray(gaussian_kernel_v_cov(*np.meshgrid(g.points, g.points))))
        x = fac.sample(RngStream(11, 0), 100_000)
        beta = 1.0 / (2.0 * np.sqrt(np.pi))
        assert np.all(np.abs(x.var(axis=0) / beta - 1.0) <= 0.005 + 4 * np.sqrt(2 / 1e5))

    def test_not_psd(self):
        with pytest.raises(NotPSDError):
            CovarianceFactor(np.array([[1.0, 2.0], [2.0, 1.0]]))

    def test_rank_deficient_ok(self):
        f = CovarianceFactor(np.ones((4, 4)))
        assert f.rank == 1


class TestRandomWalk:
    def test_single_step(self, rng):
        p = random_walk_path(1, 1.0, RADEMACHER_INCREMENTS, rng)
        assert p.scalar.shape == (1,)
        assert abs(p.scalar[0]) == 1.0

    def test_rejects_non_standard_sampler(self, rng):
        bad = IncrementSampler("shifted", lambda g, n: g.standard_normal(n) + 1, mean=1.0)
        with pytest.raises(InvalidSamplerError):
            random_walk_path(10, 1.0, bad, rng)

    def test_donsker_max(self):
        # w_max_cdf is the oracle for the discrete maximum at m = 1e4
        rng = RngStream(12, 0)
        mx = [np.max(np.abs(random_walk_path(10_000, 1.0, NORMAL_INCREMENTS, rng).scalar))
              for _ in range(10_000)]
        assert ks_distance(mx, w_max_cdf) <= 0.02

    def test_clt_moments(self):
        rng = RngStream(13, 0)
        v = np.array([random_walk_path(10_000, 1.0, NORMAL_INCREMENTS, rng).scalar[-1]
                      for _ in range(20_000)])
        assert abs(v.mean()) <= 0.02
        assert abs(v.var() - 1.0) <= 0.03


class TestBridgeCorrection:
    def test_never_below_grid_max(self, rng):
        g = TimeGrid.uniform(0, 1, 33)
        for _ in range(50):
            p = brownian_path(g, rng)
            assert bridge_corrected_max_abs(p.scalar, g.points, rng) >= np.max(np.abs(p.scalar))

    def test_removes_discretization_bias(self):
        rng = RngStream(14, 0)
        g = TimeGrid.uniform(0, 1, 64)
        v = [bridge_corrected_max_abs(brownian_path(g, rng).scalar, g.points, rng)
             for _ in range(20_000)]
        assert abs(np.mean(v) - np.sqrt(np.pi / 2)) <= 4 * np.std(v) / np.sqrt(len(v))


class TestKieferRefinement:
    def test_never_below_grid_max(self, rng):
        sg = TimeGrid.uniform(1 / 16, 1.0, 16)
        tg = TimeGrid.uniform(0.0, 1.0, 17)
        for _ in range(20):
            sh = kiefer_sheet(sg, tg, rng)
            assert kiefer_refined_max_abs(sh, rng) >= np.max(np.abs(sh.values))

    def test_deterministic_per_stream(self):
        sg = TimeGrid.uniform(1 / 16, 1.0, 16)
        tg = TimeGrid.uniform(0.0, 1.0, 17)
        out = []
        for _ in range(2):
            r = RngStream(5, 3)
            out.append(kiefer_refined_max_abs(kiefer_sheet(sg, tg, r), r))
        assert out[0] == out[1]

    def test_needs_full_t_range(self, rng):
        sh = kiefer_sheet(TimeGrid.uniform(0.5, 1.0, 2), TimeGrid.uniform(0.1, 0.9, 5), rng)
        with pytest.raises(UnsupportedGridError):
            kiefer_refined_max_abs(sh, rng)

    def test_resolution_independent(self):
        # a coarse starting sheet refines to the same law as a finer one
        def draw(n, seed, reps):
            r = RngStream(seed, 0)
            sg = TimeGrid.uniform(1 / n, 1.0, n)
            tg = TimeGrid.uniform(0.0, 1.0, n + 1)
            return np.array([kiefer_refined_max_abs(kiefer_sheet(sg, tg, r), r) ** 2
                             for _ in range(reps)])

        a = draw(16, 21, 4000)
        b = draw(64, 22, 4000)
        se = np.sqrt(a.var() / a.size + b.var() / b.size)
        assert abs(a.mean() - b.mean()) <= 4 * se
