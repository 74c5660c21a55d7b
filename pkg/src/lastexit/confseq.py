"""Sequential fixed-volume confidence regions and empirical tail-bound checks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .experiments import ecdf_tail_task, exit_task, split_records, walk_tail_task
from .limit_functionals import (
    LawKind,
    LimitLawSpec,
    quantile_table,
    w_max_quantile,
)
from .mc_engine import ExperimentPlan, run_replications
from .efficiency import abs_normal_moment_closed
from .rng import RngStream

C_MOMENT = 1.001  # von Bahr constant for large n


@dataclass(frozen=True)
class SequentialPlan:
    """Start the region ``{theta : d(theta_n, theta) < eps}`` at ``m_start``."""

    epsilon: float
    coverage: float
    p: int
    c_quantile: float
    m_start: int
    law_used: LimitLawSpec

    def __post_init__(self):
        if self.m_start < 1:
            raise ValueError("m_start must be >= 1")
        if not 0.0 < self.coverage < 1.0:
            raise ValueError("coverage must lie in (0, 1)")


def law_quantile(law: LimitLawSpec, prob: float, replications: int = 20_000,
                 seed: int = 0, grid_points: int = 4096, cache_dir=None,
                 use_cache: bool = True, workers: int = 1) -> float:
    """Quantile of a limit law: closed form for ``W_max^2`` laws, simulated
    (and cached) otherwise."""
    if law.kind == LawKind.WMAX2:
        return law.sigma0_sq * w_max_quantile(prob) ** 2
    if law.kind in (LawKind.CHI_P_MAX, LawKind.KL_CHI) and law.p == 1:
        return w_max_quantile(prob) ** 2
    table = quantile_table(law, [prob], replications, RngStream(seed), grid_points,
                           cache_dir=cache_dir, use_cache=use_cache, workers=workers)
    return table.quantile(prob)


def plan_fixed_volume(epsilon: float, coverage: float, p: int = 1,
                      law: LimitLawSpec | None = None, **quantile_kw) -> SequentialPlan:
    """``m_start = ceil(c / eps^2)`` with ``P(L <= c) = coverage`` for the
    limit law ``L`` (``sigma0^2 W_max^2`` for ``p = 1`` by default,
    ``chi^2_{p,max}`` otherwise)."""
    if not 0.0 < coverage < 1.0:
        raise ConfigError("coverage must lie in (0, 1)")
    if not epsilon > 0:
        raise ConfigError("epsilon must be > 0")
    if law is None:
        law = LimitLawSpec(LawKind.WMAX2) if p == 1 else LimitLawSpec(LawKind.CHI_P_MAX, p=p)
    c = law_quantile(law, coverage, **quantile_kw)
    return SequentialPlan(epsilon, coverage, p, c, int(math.ceil(round(c / epsilon**2, 9))), law)


def pointwise_sample_size(epsilon: float, coverage: float = 0.95, sigma0_sq: float = 1.0) -> int:
    """Fixed-n size ``z^2 sigma0^2 / eps^2`` of a single-n interval."""
    from scipy import stats

    z = stats.norm.ppf(0.5 + coverage / 2)
    return int(math.ceil(z * z * sigma0_sq / epsilon**2))


@dataclass(frozen=True)
class CoverageResult:
    coverage: float
    se: float
    replications: int
    horizon_n: int
    m_start: int

    @property
    def ci(self) -> tuple[float, float]:
        return self.coverage - 1.96 * self.se, self.coverage + 1.96 * self.se


def check_sequential_coverage(plan: SequentialPlan, model: dict, replications: int,
                              seed: int = 0, delta_tail: float = 1e-3,
                              workers: int = 1) -> CoverageResult:
    """Fraction of replications with ``d(theta_n, theta0) < eps`` for every
    ``n`` from ``m_start`` to the horizon."""
    a = plan.c_quantile
    ep = ExperimentPlan(exit_task, {"model": model, "epsilon": plan.epsilon, "a_levels": (a,),
                                    "delta_tail": delta_tail}, replications, seed, workers)
    recs = split_records(run_replications(ep), (a,), plan.epsilon, delta_tail)[0]
    horizon = recs[0].horizon_n
    if horizon <= plan.m_start:
        raise ConfigError(f"horizon {horizon} does not exceed m_start {plan.m_start}")
    cov = float(np.mean([r.miss_count_from[float(a)] == 0 for r in recs]))
    return CoverageResult(cov, math.sqrt(cov * (1 - cov) / replications), replications,
                          horizon, plan.m_start)


# ---------------------------------------------------------------------------
# tail bounds


@dataclass(frozen=True)
class TailBoundReport:
    lam: float
    grid: list
    empirical_probs: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    bound_values: np.ndarray
    violations: list
    extras: dict = field(default_factory=dict)

    def rows(self) -> list[dict]:
        return [{"m": m, "level": a, "prob": float(p), "ci_low": float(lo),
                 "ci_high": float(hi), "bound": float(b)}
                for (m, a), p, lo, hi, b in zip(self.grid, self.empirical_probs, self.ci_low,
                                                self.ci_high, self.bound_values)]


def bound_64(a, lam: float) -> np.ndarray:
    """``6.75 c E|N|^{2+lam} / a^{2+lam}`` with ``c = 1.001``."""
    return 6.75 * C_MOMENT * abs_normal_moment_closed(2 + lam) / np.asarray(a, float) ** (2 + lam)


def _binom_se(p, R):
    return np.sqrt(p * (1 - p) / R)


def verify_tail_bound_64(lam: float = 0.0, sampler: str = "normal",
                         m_grid=(100, 400, 1600), a_grid=(1.0, 1.5, 2.0, 2.5, 3.0, 4.0),
                         replications: int = 2000, seed: int = 0, delta_tail: float = 1e-3,
                         workers: int = 1) -> TailBoundReport:
    """Empirical ``P(sqrt(m) sup_{n>=m} |S_n/n| >= a)`` against the bound.

    The sup runs to ``K m`` with ``K`` chosen so that the limit probability
    of reaching the smallest ``a`` beyond ``K m`` is ``delta_tail``. A
    violation is a cell whose estimate minus three standard errors still
    exceeds the bound.
    """
    if min(m_grid) < 100:
        raise ConfigError("claims are restricted to m >= 100")
    if lam < 0:
        raise ConfigError("lambda must be >= 0")
    K = (w_max_quantile(1.0 - delta_tail) / min(a_grid)) ** 2
    ep = ExperimentPlan(walk_tail_task, {"sampler": sampler, "m_grid": tuple(m_grid),
                                         "a_grid": tuple(a_grid), "horizon_mult": K},
                        replications, seed, workers)
    p = run_replications(ep).mean(axis=0)
    grid = [(int(m), float(a)) for m in m_grid for a in a_grid]
    bounds = np.array([bound_64(a, lam) for _, a in grid])
    se = _binom_se(p, replications)
    viol = [grid[i] for i in range(len(grid)) if p[i] - 3 * se[i] > bounds[i]]
    return TailBoundReport(lam, grid, p, np.clip(p - 1.96 * se, 0, 1),
                           np.clip(p + 1.96 * se, 0, 1), bounds, viol,
                           {"sampler": sampler, "horizon_mult": K, "replications": replications})


def _loglog_slope(b, p):
    x = np.log(b)
    y = np.log(p)
    return float(np.polyfit(x, y, 1)[0])


def verify_tail_bound_44(b_grid=tuple(np.round(np.arange(0.8, 2.05, 0.1), 10)) + (2.5, 3.0, 4.0),
                         m_grid=(500, 1000, 2000), replications: int = 10_000, seed: int = 0,
                         delta_tail: float = 1e-3, min_hits: int = 20,
                         slope_limit: float = -3.5, workers: int = 1) -> TailBoundReport:
    """Shape check of ``P(sqrt(m) sup_{n>=m} ||F_n - F|| >= b) <= A / b^4``.

    The log-log slope is fitted over the levels above the median (estimate
    at most 1/2) that still have ``min_hits`` exceedances; the implied
    constant is ``max b^4 p``. Violations are a slope above
    ``slope_limit`` and levels where the two largest ``m`` values disagree by
    more than three standard errors. Smaller ``m`` still approach the limit
    law from below in the tail, so they enter the slope fit only.
    """
    b = np.sort(np.asarray(b_grid, dtype=float))
    K = 0.5 * math.log(4.0 / delta_tail) / b.min() ** 2
    probs = {}
    for m in m_grid:
        ep = ExperimentPlan(ecdf_tail_task, {"m": int(m), "b_grid": tuple(b), "horizon_mult": K},
                            replications, seed + int(m), workers)
        reached = run_replications(ep)[:, 0]
        probs[m] = np.array([np.mean(reached > i) for i in range(b.size)])
    grid, p_all, bounds = [], [], []
    slopes, A_hat = {}, {}
    viol = []
    for m in m_grid:
        p = probs[m]
        win = (p <= 0.5) & (p * replications >= min_hits)
        if win.sum() < 3:
            viol.append(("fit window too small", m))
            slopes[m] = float("nan")
        else:
            slopes[m] = _loglog_slope(b[win], p[win])
            if not slopes[m] <= slope_limit:
                viol.append(("slope", m, slopes[m]))
        A_hat[m] = float(np.max(b**4 * p))
        for bi, pi in zip(b, p):
            grid.append((int(m), float(bi)))
            p_all.append(pi)
            bounds.append(A_hat[m] / bi**4)
    m0, m1 = sorted(m_grid)[-2:] if len(m_grid) > 1 else (m_grid[0], m_grid[0])
    se = np.sqrt(_binom_se(probs[m0], replications) ** 2 + _binom_se(probs[m1], replications) ** 2)
    for bi, d, s in zip(b, probs[m0] - probs[m1], se):
        if abs(d) > 3 * s + 1e-12:
            viol.append(("m invariance", float(bi), float(d)))
    p_all = np.asarray(p_all)
    se_all = _binom_se(p_all, replications)
    win_b = {m: b[(probs[m] <= 0.5) & (probs[m] * replications >= min_hits)].tolist()
             for m in m_grid}
    return TailBoundReport(4.0, grid, p_all, np.clip(p_all - 1.96 * se_all, 0, 1),
                           np.clip(p_all + 1.96 * se_all, 0, 1), np.asarray(bounds), viol,
                           {"slopes": slopes, "A_hat": A_hat, "fit_window": win_b,
                            "horizon_mult": K, "replications": replications,
                            "invariance_pair": (int(m0), int(m1))})
