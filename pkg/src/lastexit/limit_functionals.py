"""Limit-law functionals of Gaussian paths plus closed-form oracles.

Sampling from a limit law goes through :func:`sample_law`; every law is a
functional of a path or sheet built in :mod:`lastexit.gauss_paths`.
"""

from __future__ import annotations

import enum
import hashlib
import json
import os
import tempfile
import warnings
from dataclasses import dataclass, field, asdict
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import integrate, optimize, special, stats

from . import __version__
from .errors import InvalidDimensionError, InvalidGridError
from .gauss_paths import (
    CovarianceFactor,
    GaussPath,
    KieferSheet,
    TimeGrid,
    bridge_corrected_max_abs,
    brownian_path,
    covariance_matrix,
    drifted_root_path,
    kiefer_refined_max_abs,
    kiefer_sheet,
    multi_brownian_path,
)
from .rng import RngStream

CATALAN = 0.915965594177219015
CACHE_ENV = "LASTEXIT_CACHE_DIR"


class LawKind(str, enum.Enum):
    WMAX2 = "WMAX2"
    GPMAX2 = "GPMAX2"
    CHI_P_MAX = "CHI_P_MAX"
    KMAX2 = "KMAX2"
    LAMBDA2 = "LAMBDA2"
    Q_OCC = "Q_OCC"
    ZMAX_52 = "ZMAX_52"
    DRIFTED_WMAX2 = "DRIFTED_WMAX2"
    KL_CHI = "KL_CHI"


_REQUIRED = {
    LawKind.WMAX2: ("sigma0_sq",),
    LawKind.GPMAX2: ("Sigma0", "A"),
    LawKind.CHI_P_MAX: ("p",),
    LawKind.KMAX2: (),
    LawKind.LAMBDA2: (),
    LawKind.Q_OCC: ("a_lower", "sigma0_sq"),
    LawKind.ZMAX_52: ("density_params",),
    LawKind.DRIFTED_WMAX2: ("drift_b",),
    LawKind.KL_CHI: ("p",),
}


@dataclass(frozen=True)
class LimitLawSpec:
    """Identifies a limit functional and its parameters.

    ``density_params`` is ``(c, f, f2, beta_K)``; ``kernel`` picks the V
    process covariance for ``ZMAX_52``.
    """

    kind: LawKind
    p: int = 1
    sigma0_sq: float = 1.0
    Sigma0: tuple | None = None
    A: tuple | None = None
    a_lower: float = 0.0
    drift_b: float = 0.0
    density_params: tuple | None = None
    kernel: str = "gaussian"

    def __post_init__(self):
        kind = LawKind(self.kind)
        object.__setattr__(self, "kind", kind)
        for name in _REQUIRED[kind]:
            if getattr(self, name) is None:
                raise ValueError(f"{kind.value} requires {name}")
        if self.p < 1:
            raise InvalidDimensionError("p must be >= 1")
        if self.kernel not in V_COVARIANCES:
            raise ValueError(f"kernel must be one of {sorted(V_COVARIANCES)}")
        if self.sigma0_sq <= 0:
            raise ValueError("sigma0_sq must be positive")
        if self.a_lower < 0:
            raise ValueError("a_lower must be >= 0")
        for name in ("Sigma0", "A"):
            m = getattr(self, name)
            if m is not None:
                arr = np.atleast_2d(np.asarray(m, dtype=float))
                if not np.allclose(arr, arr.T):
                    raise ValueError(f"{name} must be symmetric")
                object.__setattr__(self, name, tuple(map(tuple, arr)))
        if self.Sigma0 is not None:
            if np.linalg.eigvalsh(np.asarray(self.Sigma0)).min() <= 0:
                raise ValueError("Sigma0 must be positive definite")
            object.__setattr__(self, "p", len(self.Sigma0))
        if self.A is not None and np.linalg.eigvalsh(np.asarray(self.A)).min() < -1e-12:
            raise ValueError("A must be positive semi-definite")

    def params(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        keep = ("kind",) + _REQUIRED[self.kind] + (("p",) if self.kind == LawKind.GPMAX2 else ())
        if self.kind == LawKind.ZMAX_52:
            keep += ("kernel",)
        return {k: d[k] for k in keep}


@dataclass(frozen=True)
class QuantileTable:
    law: LimitLawSpec
    probs: np.ndarray
    quants: np.ndarray
    se: np.ndarray
    replications: int
    grid_points: int
    seed: int

    def __post_init__(self):
        if np.any(np.diff(self.quants) < 0):
            raise ValueError("quantiles must be non-decreasing")

    def quantile(self, prob: float) -> float:
        i = np.flatnonzero(np.isclose(self.probs, prob))
        if i.size == 0:
            raise KeyError(f"probability {prob} not tabulated")
        return float(self.quants[i[0]])


# ---------------------------------------------------------------------------
# W_max: closed forms


def w_max_cdf(x):
    """``P(max_{[0,1]} |W| <= x)``; returns 0 for ``x <= 0``.

    Below ``x = 1`` the theta series ``(4/pi) sum (-1)^k/(2k+1)
    exp(-(2k+1)^2 pi^2 / (8x^2))`` converges in a few terms; above it the
    reflection series ``1 - 2 sum (-1)^k erfc((2k+1)x/sqrt(2))`` does.
    """
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    pos = x > 0
    xs = x[pos]
    res = np.zeros_like(xs)
    small = xs < 1.0
    xv = xs[small]
    if xv.size:
        acc = np.zeros_like(xv)
        for k in range(0, 200):
            m = 2 * k + 1
            term = (-1) ** k / m * np.exp(-(m**2) * np.pi**2 / (8.0 * xv**2))
            acc += term
            if np.all(np.abs(term) < 1e-17):
                break
        res[small] = 4.0 / np.pi * acc
    xv = xs[~small]
    if xv.size:
        acc = np.zeros_like(xv)
        for k in range(0, 200):
            term = (-1) ** k * 2.0 * special.erfc((2 * k + 1) * xv / np.sqrt(2.0))
            acc += term
            if np.all(np.abs(term) < 1e-17):
                break
        res[~small] = 1.0 - acc
    out[pos] = np.clip(res, 0.0, 1.0)
    return out if out.ndim else float(out)


def w_max_pdf(x):
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    pos = x > 0
    xv = x[pos]
    acc = np.zeros_like(xv)
    for k in range(0, 10_000):
        m = 2 * k + 1
        c = m**2 * np.pi**2 / 8.0
        term = (-1) ** k / m * np.exp(-c / xv**2) * 2.0 * c / xv**3
        acc += term
        if np.all(np.abs(term) < 1e-14):
            break
    out[pos] = 4.0 / np.pi * acc
    return out if out.ndim else float(out)


@lru_cache(maxsize=256)
def w_max_quantile(prob: float, tol: float = 1e-12) -> float:
    """Inverse of :func:`w_max_cdf` by bisection."""
    if not 0.0 < prob < 1.0:
        raise ValueError("prob must lie in (0, 1)")
    lo, hi = 1e-3, 1.0
    while w_max_cdf(hi) < prob:
        hi *= 2.0
    while hi - lo > tol * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if w_max_cdf(mid) < prob:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def w_max_moment(k: float) -> float:
    """``E W_max^k`` by integrating the survival function."""
    f = lambda x: k * x ** (k - 1) * (1.0 - w_max_cdf(x))
    val = integrate.quad(f, 0, 2, limit=200, epsabs=1e-13)[0]
    val += integrate.quad(f, 2, 12, limit=200, epsabs=1e-13)[0]
    return val


@lru_cache(maxsize=1)
def w_max_constants() -> dict:
    """Mean, sd, and the moments of ``W_max^2`` from the series."""
    m1, m2, m4, m6 = (w_max_moment(k) for k in (1, 2, 4, 6))
    var2 = m4 - m2**2
    skew2 = (m6 - 3 * m2 * m4 + 2 * m2**3) / var2**1.5
    return {
        "mean": m1,
        "mean_sq": m2,
        "sd": float(np.sqrt(m2 - m1**2)),
        "sd_sq": float(np.sqrt(var2)),
        "skew_sq": float(skew2),
        "q95": w_max_quantile(0.95),
    }


def w_horizon(delta_tail: float, sigma0_sq: float = 1.0) -> float:
    """``T`` with ``P(sigma0^2 W_max^2 > T) = delta_tail``."""
    return sigma0_sq * w_max_quantile(1.0 - delta_tail) ** 2


def occupation_tail(T: float, sigma0_sq: float = 1.0) -> float:
    """``E mu{t >= T : sigma0 |W(t)| >= t}`` in closed form."""
    r = np.sqrt(T / sigma0_sq)
    return sigma0_sq * (2.0 * (1.0 - r * r) * stats.norm.sf(r) + 2.0 * r * stats.norm.pdf(r))


@lru_cache(maxsize=256)
def occupation_horizon(delta_tail: float, sigma0_sq: float = 1.0) -> float:
    """Smallest ``T`` whose expected occupation beyond ``T`` is ``delta_tail``."""
    return float(optimize.brentq(lambda T: occupation_tail(T, sigma0_sq) - delta_tail,
                                 1e-9, 1e4 * sigma0_sq))


def tail_bound_horizon(delta_tail: float, sigma0_sq: float = 1.0) -> float:
    """Horizon from the crude bound ``P(exceed beyond T) <= 6.75 sigma0^2 / T``."""
    return 6.75 * sigma0_sq / delta_tail


def kiefer_horizon(delta_tail: float) -> float:
    """``T`` with ``P(K_max^2 > T) <= delta_tail``.

    Levy's inequality for the process ``s -> K(s, .)`` gives
    ``P(K_max >= x) <= 2 P(sup|B| >= x) <= 4 exp(-2 x^2)``.
    """
    return 0.5 * np.log(4.0 / delta_tail)


# ---------------------------------------------------------------------------
# path functionals


def w_max(path: GaussPath, bridge_correct: bool = False, rng: RngStream | None = None) -> float:
    """``max |W|`` over the path grid.

    With ``bridge_correct`` the continuous-time maximum between grid points is
    sampled from the conditional Brownian-bridge law using ``rng``.
    """
    v = path.scalar
    if not bridge_correct:
        return float(np.max(np.abs(v)))
    if rng is None:
        raise ValueError("bridge correction needs an rng")
    return bridge_corrected_max_abs(v, path.grid.points, rng)


def _sqrtm_psd(M: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(M)
    return (V * np.sqrt(np.clip(w, 0, None))) @ V.T


def g_p_max_sq(path: GaussPath, Sigma0, A) -> float:
    """``max_s (S W(s))' A (S W(s))`` with ``S = Sigma0^{1/2}``."""
    S = np.atleast_2d(np.asarray(Sigma0, dtype=float))
    A = np.atleast_2d(np.asarray(A, dtype=float))
    p = path.dim
    if S.shape != (p, p) or A.shape != (p, p):
        raise InvalidDimensionError("Sigma0 and A must be p x p with p = path.dim")
    M = _sqrtm_psd(S) @ A @ _sqrtm_psd(S)
    W = path.values
    return float(np.max(np.einsum("ij,jk,ik->i", W, M, W)))


def chi_p_max(path: GaussPath) -> float:
    """``max_s sum_i W_i(s)^2`` over the grid."""
    return float(np.max(np.sum(path.values**2, axis=1)))


def kiefer_max(sheet: KieferSheet, bridge_correct: bool = False,
               rng: RngStream | None = None) -> float:
    """``max |K|`` over the unit square.

    ``K(s, t) = s K0(1/s, t)`` is itself a Kiefer process, so its maximum over
    ``(0, 1] x [0, 1]`` has the law of ``max |K0|`` over the same square, which
    is what the simulated sheet provides.
    """
    if not bridge_correct:
        return float(np.max(np.abs(sheet.values)))
    if rng is None:
        raise ValueError("bridge correction needs an rng")
    return kiefer_refined_max_abs(sheet, rng)


@dataclass(frozen=True)
class CvmSup:
    value: float
    slice_at_one: float
    coarse_grid: bool


def cvm_sup(sheet: KieferSheet) -> CvmSup:
    """``sup_s int_0^1 K(s,t)^2 dt`` by the trapezoid rule in ``t``.

    ``coarse_grid`` flags t grids with fewer than 128 points.
    """
    t = sheet.t_grid.points
    ints = integrate.trapezoid(sheet.values**2, t, axis=1)
    return CvmSup(float(ints.max()), float(ints[-1]), t.size < 128)


def occupation_q(path_over_t: GaussPath, sigma0_sq: float = 1.0,
                 a_lower: float | None = None) -> float:
    """Lebesgue measure of ``{t >= a : sigma0 |W(t)| / t >= 1}`` (trapezoid).

    Equals ``sigma0^2 Q(a / sigma0^2)`` in law.
    """
    t = path_over_t.grid.points
    if a_lower is None:
        a_lower = t[0]
    if t[-1] <= a_lower:
        raise InvalidGridError("horizon T must exceed a_lower")
    w = path_over_t.scalar
    hit = (np.sqrt(sigma0_sq) * np.abs(w) >= t).astype(float)
    keep = t >= a_lower
    tt = t[keep]
    return float(np.sum(0.5 * (hit[keep][1:] + hit[keep][:-1]) * np.diff(tt)))


def last_exit_time(path_over_t: GaussPath, sigma0_sq: float = 1.0) -> float:
    """Last grid time with ``sigma0 |W(t)| >= t``; 0 if none."""
    t = path_over_t.grid.points
    hit = np.flatnonzero(np.sqrt(sigma0_sq) * np.abs(path_over_t.scalar) >= t)
    return float(t[hit[-1]]) if hit.size else 0.0


def drifted_w_max_sq(b: float, path: GaussPath, drifted: bool = False,
                     bridge_correct: bool = False, rng: RngStream | None = None) -> float:
    """``max_s |W(s) + b sqrt(s)|^2``; pass ``drifted=True`` for a path that
    already carries the drift."""
    v = path.scalar
    if not drifted:
        v = v + b * np.sqrt(path.grid.points)
    if bridge_correct:
        if rng is None:
            raise ValueError("bridge correction needs an rng")
        return bridge_corrected_max_abs(v, path.grid.points, rng) ** 2
    return float(np.max(np.abs(v))) ** 2


# ---------------------------------------------------------------------------
# density limit process


def gaussian_kernel_v_cov(s, t):
    """Covariance of the density-estimation V process for the normal kernel.

    ``cov(V(s), V(t)) = g(z) z^{2/5}``, ``z = min/max``, with
    ``g(z) = z^{1/5} int K(u) K(z^{1/5} u) du = z^{1/5} / sqrt(2 pi (1 + z^{2/5}))``.
    """
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    z = np.minimum(s, t) / np.maximum(s, t)
    return z**0.6 / np.sqrt(2.0 * np.pi * (1.0 + z**0.4))


def epanechnikov_v_cov(s, t):
    """V covariance for the unit-variance Epanechnikov kernel.

    With ``r = z^{1/5}``, ``int K(u) K(r u) du = 2 sqrt(5) C^2 (1 - (1 + r^2)/3 + r^2/5)``
    where ``C = 3 / (4 sqrt(5))``; at ``z = 1`` this is ``beta_K``.
    """
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    z = np.minimum(s, t) / np.maximum(s, t)
    r2 = z**0.4
    return z**0.6 * (2.0 * np.sqrt(5.0) * 9.0 / 80.0) * (1.0 - (1.0 + r2) / 3.0 + r2 / 5.0)


V_COVARIANCES = {"gaussian": gaussian_kernel_v_cov, "epanechnikov": epanechnikov_v_cov}


def v_cov_for_kernel(kernel):
    """Generic V covariance from a kernel callable, by quadrature."""

    @np.vectorize
    def cov(s, t):
        z = min(s, t) / max(s, t)
        c = z**0.2
        val = integrate.quad(lambda u: kernel(u) * kernel(c * u), -np.inf, np.inf)[0]
        return c * val * z**0.4

    return cov


@lru_cache(maxsize=8)
def _v_factor(t_max: float, count: int, kernel: str) -> tuple[TimeGrid, CovarianceFactor]:
    grid = TimeGrid(np.exp(np.linspace(0.0, np.log(t_max), count)))
    return grid, CovarianceFactor(covariance_matrix(V_COVARIANCES[kernel], grid))


def v_path(rng: RngStream, t_max: float = 1e4, count: int = 256,
           kernel: str = "gaussian") -> GaussPath:
    """V process on a log-spaced grid over ``[1, t_max]`` (normal kernel by default)."""
    grid, fac = _v_factor(float(t_max), int(count), kernel)
    return GaussPath(grid, fac.sample(rng))


def z_max_52(c: float, f: float, f2: float, beta_K: float, v_path: GaussPath,
             standardized: bool = False) -> float:
    """``(sup_{t>=1} |Z(t)|)^{5/2}`` with
    ``Z(t) = (c^2 f''/2 + c^{-1/2} f^{1/2} V(t)) / t^{2/5}``.

    ``v_path`` carries ``V`` with variance ``beta_K``; with ``standardized``
    it has unit variance and is rescaled by ``sqrt(beta_K)``.
    """
    if c <= 0 or f <= 0 or beta_K <= 0:
        raise ValueError("c, f and beta_K must be positive")
    t = v_path.grid.points
    if t[0] < 1.0 - 1e-12:
        raise InvalidGridError("V path must live on [1, T]")
    v = v_path.scalar * (np.sqrt(beta_K) if standardized else 1.0)
    z = (0.5 * c * c * f2 + np.sqrt(f / c) * v) / t**0.4
    return float(np.max(np.abs(z))) ** 2.5


# ---------------------------------------------------------------------------
# law sampling and quantile tables


def sample_law(law: LimitLawSpec, rng: RngStream, grid_points: int = 4096,
               bridge_correct: bool = True) -> float:
    """Draw one realization of ``law``.

    ``grid_points`` is the time resolution on [0, 1]. Sheets use at most 65
    points per side; the ``KMAX2`` maximum is then refined locally.
    """
    k = law.kind
    grid = TimeGrid.uniform(0.0, 1.0, grid_points)
    if k == LawKind.WMAX2:
        path = brownian_path(grid, rng)
        return law.sigma0_sq * w_max(path, bridge_correct, rng) ** 2
    if k in (LawKind.CHI_P_MAX, LawKind.KL_CHI):
        if law.p == 1:
            return w_max(brownian_path(grid, rng), bridge_correct, rng) ** 2
        return chi_p_max(multi_brownian_path(law.p, grid, rng))
    if k == LawKind.GPMAX2:
        return g_p_max_sq(multi_brownian_path(law.p, grid, rng), law.Sigma0, law.A)
    if k == LawKind.DRIFTED_WMAX2:
        path = drifted_root_path(law.drift_b, grid, rng)
        return drifted_w_max_sq(law.drift_b, path, drifted=True,
                                bridge_correct=bridge_correct, rng=rng)
    if k in (LawKind.KMAX2, LawKind.LAMBDA2):
        m = min(grid_points, 65) if k == LawKind.KMAX2 else min(grid_points, 129)
        sg = TimeGrid.uniform(1.0 / (m - 1), 1.0, m - 1)
        sheet = kiefer_sheet(sg, TimeGrid.uniform(0.0, 1.0, m), rng)
        if k == LawKind.KMAX2:
            return kiefer_max(sheet, bridge_correct, rng) ** 2
        return cvm_sup(sheet).value
    if k == LawKind.Q_OCC:
        T = occupation_horizon(1e-4, law.sigma0_sq)
        steps = max(grid_points, int(np.ceil(grid_points * T)))
        g = TimeGrid(np.linspace(0.0, T, steps))
        return occupation_q(brownian_path(g, rng), law.sigma0_sq, law.a_lower)
    if k == LawKind.ZMAX_52:
        c, f, f2, beta = law.density_params
        return z_max_52(c, f, f2, beta, v_path(rng, kernel=law.kernel), standardized=False)
    raise ValueError(f"unknown law {k}")


def _law_task(rng: RngStream, law_dict: dict, grid_points: int) -> float:
    return sample_law(LimitLawSpec(**law_dict), rng, grid_points)


def _cache_dir(cache_dir) -> Path:
    if cache_dir is not None:
        return Path(cache_dir)
    env = os.environ.get(CACHE_ENV)
    return Path(env) if env else Path.home() / ".cache" / "lastexit"


def _cache_key(law: LimitLawSpec, probs, replications, grid_points, seed) -> str:
    blob = json.dumps(
        {"law": law.params(), "probs": [float(p) for p in probs],
         "replications": replications, "grid_points": grid_points, "seed": seed,
         "tool_version": __version__},
        sort_keys=True,
    )
    return hashlib.sha256(blob.encode()).hexdigest()[:20]


def _atomic_write_json(path: Path, payload: dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".json")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def quantile_table(law: LimitLawSpec, probs, replications: int, rng: RngStream,
                   grid_points: int = 1024, cache_dir=None, use_cache: bool = True,
                   workers: int = 1, n_boot: int = 200) -> QuantileTable:
    """Simulated quantiles of ``law`` with bootstrap standard errors.

    Replication ``r`` uses ``RngStream(rng.seed, r)``. Results are cached as
    JSON under ``cache_dir`` (or ``$LASTEXIT_CACHE_DIR``), keyed by law,
    probabilities, replications, grid and seed.
    """
    from .mc_engine import ExperimentPlan, replicate

    if replications < 10_000:
        raise ValueError("quantile tables need at least 10^4 replications")
    probs = np.asarray(sorted(float(p) for p in probs))
    if np.any((probs <= 0) | (probs >= 1)):
        raise ValueError("probabilities must lie in (0, 1)")
    seed = rng.seed
    path = _cache_dir(cache_dir) / f"{law.kind.value.lower()}-{_cache_key(law, probs, replications, grid_points, seed)}.json"
    if use_cache and path.exists():
        try:
            with open(path) as fh:
                d = json.load(fh)
            return QuantileTable(law, np.asarray(d["probs"]), np.asarray(d["quants"]),
                                 np.asarray(d["se"]), int(d["replications"]),
                                 int(d["grid_points"]), int(d["seed"]))
        except (OSError, ValueError, KeyError, TypeError) as exc:
            warnings.warn(f"corrupt quantile cache {path.name} ({exc}); recomputing")
    law_dict = law.params()
    plan = ExperimentPlan(_law_task, {"law_dict": law_dict, "grid_points": grid_points},
                          replications, seed, workers)
    dist = replicate(plan)
    quants = dist.quantiles(probs)
    boot_rng = RngStream(seed, 2**63 + 1).gen
    vals = dist.sorted_values
    boots = np.empty((n_boot, probs.size))
    for b in range(n_boot):
        boots[b] = np.quantile(vals[boot_rng.integers(0, vals.size, vals.size)], probs)
    se = boots.std(axis=0, ddof=1)
    table = QuantileTable(law, probs, quants, se, replications, grid_points, seed)
    if use_cache:
        _atomic_write_json(path, {
            "law": law.kind.value, "params": law_dict, "probs": probs.tolist(),
            "quants": quants.tolist(), "se": se.tolist(), "replications": replications,
            "grid_points": grid_points, "seed": seed, "tool_version": __version__,
        })
    return table
