"""Discretized Gaussian paths: Brownian motion, bridges, Kiefer sheets."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import (
    InvalidDimensionError,
    InvalidGridError,
    InvalidSamplerError,
    NotPSDError,
    UnsupportedGridError,
)
from ._kernels import kiefer_refine_max
from .rng import RngStream

# Bridge-max candidate margin in units of the interval standard deviation.
# P(bridge max exceeds endpoint max by 4 sd) <= exp(-32).
_BRIDGE_MARGIN = 4.0


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing, finite, non-negative time points."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=float)
        if pts.ndim != 1 or pts.size < 1:
            raise InvalidGridError("grid must be a non-empty 1-d sequence")
        if not np.all(np.isfinite(pts)):
            raise InvalidGridError("grid points must be finite")
        if pts[0] < 0:
            raise InvalidGridError("grid must start at a non-negative time")
        if pts.size > 1 and np.any(np.diff(pts) <= 0):
            raise InvalidGridError("grid points must be strictly increasing")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @classmethod
    def uniform(cls, start: float, stop: float, count: int) -> "TimeGrid":
        return cls(np.linspace(start, stop, int(count)))

    @property
    def count(self) -> int:
        return self.points.size

    def is_equispaced(self, rtol: float = 1e-9) -> bool:
        if self.count < 2:
            return True
        d = np.diff(self.points)
        return bool(np.all(np.abs(d - d[0]) <= rtol * d[0]))

    def __len__(self):
        return self.count


@dataclass(frozen=True)
class GaussPath:
    """Path values on a grid; ``values`` has shape ``(count, dim)``."""

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] != self.grid.count:
            raise InvalidDimensionError("values must have one row per grid point")
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def scalar(self) -> np.ndarray:
        if self.dim != 1:
            raise InvalidDimensionError(f"expected a scalar path, got dim={self.dim}")
        return self.values[:, 0]


@dataclass(frozen=True)
class KieferSheet:
    """Values of the sheet indexed ``values[i, j] = K0(s_i, t_j)``."""

    s_grid: TimeGrid
    t_grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        if self.t_grid.points[-1] > 1.0:
            raise InvalidGridError("t grid must lie in [0, 1]")
        if self.values.shape != (self.s_grid.count, self.t_grid.count):
            raise InvalidDimensionError("sheet shape does not match grids")


def _increment_scales(grid: TimeGrid) -> np.ndarray:
    # sd of the first value and each increment
    pts = grid.points
    return np.sqrt(np.diff(pts, prepend=0.0))


def _brownian_values(grid: TimeGrid, rng: RngStream, p: int) -> np.ndarray:
    z = rng.normal((grid.count, p))
    z *= _increment_scales(grid)[:, None]
    return np.cumsum(z, axis=0)


def brownian_path(grid: TimeGrid, rng: RngStream) -> GaussPath:
    """Standard Brownian motion on ``grid``.

    The value at the first grid point is ``N(0, points[0])``, which is exactly
    zero when the grid starts at 0.
    """
    return GaussPath(grid, _brownian_values(grid, rng, 1))


def multi_brownian_path(p: int, grid: TimeGrid, rng: RngStream) -> GaussPath:
    """``p`` independent Brownian coordinates on a common grid."""
    if int(p) != p or p < 1:
        raise InvalidDimensionError("p must be a positive integer")
    return GaussPath(grid, _brownian_values(grid, rng, int(p)))


def drifted_root_path(b: float, grid: TimeGrid, rng: RngStream) -> GaussPath:
    """``W(s) + b*sqrt(s)`` on a grid inside [0, 1]."""
    if grid.points[-1] > 1.0:
        raise InvalidGridError("grid must lie in [0, 1]")
    w = _brownian_values(grid, rng, 1)
    return GaussPath(grid, w + b * np.sqrt(grid.points)[:, None])


def kiefer_sheet(s_grid: TimeGrid, t_grid: TimeGrid, rng: RngStream) -> KieferSheet:
    """Kiefer sheet with covariance ``(s1^s2)(t1^t2 - t1 t2)``.

    Rows are cumulative sums over ``s`` of independent Brownian bridges in
    ``t``, each scaled by the square root of its ``s`` increment.
    """
    s = s_grid.points
    t = t_grid.points
    if s[-1] > 1.0 or s[0] < 0:
        raise InvalidGridError("s grid must lie in (0, 1]")
    if t[-1] > 1.0:
        raise InvalidGridError("t grid must lie in [0, 1]")
    if not s_grid.is_equispaced():
        raise UnsupportedGridError("s grid must be equi-spaced")
    # Brownian motion on t plus the point 1 when absent, then pin at 1.
    has_one = t[-1] == 1.0
    tt = t if has_one else np.append(t, 1.0)
    dt_sd = np.sqrt(np.diff(tt, prepend=0.0))
    z = rng.normal((s.size, tt.size)) * dt_sd
    w = np.cumsum(z, axis=1)
    bridges = w - tt[None, :] * w[:, -1:]
    if has_one:
        bridges[:, -1] = 0.0
    else:
        bridges = bridges[:, :-1]
    if t[0] == 0.0:
        bridges[:, 0] = 0.0
    scale = np.sqrt(np.diff(s, prepend=0.0))
    vals = np.cumsum(bridges * scale[:, None], axis=0)
    return KieferSheet(s_grid, t_grid, vals)


class CovarianceFactor:
    """Pivoted Cholesky factor ``L`` with ``L @ L.T`` close to the covariance.

    Pivots below ``rtol * max(diag)`` are truncated to zero. A negative pivot
    larger in magnitude than that tolerance raises :class:`NotPSDError`.
    """

    def __init__(self, cov: np.ndarray, rtol: float = 1e-10):
        cov = np.array(cov, dtype=float)
        if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
            raise InvalidDimensionError("covariance must be square")
        if not np.allclose(cov, cov.T, rtol=1e-12, atol=1e-14):
            raise NotPSDError("covariance is not symmetric", pivot=np.nan)
        m = cov.shape[0]
        scale = max(float(np.max(np.abs(np.diag(cov)))), np.finfo(float).tiny)
        tol = rtol * scale
        d = np.diag(cov).copy()
        L = np.zeros((m, m))
        perm = np.arange(m)
        rank = 0
        for k in range(m):
            j = k + int(np.argmax(d[perm[k:]]))
            pivot = d[perm[j]]
            if pivot < -tol:
                raise NotPSDError(f"negative pivot {pivot:.3e} at step {k}", pivot=pivot)
            if pivot <= tol:
                break
            perm[[k, j]] = perm[[j, k]]
            pk = perm[k]
            root = np.sqrt(pivot)
            L[pk, k] = root
            rest = perm[k + 1:]
            L[rest, k] = (cov[rest, pk] - L[rest, :k] @ L[pk, :k]) / root
            d[rest] -= L[rest, k] ** 2
            rank += 1
        # any remaining diagonal must not be significantly negative
        if rank < m:
            resid = d[perm[rank:]]
            if resid.min() < -tol:
                raise NotPSDError("negative residual pivot", pivot=float(resid.min()))
        self.L = L[:, :rank]
        self.rank = rank

    def sample(self, rng: RngStream, size: int | None = None) -> np.ndarray:
        if size is None:
            return self.L @ rng.normal(self.rank)
        return rng.normal((size, self.rank)) @ self.L.T


def covariance_matrix(cov_fn: Callable[[float, float], float], grid: TimeGrid) -> np.ndarray:
    pts = grid.points
    s, t = np.meshgrid(pts, pts, indexing="ij")
    try:
        cov = np.asarray(cov_fn(s, t), dtype=float)
        if cov.shape != s.shape:
            raise ValueError
    except Exception:
        cov = np.array([[cov_fn(a, b) for b in pts] for a in pts], dtype=float)
    return cov


def gaussian_path_from_covariance(
    cov_fn: Callable[[float, float], float],
    grid: TimeGrid,
    rng: RngStream,
    factor: CovarianceFactor | None = None,
) -> GaussPath:
    """Zero-mean Gaussian path with ``cov(X(s), X(t)) = cov_fn(s, t)``.

    Pass a prebuilt ``factor`` to amortize the factorization over many paths.
    """
    if factor is None:
        factor = CovarianceFactor(covariance_matrix(cov_fn, grid))
    return GaussPath(grid, factor.sample(rng))


@dataclass(frozen=True)
class IncrementSampler:
    """Increment distribution with declared mean and variance."""

    name: str
    draw: Callable[[np.random.Generator, int], np.ndarray] = field(repr=False)
    mean: float = 0.0
    variance: float = 1.0
    abs_moments: dict = field(default_factory=dict, repr=False)


def _rademacher(gen, size):
    return 2.0 * gen.integers(0, 2, size) - 1.0


def _uniform_unit(gen, size):
    return (2.0 * gen.random(size) - 1.0) * np.sqrt(3.0)


NORMAL_INCREMENTS = IncrementSampler("normal", lambda g, n: g.standard_normal(n))
RADEMACHER_INCREMENTS = IncrementSampler("rademacher", _rademacher)
UNIFORM_INCREMENTS = IncrementSampler("uniform", _uniform_unit)
INCREMENT_SAMPLERS = {
    s.name: s for s in (NORMAL_INCREMENTS, RADEMACHER_INCREMENTS, UNIFORM_INCREMENTS)
}


def random_walk_path(
    m: int, horizon_c: float, increment_sampler: IncrementSampler, rng: RngStream
) -> GaussPath:
    """Pre-limit path ``t -> S_[mt] / sqrt(m)`` on ``{1/m, ..., floor(c m)/m}``."""
    if int(m) != m or m < 1:
        raise ValueError("m must be a positive integer")
    if horizon_c < 1:
        raise ValueError("horizon_c must be >= 1")
    if increment_sampler.mean != 0.0 or increment_sampler.variance != 1.0:
        raise InvalidSamplerError(
            f"sampler {increment_sampler.name!r} must have mean 0 and variance 1"
        )
    count = int(np.floor(horizon_c * m))
    x = np.asarray(increment_sampler.draw(rng.gen, count), dtype=float)
    grid = TimeGrid(np.arange(1, count + 1) / m)
    return GaussPath(grid, np.cumsum(x) / np.sqrt(m))


def bridge_corrected_max_abs(
    values: np.ndarray, times: np.ndarray, rng: RngStream, variance_rate=1.0
) -> float:
    """Continuous-time ``max |X|`` of a Brownian-like path given grid values.

    Between adjacent grid points the path is treated as a Brownian bridge with
    the given variance rate (scalar or per-interval array). Exact bridge
    maxima are drawn only on intervals whose endpoints come within a few
    interval standard deviations of the grid maximum; elsewhere the exceedance
    probability is below ``exp(-32)``.
    """
    v = np.asarray(values, dtype=float)
    dt = np.diff(np.asarray(times, dtype=float))
    var = np.broadcast_to(np.asarray(variance_rate, dtype=float) * dt, dt.shape)
    a = v[:-1]
    b = v[1:]
    grid_max = float(np.max(np.abs(v)))
    ends = np.maximum(np.abs(a), np.abs(b))
    cand = np.flatnonzero(ends > grid_max - _BRIDGE_MARGIN * np.sqrt(var))
    if cand.size == 0:
        return grid_max
    a = a[cand]
    b = b[cand]
    w = var[cand]
    d2 = (b - a) ** 2
    e = rng.exponential((2, cand.size))
    hi = 0.5 * (a + b + np.sqrt(d2 + 2.0 * w * e[0]))
    lo = 0.5 * (a + b - np.sqrt(d2 + 2.0 * w * e[1]))
    return max(grid_max, float(hi.max()), float(-lo.min()))


def kiefer_refined_max_abs(sheet: KieferSheet, rng: RngStream, min_cell: float = 2.0**-20,
                           z: float = 4.0, max_rounds: int = 64) -> float:
    """Continuous ``max |K0|`` over ``[0, s_max] x [0, 1]`` given the sheet.

    Cells near the running maximum are split at their midpoints by exact
    conditional sampling until their sides fall below ``min_cell``; cells
    whose corner values sit more than ``z`` local standard deviations below
    the maximum are dropped. The ``t`` grid must run from 0 to 1.
    """
    s = sheet.s_grid.points
    t = sheet.t_grid.points
    if t[0] != 0.0 or t[-1] != 1.0:
        raise UnsupportedGridError("refinement needs a t grid from 0 to 1")
    if s[0] > 0.0:
        s = np.concatenate(([0.0], s))
        V = np.vstack([np.zeros((1, t.size)), sheet.values])
    else:
        V = np.array(sheet.values, dtype=float)
    seed = int(rng.gen.integers(0, 2**31 - 1))
    return float(kiefer_refine_max(V, s, t, seed, float(min_cell), float(z), int(max_rounds)))
