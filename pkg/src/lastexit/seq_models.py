"""Streaming estimator sequences over i.i.d. data.

Every stream supports two equivalent interfaces: ``push``/``estimate`` for
one observation at a time, and ``estimates(x)`` which returns the whole
sequence ``theta_1, ..., theta_n`` for a fresh stream fed with ``x``. The
census in :mod:`lastexit.exit_census` uses the vectorized form, and tests
check that both agree.
"""

from __future__ import annotations

import bisect
import heapq
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy import integrate

from . import _kernels
from .errors import UndefinedEstimateError
from .rng import RngStream


@dataclass(frozen=True)
class ModelMeta:
    """Target and limit covariance of a stream, when known."""

    theta0: object = None
    sigma0_sq: float | None = None
    Sigma0: np.ndarray | None = None
    # conservative scalar scale for horizon selection when the limit has drift
    horizon_scale: float | None = None


class EstimatorStream:
    """Base class; subclasses implement ``_push``, ``_value`` and ``estimates``."""

    n_min = 1
    dim = 1

    def __init__(self, meta: ModelMeta | None = None):
        self.n = 0
        self.meta = meta or ModelMeta()

    def push(self, x) -> None:
        self._push(x)
        self.n += 1

    def extend(self, xs) -> None:
        for x in xs:
            self.push(x)

    @property
    def estimate(self):
        if self.n < self.n_min:
            raise UndefinedEstimateError(
                f"{type(self).__name__} needs at least {self.n_min} observations"
            )
        return self._value()

    def value(self):
        return self.estimate

    def estimates(self, x) -> np.ndarray:
        """Estimates after each of ``len(x)`` pushes into a fresh stream.

        Rows with ``n < n_min`` are NaN. Shape ``(n,)`` or ``(n, dim)``.
        """
        fresh = type(self).__new__(type(self))
        fresh.__dict__.update(self._fresh_state())
        out = []
        for xi in x:
            fresh.push(xi)
            out.append(fresh._value() if fresh.n >= self.n_min else np.full(self.dim, np.nan))
        return np.asarray(out, dtype=float).reshape(len(out), -1).squeeze(axis=1) \
            if self.dim == 1 else np.asarray(out, dtype=float)

    def _fresh_state(self) -> dict:
        raise NotImplementedError

    def plugin_precision(self, est: np.ndarray) -> np.ndarray:
        """Inverse of the plug-in limit covariance at each estimate row."""
        raise NotImplementedError(f"{type(self).__name__} has no plug-in covariance")


# ---------------------------------------------------------------------------
# scalar location streams


class MeanStream(EstimatorStream):
    """Running sample mean."""

    def __init__(self, theta0: float = 0.0, sigma0_sq: float | None = 1.0):
        super().__init__(ModelMeta(theta0, sigma0_sq))
        self._s = 0.0

    def _fresh_state(self):
        return {"n": 0, "meta": self.meta, "_s": 0.0}

    def _push(self, x):
        self._s += float(x)

    def _value(self):
        return self._s / self.n

    def estimates(self, x):
        x = np.asarray(x, dtype=float)
        return np.cumsum(x) / np.arange(1, x.size + 1)


class MedianStream(EstimatorStream):
    """Running sample median kept in two heaps (O(log n) per push)."""

    def __init__(self, theta0: float = 0.0, sigma0_sq: float | None = math.pi / 2):
        super().__init__(ModelMeta(theta0, sigma0_sq))
        self._lo: list[float] = []  # negated max-heap
        self._hi: list[float] = []

    def _fresh_state(self):
        return {"n": 0, "meta": self.meta, "_lo": [], "_hi": []}

    def _push(self, x):
        x = float(x)
        if not self._lo or x <= -self._lo[0]:
            heapq.heappush(self._lo, -x)
        else:
            heapq.heappush(self._hi, x)
        if len(self._lo) > len(self._hi) + 1:
            heapq.heappush(self._hi, -heapq.heappop(self._lo))
        elif len(self._hi) > len(self._lo):
            heapq.heappush(self._lo, -heapq.heappop(self._hi))

    def _value(self):
        if len(self._lo) > len(self._hi):
            return -self._lo[0]
        return 0.5 * (self._hi[0] - self._lo[0])

    def estimates(self, x):
        return _kernels.running_median(np.ascontiguousarray(x, dtype=float))


def _psi(x: np.ndarray, theta: float) -> float:
    return float(np.sum(np.arctan(x - theta)))


class ArctanMStream(EstimatorStream):
    """M-estimator solving ``sum arctan(x_i - theta) = 0``.

    Each update brackets the root around the previous estimate, bisects, and
    polishes with Newton steps until ``|sum arctan| <= 1e-10``.
    """

    TOL = 1e-10

    def __init__(self, theta0: float = 0.0, sigma0_sq: float | None = None):
        if sigma0_sq is None:
            sigma0_sq = arctan_limit_variance()
        super().__init__(ModelMeta(theta0, sigma0_sq))
        self._x: list[float] = []
        self._theta = 0.0

    def _fresh_state(self):
        return {"n": 0, "meta": self.meta, "_x": [], "_theta": 0.0}

    def _push(self, x):
        self._x.append(float(x))
        xs = np.asarray(self._x)
        if len(xs) == 1:
            self._theta = xs[0]
            return
        th = self._theta
        step = 1.0
        lo, hi = th - step, th + step
        # psi is strictly decreasing: psi(lo) > 0 > psi(hi) brackets the root
        while _psi(xs, lo) < 0:
            lo -= step
            step *= 2
        step = 1.0
        while _psi(xs, hi) > 0:
            hi += step
            step *= 2
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if _psi(xs, mid) > 0:
                lo = mid
            else:
                hi = mid
            if hi - lo < 1e-6:
                break
        th = 0.5 * (lo + hi)
        for _ in range(50):
            r = xs - th
            val = float(np.sum(np.arctan(r)))
            if abs(val) <= self.TOL:
                break
            deriv = -float(np.sum(1.0 / (1.0 + r * r)))
            new = th - val / deriv
            th = new if lo <= new <= hi else 0.5 * (lo + hi)
            if _psi(xs, th) > 0:
                lo = th
            else:
                hi = th
        assert lo <= th <= hi, "bracket lost"
        self._theta = th

    def _value(self):
        return self._theta

    def residual(self) -> float:
        return _psi(np.asarray(self._x), self._theta)

    def abs_miss(self, x, theta0: float, eps: float) -> np.ndarray:
        """``|theta_n - theta0| >= eps`` for every n, without solving.

        By monotonicity, ``theta_n >= theta0 + eps`` iff
        ``sum arctan(x_i - theta0 - eps) >= 0`` and symmetrically below.
        """
        x = np.asarray(x, dtype=float)
        up = np.cumsum(np.arctan(x - (theta0 + eps)))
        dn = np.cumsum(np.arctan(x - (theta0 - eps)))
        return (up >= 0) | (dn <= 0)


@lru_cache(maxsize=1)
def arctan_limit_variance() -> float:
    """``E psi^2 / (E psi')^2`` for ``psi = arctan`` at standard normal data."""
    phi = lambda z: math.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)
    num = integrate.quad(lambda z: math.atan(z) ** 2 * phi(z), -np.inf, np.inf)[0]
    den = integrate.quad(lambda z: phi(z) / (1 + z * z), -np.inf, np.inf)[0]
    return num / den**2


# ---------------------------------------------------------------------------
# smooth functions of averages


class SkewnessStream(EstimatorStream):
    """``(1/n) sum (x_i - xbar)^3`` from running power sums of orders 1..3."""

    def __init__(self, theta0: float = 0.0, sigma0_sq: float | None = 6.0):
        super().__init__(ModelMeta(theta0, sigma0_sq))
        self._s = np.zeros(3)

    def _fresh_state(self):
        return {"n": 0, "meta": self.meta, "_s": np.zeros(3)}

    def _push(self, x):
        x = float(x)
        self._s += (x, x * x, x * x * x)

    @staticmethod
    def _formula(s1, s2, s3, n):
        m1 = s1 / n
        return s3 / n - 3.0 * m1 * (s2 / n) + 2.0 * m1**3

    def _value(self):
        return float(self._formula(*self._s, self.n))

    def estimates(self, x):
        x = np.asarray(x, dtype=float)
        n = np.arange(1, x.size + 1)
        return self._formula(np.cumsum(x), np.cumsum(x * x), np.cumsum(x * x * x), n)


class NormalMLEStream(EstimatorStream):
    """``(mean, sqrt(second central moment))``, defined from ``n = 2``."""

    n_min = 2
    dim = 2

    def __init__(self, mu0: float = 0.0, sigma0: float = 1.0, beta2: float = 0.0):
        sig = np.diag([sigma0**2, sigma0**2 * (beta2 + 2.0) / 4.0])
        super().__init__(ModelMeta(np.array([mu0, sigma0]), None, sig))
        self._s = np.zeros(2)

    def _fresh_state(self):
        return {"n": 0, "meta": self.meta, "_s": np.zeros(2)}

    def _push(self, x):
        x = float(x)
        self._s += (x, x * x)

    def _value(self):
        m = self._s[0] / self.n
        return np.array([m, math.sqrt(max(self._s[1] / self.n - m * m, 0.0))])

    def estimates(self, x):
        x = np.asarray(x, dtype=float)
        n = np.arange(1, x.size + 1)
        m = np.cumsum(x) / n
        v = np.maximum(np.cumsum(x * x) / n - m * m, 0.0)
        out = np.column_stack([m, np.sqrt(v)])
        out[: self.n_min - 1] = np.nan
        return out

    def fisher_information(self, sigma=None) -> np.ndarray:
        s = self.meta.theta0[1] if sigma is None else sigma
        return np.diag([1.0 / s**2, 2.0 / s**2])

    def plugin_precision(self, est):
        est = np.atleast_2d(est)
        s2 = est[:, 1] ** 2
        out = np.zeros((est.shape[0], 2, 2))
        with np.errstate(divide="ignore"):
            out[:, 0, 0] = 1.0 / s2
            out[:, 1, 1] = 2.0 / s2
        return out


# ---------------------------------------------------------------------------
# discrete data


class BinomialStream(EstimatorStream):
    """``p_hat = Y_n / n`` or the minimax ``(sqrt(n) p_hat + 1/2)/(sqrt(n) + 1)``."""

    def __init__(self, p0: float, minimax: bool = False):
        if not 0.0 < p0 < 1.0:
            raise ValueError("p0 must lie in (0, 1)")
        v = p0 * (1 - p0)
        # the minimax limit is sigma0 W(t) + (1/2 - p0) t^{1/2}; bound its scale
        hs = (math.sqrt(v) + abs(0.5 - p0)) ** 2 if minimax else None
        super().__init__(ModelMeta(p0, v, None, hs))
        self.minimax = minimax
        self._y = 0

    def _fresh_state(self):
        return {"n": 0, "meta": self.meta, "minimax": self.minimax, "_y": 0}

    def _push(self, x):
        self._y += int(x)

    def _value(self):
        return float(self._formula(self._y, self.n))

    def _formula(self, y, n):
        phat = y / n
        if not self.minimax:
            return phat
        r = np.sqrt(n)
        return (r * phat + 0.5) / (r + 1.0)

    def estimates(self, x):
        x = np.asarray(x)
        n = np.arange(1, x.size + 1)
        return self._formula(np.cumsum(x), n)


def binomial_streams(p0: float) -> tuple[BinomialStream, BinomialStream]:
    """``(plain, minimax)`` pair meant to share the same Bernoulli draws."""
    return BinomialStream(p0, False), BinomialStream(p0, True)


def minimax_drift(p: float) -> float:
    """``b(p) = (1/2 - p) / sqrt(p (1 - p))``."""
    return (0.5 - p) / math.sqrt(p * (1 - p))


class MultinomialStream(EstimatorStream):
    """Category frequencies; observations are category indices."""

    def __init__(self, p_probs):
        p = np.asarray(p_probs, dtype=float)
        if np.any(p <= 0) or not math.isclose(p.sum(), 1.0, rel_tol=0, abs_tol=1e-12):
            raise ValueError("probabilities must be positive and sum to 1")
        super().__init__(ModelMeta(p, None, np.diag(p) - np.outer(p, p)))
        self.dim = p.size
        self._c = np.zeros(p.size)

    def _fresh_state(self):
        return {"n": 0, "meta": self.meta, "dim": self.dim, "_c": np.zeros(self.dim)}

    def _push(self, x):
        self._c[int(x)] += 1

    def _value(self):
        return self._c / self.n

    def estimates(self, x):
        x = np.asarray(x, dtype=np.int64)
        onehot = np.zeros((x.size, self.dim))
        onehot[np.arange(x.size), x] = 1.0
        return np.cumsum(onehot, axis=0) / np.arange(1, x.size + 1)[:, None]

    def true_precision(self) -> np.ndarray:
        return np.diag(1.0 / self.meta.theta0)

    def plugin_precision(self, est):
        est = np.atleast_2d(est)
        out = np.zeros((est.shape[0], self.dim, self.dim))
        with np.errstate(divide="ignore"):
            idx = np.arange(self.dim)
            out[:, idx, idx] = 1.0 / est
        return out


# ---------------------------------------------------------------------------
# empirical distribution function


@dataclass(frozen=True)
class EcdfDistances:
    sup_dist: float
    cvm_sq: float
    l1: float


def ecdf_distances(u_sorted: np.ndarray) -> EcdfDistances:
    """Exact distances between the ECDF of sorted uniforms and the identity."""
    u = np.asarray(u_sorted, dtype=float)
    n = u.size
    i = np.arange(1, n + 1)
    sup = float(max(np.max(i / n - u), np.max(u - (i - 1) / n)))
    cvm = float((1.0 / (12 * n) + np.sum((u - (2 * i - 1) / (2.0 * n)) ** 2)) / n)
    pts = np.concatenate([[0.0], u, [1.0]])
    lev = np.arange(n + 1) / n
    a = lev - pts[:-1]
    b = lev - pts[1:]
    same = a * b >= 0
    l1 = float(np.sum(np.where(same, 0.5 * np.abs(a + b) * (pts[1:] - pts[:-1]),
                               0.5 * (a * a + b * b))))
    return EcdfDistances(sup, cvm, l1)


class EcdfStream(EstimatorStream):
    """Empirical CDF distances to a continuous true CDF.

    Data are mapped to uniforms through ``true_cdf``; each push inserts into
    a sorted list and recomputes the distances exactly (O(n)).
    """

    def __init__(self, true_cdf: Callable = lambda x: x):
        super().__init__(ModelMeta(None, None))
        self.true_cdf = true_cdf
        self._u: list[float] = []

    def _fresh_state(self):
        return {"n": 0, "meta": self.meta, "true_cdf": self.true_cdf, "_u": []}

    def _push(self, x):
        bisect.insort(self._u, float(self.true_cdf(x)))

    def _value(self):
        return ecdf_distances(np.asarray(self._u))

    def estimates(self, x):
        out = []
        u: list[float] = []
        for xi in x:
            bisect.insort(u, float(self.true_cdf(xi)))
            d = ecdf_distances(np.asarray(u))
            out.append((d.sup_dist, d.cvm_sq, d.l1))
        return np.asarray(out)

    def census(self, x, eps: float, thresholds, nbuckets: int | None = None) -> np.ndarray:
        """Exact miss census for (sup, CvM root, L1); see ``ecdf_census``."""
        u = np.ascontiguousarray(self.true_cdf(np.asarray(x, dtype=float)), dtype=float)
        if nbuckets is None:
            nbuckets = int(2 ** round(math.log2(min(1024, max(64, 2.5 * math.sqrt(u.size))))))
        thr = np.asarray(thresholds, dtype=np.int64)
        return _kernels.ecdf_census(u, float(eps), thr, nbuckets)


# ---------------------------------------------------------------------------
# kernel density


def _gauss(u):
    return np.exp(-0.5 * u * u) / math.sqrt(2 * math.pi)


def _gauss_d(u):
    return -u * _gauss(u)


_EPA_C = 3.0 / (4.0 * math.sqrt(5.0))


def _epa(u):
    u = np.asarray(u, dtype=float)
    return np.where(np.abs(u) < math.sqrt(5.0), _EPA_C * (1.0 - u * u / 5.0), 0.0)


def _epa_d(u):
    u = np.asarray(u, dtype=float)
    return np.where(np.abs(u) < math.sqrt(5.0), -_EPA_C * 2.0 * u / 5.0, 0.0)


_KERNELS = {
    "gaussian": (_gauss, _gauss_d, 10.0, 1.0 / (2 * math.sqrt(math.pi)), 1.0 / (4 * math.sqrt(math.pi))),
    "epanechnikov": (_epa, _epa_d, math.sqrt(5.0), 3.0 / (5.0 * math.sqrt(5.0)),
                     3.0 * math.sqrt(5.0) / 50.0),
}


@dataclass(frozen=True)
class KernelSpec:
    """Unit-variance symmetric kernel with bandwidth ``h_n = c n^{-rate}``.

    ``rate_exponent`` is 1/5 for density estimation and 1/7 for the
    derivative. Moments are checked by quadrature at construction.
    """

    kernel: str = "gaussian"
    c: float = 1.0
    rate_exponent: float = 0.2
    beta_K: float = field(init=False)
    gamma_K: float = field(init=False)
    support: float = field(init=False)

    def __post_init__(self):
        if self.kernel not in _KERNELS:
            raise ValueError(f"unknown kernel {self.kernel!r}")
        if self.c <= 0:
            raise ValueError("bandwidth constant c must be positive")
        K, Kd, sup, beta, gamma = _KERNELS[self.kernel]
        object.__setattr__(self, "beta_K", beta)
        object.__setattr__(self, "gamma_K", gamma)
        object.__setattr__(self, "support", sup)
        lim = min(sup, 12.0)
        q = lambda g: integrate.quad(g, -lim, lim, epsabs=1e-12, limit=200)[0]
        checks = {
            "mass": (q(K), 1.0),
            "mean": (q(lambda u: u * K(u)), 0.0),
            "variance": (q(lambda u: u * u * K(u)), 1.0),
            "beta_K": (q(lambda u: K(u) ** 2), beta),
            "gamma_K": (q(lambda u: Kd(u) ** 2), gamma),
        }
        for name, (got, want) in checks.items():
            if abs(got - want) > 1e-6:
                raise ValueError(f"kernel {self.kernel}: {name} {got} != {want}")
        if not self.beta_K > 0:
            raise ValueError("beta_K must be positive")

    @property
    def K(self):
        return _KERNELS[self.kernel][0]

    @property
    def Kprime(self):
        return _KERNELS[self.kernel][1]

    def bandwidth(self, n):
        return self.c * np.asarray(n, dtype=float) ** (-self.rate_exponent)


class KernelDensityStream(EstimatorStream):
    """Kernel estimate of ``f(x0)`` (or ``f'(x0)``) with ``h_n = c n^{-rate}``.

    The raw sample is kept sorted; each estimate sums the kernel over the
    window ``|x - x0| < support * h_n`` found by bisection (10 bandwidths for
    the normal kernel, the exact support for compact kernels).
    """

    def __init__(self, x0: float, spec: KernelSpec, true_f: float | None = None,
                 derivative: bool = False):
        if spec.c <= 0:
            raise ValueError("bandwidth constant c must be positive")
        super().__init__(ModelMeta(true_f, None))
        self.x0 = float(x0)
        self.spec = spec
        self.derivative = derivative
        self._xs: list[float] = []

    def _fresh_state(self):
        return {"n": 0, "meta": self.meta, "x0": self.x0, "spec": self.spec,
                "derivative": self.derivative, "_xs": []}

    def _push(self, x):
        bisect.insort(self._xs, float(x))

    def _value(self):
        return self._eval(self._xs, self.n)

    def _eval(self, xs, n):
        h = float(self.spec.bandwidth(n))
        r = self.spec.support * h
        lo = bisect.bisect_right(xs, self.x0 - r)
        hi = bisect.bisect_left(xs, self.x0 + r)
        u = (self.x0 - np.asarray(xs[lo:hi])) / h
        if self.derivative:
            return float(np.sum(self.spec.Kprime(u)) / (n * h * h))
        return float(np.sum(self.spec.K(u)) / (n * h))

    def naive(self, x) -> float:
        """Full-sum evaluation over all of ``x`` (reference)."""
        x = np.asarray(x, dtype=float)
        n = x.size
        h = float(self.spec.bandwidth(n))
        u = (self.x0 - x) / h
        if self.derivative:
            return float(np.sum(self.spec.Kprime(u)) / (n * h * h))
        return float(np.sum(self.spec.K(u)) / (n * h))

    def estimates(self, x):
        xs: list[float] = []
        out = np.empty(len(x))
        for i, xi in enumerate(x):
            bisect.insort(xs, float(xi))
            out[i] = self._eval(xs, i + 1)
        return out

    def abs_miss(self, x, theta0: float, eps: float) -> np.ndarray:
        if self.spec.kernel != "epanechnikov":
            return np.abs(self.estimates(x) - theta0) >= eps
        x = np.ascontiguousarray(x, dtype=float)
        n = x.size
        npow = np.zeros(n + 1)
        npow[1:] = np.arange(1, n + 1, dtype=float) ** (-self.spec.rate_exponent)
        est = _kernels.epanechnikov_estimates(x, self.x0, self.spec.c, npow, self.derivative)
        return np.abs(est - theta0) >= eps


def kernel_q_counts(x, x0: float, cs, target: float, eps: float, rate: float,
                    derivative: bool, thresholds=(1,)) -> np.ndarray:
    """Epanechnikov miss census for several bandwidth constants at once.

    Returns rows ``[total_misses, last_exit_n, counts from thresholds...]``,
    one per entry of ``cs``.
    """
    x = np.ascontiguousarray(x, dtype=float)
    n = x.size
    npow = np.zeros(n + 1)
    npow[1:] = np.arange(1, n + 1, dtype=float) ** (-rate)
    return _kernels.epanechnikov_q_counts(
        x, float(x0), np.ascontiguousarray(cs, dtype=float), float(target), float(eps),
        npow, float(rate), bool(derivative), np.asarray(thresholds, dtype=np.int64))


# ---------------------------------------------------------------------------
# data generators


def _poly_draw(gen, size, coef):
    # density sum_k coef[k] x^k on [-1, 1], by rejection from the uniform
    coef = np.asarray(coef, dtype=float)
    fmax = float(np.sum(np.abs(coef)))
    out = np.empty(size)
    got = 0
    while got < size:
        m = max(2 * (size - got), 64)
        u = gen.uniform(-1.0, 1.0, m)
        v = gen.uniform(0.0, fmax, m)
        acc = u[v < np.polynomial.polynomial.polyval(u, coef)]
        take = min(acc.size, size - got)
        out[got:got + take] = acc[:take]
        got += take
    return out


def draw(dist: str, params: dict, rng: RngStream, size: int) -> np.ndarray:
    """Draw ``size`` i.i.d. observations from a named distribution."""
    g = rng.gen
    p = params or {}
    if dist == "normal":
        return p.get("loc", 0.0) + p.get("scale", 1.0) * g.standard_normal(size)
    if dist == "uniform":
        return g.uniform(p.get("low", 0.0), p.get("high", 1.0), size)
    if dist == "exponential":
        return p.get("scale", 1.0) * g.standard_exponential(size)
    if dist == "bernoulli":
        return (g.random(size) < p["p"]).astype(np.int64)
    if dist == "categorical":
        probs = np.asarray(p["probs"], dtype=float)
        return np.minimum(np.searchsorted(np.cumsum(probs), g.random(size), side="right"),
                          probs.size - 1)
    if dist == "polynomial":
        return _poly_draw(g, size, p["coef"])
    raise ValueError(f"unknown distribution {dist!r}")
