"""Closed-form efficiency calculators and the bandwidth-constant objectives."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, special, stats

from .errors import QuadratureError


def are_scalar(sigma1_sq: float, sigma2_sq: float) -> float:
    """Asymptotic relative efficiency ``sigma1^2 / sigma2^2``."""
    if sigma1_sq <= 0 or sigma2_sq <= 0:
        raise ValueError("variances must be positive")
    return sigma1_sq / sigma2_sq


def eq_trace(A, Sigma0) -> float:
    """Limit mean ``Tr(A Sigma0)`` of ``eps^2 Q_eps`` under the distance ``A``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    S = np.atleast_2d(np.asarray(Sigma0, dtype=float))
    if A.shape != S.shape or A.shape[0] != A.shape[1]:
        raise ValueError("A and Sigma0 must be square with equal shapes")
    return float(np.trace(A @ S))


def are_trace(A, Sigma1, Sigma2) -> float:
    """``Tr(A Sigma1) / Tr(A Sigma2)``."""
    den = eq_trace(A, Sigma2)
    if den == 0:
        raise ValueError("Tr(A Sigma2) is zero")
    num = eq_trace(A, Sigma1)
    if num <= 0 or den < 0:
        raise ValueError("traces must be positive")
    return num / den


def eq_chisq_excess(b: float, p: int = 1) -> float:
    """``E (chi2_p - b) I{chi2_p >= b} = p P(chi2_{p+2} >= b) - b P(chi2_p >= b)``.

    This is the limit of ``eps^2 E Q_eps(b)`` for a ``p``-dimensional
    Mahalanobis census.
    """
    if b < 0:
        raise ValueError("b must be >= 0")
    if p < 1:
        raise ValueError("p must be a positive integer")
    return float(p * stats.chi2.sf(b, p + 2) - b * stats.chi2.sf(b, p))


@dataclass(frozen=True)
class SandwichSpec:
    J0: np.ndarray
    K_info: np.ndarray

    def __post_init__(self):
        J = np.atleast_2d(np.asarray(self.J0, dtype=float))
        K = np.atleast_2d(np.asarray(self.K_info, dtype=float))
        if J.shape != K.shape:
            raise ValueError("J0 and K_info must have equal shapes")
        for name, m in (("J0", J), ("K_info", K)):
            if not np.allclose(m, m.T):
                raise ValueError(f"{name} must be symmetric")
        if np.linalg.eigvalsh(J).min() <= 0:
            raise ValueError("J0 must be positive definite")
        object.__setattr__(self, "J0", J)
        object.__setattr__(self, "K_info", K)


def sandwich(spec: SandwichSpec) -> np.ndarray:
    """``J0^{-1} K J0^{-1}``."""
    try:
        Jinv = np.linalg.inv(spec.J0)
    except np.linalg.LinAlgError as exc:
        raise ValueError("J0 is singular") from exc
    return Jinv @ spec.K_info @ Jinv


def normal_model_sandwich(beta2: float) -> np.ndarray:
    """Limit covariance of the normal MLE ``(mu, sigma)`` in the coordinates
    standardized by the model information, for data with excess kurtosis
    ``beta2`` and zero skewness: ``diag(1, 1 + beta2/2)``."""
    if beta2 <= -2:
        raise ValueError("beta2 must exceed -2")
    return np.diag([1.0, 1.0 + 0.5 * beta2])


def skewness_limit_var(alpha3: float, alpha4: float, alpha6: float, tau: float) -> float:
    """``(9 + alpha6 - 6 alpha4 - alpha3^2) tau^6`` for the sample third
    central moment; ``alpha_k`` are standardized central moments."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    v = (9.0 + alpha6 - 6.0 * alpha4 - alpha3**2) * tau**6
    if v < 0:
        raise ValueError(f"infeasible moments: limit variance {v} < 0")
    return v


# ---------------------------------------------------------------------------
# bandwidth constants


def abs_normal_moment(mu: float, q: float, rtol: float = 1e-9) -> float:
    """``E |mu + Z|^q`` for standard normal ``Z`` by adaptive quadrature.

    The core ``(-8, 8)`` is split at the kink ``z = -mu``; the tails are
    added separately. Raises :class:`QuadratureError` above ``rtol``.
    """
    f = lambda z: abs(mu + z) ** q * math.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)
    pts = sorted({-8.0, 8.0, min(max(-mu, -8.0), 8.0)})
    total = 0.0
    err = 0.0
    for lo, hi in zip(pts[:-1], pts[1:]):
        if hi > lo:
            v, e = integrate.quad(f, lo, hi, epsabs=0, epsrel=1e-12, limit=200)
            total += v
            err += e
    for lo, hi in ((-np.inf, -8.0), (8.0, np.inf)):
        v, e = integrate.quad(f, lo, hi, epsabs=1e-300, epsrel=1e-12, limit=200)
        total += v
        err += e
    if not err <= rtol * abs(total):
        raise QuadratureError(f"E|mu+Z|^{q} relative error {err / abs(total):.2e}",
                              err / abs(total))
    return total


def abs_normal_moment_closed(q: float) -> float:
    """``E |Z|^q = 2^{q/2} Gamma((q+1)/2) / sqrt(pi)``."""
    return 2 ** (q / 2) * special.gamma((q + 1) / 2) / math.sqrt(math.pi)


def bandwidth_paper_objective(a: float, inner_exponent: float = 2.5) -> float:
    """``a^{-5/4} E |a^{inner}/2 + N(0,1)|^{5/2}`` with ``a = c / c0``.

    Proportional to the limit of ``eps^{5/2} E Q_eps`` for the density
    estimate with ``h_n = c n^{-1/5}``. A direct computation of the bias and
    standard deviation of the limit process gives ``inner_exponent = 5/2``;
    ``5/4`` is offered as the alternative form.
    """
    if a <= 0:
        raise ValueError("a must be positive")
    return a ** (-1.25) * abs_normal_moment(0.5 * a**inner_exponent, 2.5)


def derivative_objective(a: float) -> float:
    """``a^{-21/4} E |(sqrt(3)/2) a^{7/2} + N(0,1)|^{7/2}``.

    Proportional to the limit of ``eps^{7/2} E Q'_eps`` for the derivative
    estimate with ``h_n = c n^{-1/7}`` and ``c = a c0``.
    """
    if a <= 0:
        raise ValueError("a must be positive")
    return a ** (-5.25) * abs_normal_moment(0.5 * math.sqrt(3.0) * a**3.5, 3.5)


def mse_objective(a: float, target: str = "density") -> float:
    """Squared-error analogue normalized to be minimal at ``a = 1``."""
    if a <= 0:
        raise ValueError("a must be positive")
    if target == "density":
        return a**4 / 4.0 + 1.0 / a
    return a**4 / 4.0 + 1.0 / (3.0 * a**3)


def golden_argmin(fun, lo: float = 0.5, hi: float = 2.0, tol: float = 1e-5) -> float:
    """Golden-section minimizer on ``[lo, hi]`` for a unimodal ``fun``."""
    r = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c, d = b - r * (b - a), a + r * (b - a)
    fc, fd = fun(c), fun(d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - r * (b - a)
            fc = fun(c)
        else:
            a, c, fc = c, d, fd
            d = a + r * (b - a)
            fd = fun(d)
    return 0.5 * (a + b)


def is_unimodal(fun, lo: float = 0.5, hi: float = 2.0, points: int = 50) -> bool:
    """Values on a grid decrease then increase."""
    v = np.array([fun(a) for a in np.linspace(lo, hi, points)])
    k = int(np.argmin(v))
    return bool(np.all(np.diff(v[: k + 1]) < 0) and np.all(np.diff(v[k:]) > 0))


def bandwidth_argmin(inner_exponent: float = 2.5) -> float:
    return golden_argmin(lambda a: bandwidth_paper_objective(a, inner_exponent))


def derivative_bandwidth_argmin() -> float:
    return golden_argmin(derivative_objective)


class BandwidthTarget(str, enum.Enum):
    DENSITY = "DENSITY"
    DERIVATIVE = "DERIVATIVE"


@dataclass(frozen=True)
class BandwidthProblem:
    """Optimal-MSE constant ``c0`` for ``h_n = c n^{-rate}``.

    ``curvature`` is ``f''(x)`` for the density and ``f'''(x)`` for the
    derivative; ``kernel_const`` is ``beta_K`` or ``gamma_K`` respectively.
    """

    target: BandwidthTarget
    f: float
    curvature: float
    kernel_const: float
    c0: float = field(init=False)

    def __post_init__(self):
        t = BandwidthTarget(self.target)
        object.__setattr__(self, "target", t)
        if self.f <= 0 or self.kernel_const <= 0 or self.curvature == 0:
            raise ValueError("need f > 0, kernel constant > 0 and nonzero curvature")
        if t == BandwidthTarget.DENSITY:
            c0 = (self.kernel_const * self.f / self.curvature**2) ** 0.2
        else:
            c0 = (3.0 * self.kernel_const * self.f / self.curvature**2) ** (1.0 / 7.0)
        object.__setattr__(self, "c0", c0)

    @property
    def rate(self) -> float:
        return 0.2 if self.target == BandwidthTarget.DENSITY else 1.0 / 7.0

    @property
    def k(self) -> float:
        """Natural boundary scale: the limit sd of the estimate at ``c0``
        is ``k`` times ``n^{-2/5}`` (density) or ``n^{-2/7}`` (derivative)."""
        if self.target == BandwidthTarget.DENSITY:
            return math.sqrt(self.kernel_const * self.f / self.c0)
        return math.sqrt(self.kernel_const * self.f / self.c0**3)

    def objective(self, a: float) -> float:
        if self.target == BandwidthTarget.DENSITY:
            return bandwidth_paper_objective(a, 2.5)
        return derivative_objective(a)

    def argmin(self) -> float:
        return golden_argmin(self.objective)
