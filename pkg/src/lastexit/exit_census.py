"""Last-exit times and miss counts of estimator sequences.

For a stream, a target ``theta0``, a distance and a boundary ``eps`` the
census records every ``n <= horizon_n`` with ``dist(theta_n, theta0) >= eps``
and summarizes them in an :class:`ExitRecord`.
"""

from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError
from .limit_functionals import occupation_horizon, tail_bound_horizon, w_horizon
from .seq_models import EcdfStream, EstimatorStream


class DistanceKind(str, enum.Enum):
    ABS = "ABS"
    QUAD_FORM = "QUAD_FORM"
    MAHALANOBIS_TRUE = "MAHALANOBIS_TRUE"
    MAHALANOBIS_ESTIMATED = "MAHALANOBIS_ESTIMATED"
    KL_NORMAL = "KL_NORMAL"
    ECDF_SUP = "ECDF_SUP"
    ECDF_CVM = "ECDF_CVM"
    ECDF_L1 = "ECDF_L1"


_ECDF_ROW = {DistanceKind.ECDF_SUP: 0, DistanceKind.ECDF_CVM: 1, DistanceKind.ECDF_L1: 2}


def kl_normal_distance(mu, sigma, mu0: float, sigma0: float):
    """Kullback-Leibler distance from ``N(mu0, sigma0^2)`` to ``N(mu, sigma^2)``."""
    sigma = np.asarray(sigma, dtype=float)
    if sigma0 <= 0 or np.any(sigma <= 0):
        raise ValueError("standard deviations must be positive")
    mu = np.asarray(mu, dtype=float)
    out = np.log(sigma / sigma0) + (sigma0**2 + (mu0 - mu) ** 2) / (2.0 * sigma**2) - 0.5
    return np.maximum(out, 0.0) if out.ndim else float(max(out, 0.0))


def mahalanobis_estimated(theta_hat, theta0, Sigma_hat) -> float:
    """``sqrt((theta_hat - theta0)' Sigma_hat^{-1} (theta_hat - theta0))``.

    Returned as a root so it compares directly with ``eps``. A singular or
    non-finite ``Sigma_hat`` gives ``+inf``, which counts as a miss.
    """
    e = np.atleast_1d(np.asarray(theta_hat, dtype=float) - np.asarray(theta0, dtype=float))
    S = np.atleast_2d(np.asarray(Sigma_hat, dtype=float))
    if not np.all(np.isfinite(S)):
        return math.inf
    try:
        sol = np.linalg.solve(S, e)
    except np.linalg.LinAlgError:
        return math.inf
    if np.linalg.cond(S) > 1e14:
        return math.inf
    return float(math.sqrt(max(float(e @ sol), 0.0)))


@dataclass(frozen=True)
class DistanceSpec:
    """A distance between an estimate and the target.

    ``A`` is used by ``QUAD_FORM``, ``Sigma0`` by ``MAHALANOBIS_TRUE`` and
    ``(mu0, sigma0)`` by ``KL_NORMAL``. ``MAHALANOBIS_ESTIMATED`` asks the
    stream for its plug-in precision. The ``ECDF_*`` kinds apply to
    :class:`EcdfStream` only.
    """

    kind: DistanceKind = DistanceKind.ABS
    A: np.ndarray | None = None
    Sigma0: np.ndarray | None = None
    mu0: float = 0.0
    sigma0: float = 1.0

    def __post_init__(self):
        kind = DistanceKind(self.kind)
        object.__setattr__(self, "kind", kind)
        for name in ("A", "Sigma0"):
            m = getattr(self, name)
            if m is None:
                continue
            m = np.atleast_2d(np.asarray(m, dtype=float))
            if not np.allclose(m, m.T):
                raise ValueError(f"{name} must be symmetric")
            object.__setattr__(self, name, m)
        if kind == DistanceKind.QUAD_FORM and self.A is None:
            raise ValueError("QUAD_FORM needs A")
        if kind == DistanceKind.MAHALANOBIS_TRUE:
            if self.Sigma0 is None:
                raise ValueError("MAHALANOBIS_TRUE needs Sigma0")
            if np.linalg.eigvalsh(self.Sigma0).min() <= 0:
                raise ValueError("Sigma0 must be positive definite")
        if kind == DistanceKind.KL_NORMAL and self.sigma0 <= 0:
            raise ValueError("sigma0 must be positive")

    def evaluate(self, est, theta0, stream: EstimatorStream | None = None) -> np.ndarray:
        """Distances for each row of ``est``; NaN rows stay NaN."""
        est = np.asarray(est, dtype=float)
        k = self.kind
        if k in _ECDF_ROW:
            return np.atleast_2d(est)[:, _ECDF_ROW[k]]
        if k == DistanceKind.KL_NORMAL:
            est = np.atleast_2d(est)
            mu, sig = est[:, 0], est[:, 1]
            out = np.full(mu.shape, np.inf)
            ok = sig > 0
            out[np.isnan(sig)] = np.nan
            out[ok] = kl_normal_distance(mu[ok], sig[ok], self.mu0, self.sigma0)
            return out
        if est.ndim == 1 and np.ndim(theta0) == 0:
            return np.abs(est - float(theta0))
        e = np.atleast_2d(est) - np.asarray(theta0, dtype=float)
        if k == DistanceKind.ABS:
            return np.sqrt(np.sum(e * e, axis=1))
        if k == DistanceKind.QUAD_FORM:
            q = np.einsum("ij,jk,ik->i", e, self.A, e)
        elif k == DistanceKind.MAHALANOBIS_TRUE:
            q = np.einsum("ij,jk,ik->i", e, np.linalg.inv(self.Sigma0), e)
        else:
            if stream is None:
                raise ValueError("MAHALANOBIS_ESTIMATED needs the stream's plug-in precision")
            P = stream.plugin_precision(np.where(np.isnan(e), 0.0, e) + np.asarray(theta0))
            with np.errstate(invalid="ignore"):
                q = np.einsum("ij,ijk,ik->i", e, P, e)
            bad = ~np.all(np.isfinite(P.reshape(P.shape[0], -1)), axis=1)
            q[bad] = np.inf
        q = np.where(np.isnan(q), np.nan, np.maximum(q, 0.0))
        return np.sqrt(q)

    def metric_scale(self, Sigma0) -> tuple[float, int]:
        """Largest eigenvalue and rank of the limit covariance in this metric."""
        if self.kind in (DistanceKind.MAHALANOBIS_ESTIMATED, DistanceKind.KL_NORMAL):
            # plug-in metrics standardize a correctly specified model
            p = 1 if Sigma0 is None else int(np.atleast_2d(Sigma0).shape[0])
            return 1.0, p
        S = np.atleast_2d(np.asarray(Sigma0, dtype=float))
        if self.kind == DistanceKind.MAHALANOBIS_TRUE:
            A = np.linalg.inv(self.Sigma0)
        else:
            A = np.eye(S.shape[0]) if self.A is None else self.A
        w, V = np.linalg.eigh(S)
        root = (V * np.sqrt(np.clip(w, 0, None))) @ V.T
        ev = np.linalg.eigvalsh(root @ A @ root)
        return float(ev.max()), int(np.sum(ev > 1e-12 * max(ev.max(), 1e-300)))


@dataclass(frozen=True)
class HorizonPolicy:
    """How far to run each census.

    With ``T_multiplier`` set the horizon is ``ceil(T_multiplier / eps^2)``.
    Otherwise ``T`` is chosen so that an exceedance beyond the horizon has
    probability at most ``delta_tail`` under the limit law: the ``W_max``
    quantile (and the occupation tail) when the limit variance is known,
    the ``6.75 sigma0^2 / T`` bound otherwise.
    """

    delta_tail: float = 1e-3
    T_multiplier: float | None = None

    def __post_init__(self):
        if not 0.0 < self.delta_tail <= 0.05:
            raise ValueError("delta_tail must lie in (0, 0.05]")
        if self.T_multiplier is not None and self.T_multiplier <= 0:
            raise ValueError("T_multiplier must be positive")

    def horizon_T(self, scale: float | None, p: int = 1) -> float:
        if self.T_multiplier is not None:
            return float(self.T_multiplier)
        if scale is None:
            return tail_bound_horizon(self.delta_tail, 1.0)
        d = self.delta_tail / p
        # chi^2_{p,max} <= sum of p independent W_max^2, so a union bound suffices
        return p * max(w_horizon(d, scale), occupation_horizon(d, scale))

    def horizon_n(self, epsilon: float, scale: float | None, p: int = 1,
                  kl: bool = False) -> int:
        T = self.horizon_T(scale, p)
        return int(math.ceil(T / (2.0 * epsilon) if kl else T / epsilon**2))


def first_miss_index(a: float, epsilon: float) -> int:
    """Smallest integer ``n >= a / eps^2`` (guarded against rounding)."""
    return int(math.ceil(round(a / epsilon**2, 9)))


@dataclass(frozen=True)
class ExitRecord:
    """Census summary; ``last_exit_n = 0`` means no exceedance at all."""

    epsilon: float
    last_exit_n: int
    total_misses: int
    miss_count_from: dict
    horizon_n: int
    delta_tail: float
    replication_id: int = 0

    def __post_init__(self):
        if self.last_exit_n > self.horizon_n:
            raise ValueError("last exit beyond horizon")

    @property
    def censored_flag(self) -> bool:
        """Last exceedance in the final 10% of the horizon."""
        return self.last_exit_n > 0.9 * self.horizon_n

    @classmethod
    def from_mask(cls, mask, epsilon, a_levels, horizon_n, delta_tail, replication_id=0):
        idx = np.flatnonzero(np.asarray(mask, dtype=bool)) + 1
        counts = {float(a): int(np.sum(idx >= first_miss_index(a, epsilon))) for a in a_levels}
        return cls(float(epsilon), int(idx[-1]) if idx.size else 0, int(idx.size), counts,
                   int(horizon_n), float(delta_tail), replication_id)

    @classmethod
    def from_counts(cls, row, epsilon, a_levels, horizon_n, delta_tail, replication_id=0):
        """From ``[total, last, counts...]`` as produced by the compiled kernels."""
        counts = {float(a): int(c) for a, c in zip(a_levels, row[2:])}
        return cls(float(epsilon), int(row[1]), int(row[0]), counts, int(horizon_n),
                   float(delta_tail), replication_id)

    def as_row(self, a_levels) -> list:
        return [self.replication_id, self.epsilon, self.last_exit_n, self.total_misses,
                *[self.miss_count_from[float(a)] for a in a_levels], self.horizon_n,
                self.delta_tail, int(self.censored_flag)]


def csv_header(a_levels) -> list[str]:
    return ["replication_id", "epsilon", "last_exit_n", "total_misses",
            *[f"miss_count_a={float(a):g}" for a in a_levels], "horizon_n", "delta_tail",
            "censored_flag"]


def records_to_csv(records: Sequence[ExitRecord], a_levels, fh=None) -> str | None:
    """Write records as CSV to ``fh``, or return the text when ``fh`` is None."""
    buf = io.StringIO() if fh is None else fh
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(csv_header(a_levels))
    for r in records:
        w.writerow(r.as_row(a_levels))
    return buf.getvalue() if fh is None else None


def _scale_of(stream: EstimatorStream, dist: DistanceSpec):
    meta = stream.meta
    if meta.horizon_scale is not None:
        return meta.horizon_scale, 1
    if meta.Sigma0 is not None:
        return dist.metric_scale(meta.Sigma0)
    if meta.sigma0_sq is not None:
        if dist.kind in (DistanceKind.ABS, DistanceKind.QUAD_FORM):
            return meta.sigma0_sq * (1.0 if dist.A is None else float(dist.A.ravel()[0])), 1
        return 1.0, 1
    return None, 1


def _observations(data, n: int) -> np.ndarray:
    if callable(data):
        return data(n)
    x = np.asarray(data)
    if x.shape[0] < n:
        raise ConfigError(f"data source has {x.shape[0]} observations, horizon needs {n}")
    return x[:n]


def miss_mask(stream: EstimatorStream, theta0, dist: DistanceSpec, epsilon: float,
              x) -> np.ndarray:
    """Boolean exceedance indicator for ``n = 1..len(x)`` of a fresh stream."""
    if dist.kind == DistanceKind.ABS and hasattr(stream, "abs_miss") and np.ndim(theta0) == 0:
        return stream.abs_miss(x, float(theta0), epsilon)
    d = dist.evaluate(stream.estimates(x), theta0, stream)
    with np.errstate(invalid="ignore"):
        return np.where(np.isnan(d), False, d >= epsilon)


def run_exit(stream: EstimatorStream, theta0, dist: DistanceSpec, epsilon: float,
             a_levels: Sequence[float], policy: HorizonPolicy, data,
             replication_id: int = 0, horizon_n: int | None = None) -> ExitRecord:
    """Exact census of ``{n <= horizon_n : dist(theta_n, theta0) >= eps}``.

    ``data`` is either an array of observations or a callable ``size ->
    array``. Indices where the estimate is undefined are never misses.
    """
    return _run(stream, theta0, dist, epsilon, a_levels, policy, data, replication_id,
                horizon_n)[0]


def _run(stream, theta0, dist, epsilon, a_levels, policy, data, replication_id,
         horizon_n, x=None):
    if not epsilon > 0:
        raise ConfigError("epsilon must be > 0")
    if stream.n != 0:
        raise ConfigError("run_exit needs a fresh stream")
    if any(a < 0 for a in a_levels):
        raise ConfigError("a levels must be >= 0")
    if horizon_n is None:
        scale, p = _scale_of(stream, dist)
        horizon_n = policy.horizon_n(epsilon, scale, p, kl=dist.kind == DistanceKind.KL_NORMAL)
    if horizon_n < 100:
        raise ConfigError(f"horizon {horizon_n} < 100; decrease epsilon")
    if x is None:
        x = _observations(data, horizon_n)
    if dist.kind in _ECDF_ROW:
        if not isinstance(stream, EcdfStream):
            raise ConfigError("ECDF distances need an EcdfStream")
        thr = [first_miss_index(a, epsilon) for a in a_levels]
        rows = stream.census(x, epsilon, thr)
        rec = ExitRecord.from_counts(rows[_ECDF_ROW[dist.kind]], epsilon, a_levels,
                                     horizon_n, policy.delta_tail, replication_id)
        return rec, x
    mask = miss_mask(stream, theta0, dist, epsilon, x)
    return (ExitRecord.from_mask(mask, epsilon, a_levels, horizon_n, policy.delta_tail,
                                 replication_id), x)


def run_exit_paired(streams: Sequence[EstimatorStream], data, theta0, dist: DistanceSpec,
                    epsilon: float, a_levels: Sequence[float], policy: HorizonPolicy,
                    replication_id: int = 0, horizon_n: int | None = None,
                    dists: Sequence[DistanceSpec] | None = None) -> tuple[ExitRecord, ...]:
    """Run several streams over the same observations.

    All streams must declare the same target (when they declare one). The
    horizon is the largest of the individual horizons.
    """
    targets = [s.meta.theta0 for s in streams if s.meta.theta0 is not None]
    for t in targets[1:]:
        if not np.allclose(np.asarray(t, dtype=float), np.asarray(targets[0], dtype=float)):
            raise ConfigError("paired streams declare different targets")
    if targets and not np.allclose(np.asarray(targets[0], dtype=float),
                                   np.asarray(theta0, dtype=float)):
        raise ConfigError("theta0 differs from the streams' declared target")
    dists = list(dists) if dists is not None else [dist] * len(streams)
    if horizon_n is None:
        hs = []
        for s, d in zip(streams, dists):
            scale, p = _scale_of(s, d)
            hs.append(policy.horizon_n(epsilon, scale, p, kl=d.kind == DistanceKind.KL_NORMAL))
        horizon_n = max(hs)
    x = _observations(data, horizon_n)
    return tuple(_run(s, theta0, d, epsilon, a_levels, policy, None, replication_id,
                      horizon_n, x=x)[0] for s, d in zip(streams, dists))
