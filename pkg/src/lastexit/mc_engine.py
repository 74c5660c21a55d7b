"""Deterministic replicated experiments and summaries of simulated laws."""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ReplicationError
from .rng import RngStream


@dataclass(frozen=True)
class EmpiricalDist:
    """Sorted sample of a scalar statistic."""

    sorted_values: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.sort(np.asarray(self.sorted_values, dtype=float).ravel())
        if v.size < 1:
            raise ValueError("empirical distribution must be non-empty")
        v.setflags(write=False)
        object.__setattr__(self, "sorted_values", v)

    @property
    def n(self) -> int:
        return self.sorted_values.size

    def mean(self) -> float:
        return float(np.mean(self.sorted_values))

    def se_mean(self) -> float:
        if self.n < 2:
            return float("nan")
        return float(np.std(self.sorted_values, ddof=1) / np.sqrt(self.n))

    def quantile(self, q: float) -> float:
        return quantile(self, q)

    def quantiles(self, probs) -> np.ndarray:
        return np.quantile(self.sorted_values, np.asarray(probs, dtype=float))

    def cdf(self, x):
        return np.searchsorted(self.sorted_values, x, side="right") / self.n

    def moments(self) -> tuple[float, float, float]:
        return moments(self)

    def ks(self, cdf: Callable) -> float:
        return ks_distance(self, cdf)


@dataclass(frozen=True)
class ExperimentPlan:
    """A replicated task.

    ``task(rng, **params)`` must be a module-level callable (so it can run in
    worker processes) returning a float or a fixed-length sequence of floats.
    Replication ``r`` receives ``RngStream(base_seed, r)``.
    """

    task: Callable
    params: dict
    replications: int
    base_seed: int
    workers: int = 1
    experiment_id: str = ""

    def __post_init__(self):
        if self.replications < 1:
            raise ValueError("replications must be >= 1")


def _run_block(task, params, base_seed, start, stop):
    out = []
    for r in range(start, stop):
        try:
            out.append(np.atleast_1d(np.asarray(task(RngStream(base_seed, r), **params), dtype=float)))
        except Exception as exc:  # noqa: BLE001 - re-raised with index
            raise ReplicationError(f"replication {r} failed: {exc!r}", r) from exc
    return start, np.vstack(out)


def _blocks(R: int, workers: int):
    nblk = max(1, min(R, workers * 8))
    edges = np.linspace(0, R, nblk + 1).astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def run_replications(plan: ExperimentPlan) -> np.ndarray:
    """Raw outputs, one row per replication in replication order."""
    workers = max(1, int(plan.workers or 1))
    R = plan.replications
    if workers == 1 or R < 2:
        return _run_block(plan.task, plan.params, plan.base_seed, 0, R)[1]
    rows = [None] * R
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futs = [pool.submit(_run_block, plan.task, plan.params, plan.base_seed, a, b)
                for a, b in _blocks(R, workers)]
        for fut in futs:
            start, block = fut.result()
            for i, row in enumerate(block):
                rows[start + i] = row
    return np.vstack(rows)


def replicate(plan: ExperimentPlan):
    """Run ``plan``; returns an :class:`EmpiricalDist` for scalar tasks and a
    list of them (one per output column) otherwise."""
    out = run_replications(plan)
    prov = {"experiment": plan.experiment_id or getattr(plan.task, "__name__", "task"),
            "seed": plan.base_seed, "replications": plan.replications}
    dists = [EmpiricalDist(out[:, j], prov) for j in range(out.shape[1])]
    return dists[0] if len(dists) == 1 else dists


def default_workers() -> int:
    return max(1, len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count() or 1)


# ---------------------------------------------------------------------------
# summaries


def _values(d) -> np.ndarray:
    v = d.sorted_values if isinstance(d, EmpiricalDist) else np.sort(np.asarray(d, dtype=float))
    if v.size == 0:
        raise ValueError("empty distribution")
    return v


def quantile(d, q: float) -> float:
    """Type-7 (linear interpolation) quantile."""
    if not 0.0 <= q <= 1.0:
        raise ValueError("q must lie in [0, 1]")
    return float(np.quantile(_values(d), q))


def moments(d) -> tuple[float, float, float]:
    """``(mean, sd, skewness)`` with population (divide-by-n) definitions."""
    v = _values(d)
    m = float(np.mean(v))
    c = v - m
    sd = float(np.sqrt(np.mean(c * c)))
    skew = float(np.mean(c**3) / sd**3) if sd > 0 else 0.0
    return m, sd, skew


def ks_distance(d, cdf: Callable) -> float:
    """``sup |F_hat - F|`` evaluated at the sample points (both one-sided gaps)."""
    v = _values(d)
    n = v.size
    F = np.asarray(cdf(v), dtype=float)
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - F), np.max(F - (i - 1) / n)))


def ks_two_sample(d1, d2) -> float:
    v1 = _values(d1)
    v2 = _values(d2)
    pts = np.concatenate([v1, v2])
    F1 = np.searchsorted(v1, pts, side="right") / v1.size
    F2 = np.searchsorted(v2, pts, side="right") / v2.size
    return float(np.max(np.abs(F1 - F2)))


@dataclass(frozen=True)
class ComparisonProbs:
    p_less: float
    p_equal: float
    p_greater: float
    n: int

    def ci(self, which: str = "p_less", z: float = 1.96) -> tuple[float, float]:
        p = getattr(self, which)
        h = z * math.sqrt(p * (1 - p) / self.n)
        return p - h, p + h

    def se(self, which: str = "p_less") -> float:
        p = getattr(self, which)
        return math.sqrt(p * (1 - p) / self.n)


def compare_prob(pairs) -> ComparisonProbs:
    """``P(x < y)``, ``P(x = y)``, ``P(x > y)`` with normal-approximation CIs."""
    arr = np.asarray(pairs, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] == 0:
        raise ValueError("pairs must be a non-empty (n, 2) array")
    x, y = arr[:, 0], arr[:, 1]
    n = arr.shape[0]
    return ComparisonProbs(float(np.sum(x < y)) / n, float(np.sum(x == y)) / n,
                           float(np.sum(x > y)) / n, n)


def catalan_partial_sum(k_max: int) -> float:
    """``sum_{k=0}^{k_max} (-1)^k / (2k+1)^2``."""
    k = np.arange(k_max + 1, dtype=float)
    return math.fsum(((-1.0) ** k) / (2 * k + 1) ** 2)


def catalan_constant() -> float:
    """Catalan's constant to about 1e-15.

    Averages consecutive partial sums of the alternating series, which
    cancels the leading tail term.
    """
    N = 200_000
    k = np.arange(N, dtype=float)
    terms = ((-1.0) ** k) / (2 * k + 1) ** 2
    s = math.fsum(terms)
    return s + 0.5 * ((-1.0) ** N) / (2 * N + 1) ** 2
