"""Named model presets and module-level replication tasks.

A model is described by a plain dict (``{"name": "mean", ...}``) so that it
can come from a JSON config and travel to worker processes. Tasks return
flat float arrays; :func:`split_records` turns them back into
:class:`ExitRecord` objects.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import _kernels
from .efficiency import BandwidthProblem, skewness_limit_var
from .errors import ConfigError
from .exit_census import (
    DistanceKind,
    DistanceSpec,
    ExitRecord,
    HorizonPolicy,
    first_miss_index,
    run_exit,
    run_exit_paired,
)
from .gauss_paths import INCREMENT_SAMPLERS
from .limit_functionals import kiefer_horizon
from .rng import RngStream
from .seq_models import (
    ArctanMStream,
    BinomialStream,
    EcdfStream,
    KernelSpec,
    MeanStream,
    MedianStream,
    MultinomialStream,
    NormalMLEStream,
    SkewnessStream,
    draw,
    kernel_q_counts,
)

# standardized central moments (alpha3, alpha4, alpha6) of the data laws
_MOMENTS = {"normal": (0.0, 3.0, 15.0), "exponential": (2.0, 9.0, 265.0)}
_SQRT3 = math.sqrt(3.0)


@dataclass
class Model:
    stream: object
    data: str
    data_params: dict
    theta0: object
    dist: DistanceSpec


def build_model(spec: dict) -> Model:
    """Instantiate a fresh stream, data law, target and distance from a dict.

    Names: ``mean``, ``median``, ``arctan``, ``skewness`` (option ``data``
    in {normal, exponential}), ``normal_mle`` (``data`` in {normal,
    uniform}; ``distance`` in {mahalanobis_true, mahalanobis_estimated,
    kl}), ``multinomial`` (``probs``; ``distance`` in {true, estimated}),
    ``binomial`` (``p``, ``minimax``), ``ecdf`` (``distance`` in {sup, cvm,
    l1}).
    """
    spec = dict(spec)
    name = spec.pop("name")
    data = spec.pop("data", None)
    if name == "mean":
        return Model(MeanStream(0.0, 1.0), "normal", {}, 0.0, DistanceSpec())
    if name == "median":
        return Model(MedianStream(0.0, math.pi / 2), "normal", {}, 0.0, DistanceSpec())
    if name == "arctan":
        return Model(ArctanMStream(0.0), "normal", {}, 0.0, DistanceSpec())
    if name == "skewness":
        data = data or "normal"
        if data not in _MOMENTS:
            raise ConfigError(f"skewness model supports data {sorted(_MOMENTS)}")
        a3, a4, a6 = _MOMENTS[data]
        s2 = skewness_limit_var(a3, a4, a6, 1.0)
        # exponential(1) has third central moment 2
        theta0 = 0.0 if data == "normal" else 2.0
        return Model(SkewnessStream(theta0, s2), data, {}, theta0, DistanceSpec())
    if name == "normal_mle":
        data = data or "normal"
        if data == "normal":
            beta2, params = 0.0, {}
        elif data == "uniform":
            beta2, params = -1.2, {"low": -_SQRT3, "high": _SQRT3}
        else:
            raise ConfigError("normal_mle supports data normal or uniform")
        kind = spec.pop("distance", "mahalanobis_true")
        stream = NormalMLEStream(0.0, 1.0, beta2)
        if kind == "mahalanobis_true":
            dist = DistanceSpec(DistanceKind.MAHALANOBIS_TRUE, Sigma0=np.diag([1.0, 0.5]))
        elif kind == "mahalanobis_estimated":
            dist = DistanceSpec(DistanceKind.MAHALANOBIS_ESTIMATED)
        elif kind == "kl":
            dist = DistanceSpec(DistanceKind.KL_NORMAL, mu0=0.0, sigma0=1.0)
        else:
            raise ConfigError(f"unknown normal_mle distance {kind!r}")
        return Model(stream, data, params, np.array([0.0, 1.0]), dist)
    if name == "multinomial":
        probs = np.asarray(spec.pop("probs", [1 / 3, 1 / 3, 1 / 3]), dtype=float)
        kind = spec.pop("distance", "true")
        stream = MultinomialStream(probs)
        if kind == "true":
            dist = DistanceSpec(DistanceKind.QUAD_FORM, A=np.diag(1.0 / probs))
        elif kind == "estimated":
            dist = DistanceSpec(DistanceKind.MAHALANOBIS_ESTIMATED)
        else:
            raise ConfigError(f"unknown multinomial distance {kind!r}")
        return Model(stream, "categorical", {"probs": probs.tolist()}, probs, dist)
    if name == "binomial":
        p = float(spec.pop("p", 0.5))
        stream = BinomialStream(p, bool(spec.pop("minimax", False)))
        return Model(stream, "bernoulli", {"p": p}, p, DistanceSpec())
    if name == "ecdf":
        kind = {"sup": "ECDF_SUP", "cvm": "ECDF_CVM", "l1": "ECDF_L1"}[spec.pop("distance", "sup")]
        return Model(EcdfStream(), "uniform", {}, None, DistanceSpec(kind))
    raise ConfigError(f"unknown model {name!r}")


def _policy(model: Model, delta_tail: float, T: float | None) -> HorizonPolicy:
    if T is None and model.dist.kind.value.startswith("ECDF"):
        T = kiefer_horizon(delta_tail)
    return HorizonPolicy(delta_tail, T)


def _record_vec(rec: ExitRecord, a_levels) -> list:
    return [rec.last_exit_n, rec.total_misses,
            *[rec.miss_count_from[float(a)] for a in a_levels], rec.horizon_n]


def exit_task(rng: RngStream, model: dict, epsilon: float, a_levels=(0.0,),
              delta_tail: float = 1e-3, T: float | None = None) -> np.ndarray:
    """One census. Returns ``[last, total, counts per a..., horizon]``; the
    ECDF model returns three such blocks (sup, CvM, L1)."""
    m = build_model(model)
    pol = _policy(m, delta_tail, T)
    data = lambda n: draw(m.data, m.data_params, rng, n)
    if isinstance(m.stream, EcdfStream):
        # all three distances from one compiled pass over the same data
        n = pol.horizon_n(epsilon, None)
        if n < 100:
            raise ConfigError(f"horizon {n} < 100; decrease epsilon")
        thr = [first_miss_index(a, epsilon) for a in a_levels]
        rows = m.stream.census(data(n), epsilon, thr)
        out = []
        for row in rows:
            r = ExitRecord.from_counts(row, epsilon, a_levels, n, delta_tail)
            out += _record_vec(r, a_levels)
        return np.asarray(out, dtype=float)
    rec = run_exit(m.stream, m.theta0, m.dist, epsilon, a_levels, pol, data)
    return np.asarray(_record_vec(rec, a_levels), dtype=float)


def paired_task(rng: RngStream, models: list, epsilon: float, a_levels=(0.0,),
                delta_tail: float = 1e-3, T: float | None = None) -> np.ndarray:
    """Census of several models on shared data; blocks concatenated."""
    ms = [build_model(s) for s in models]
    if len({(m.data, repr(m.data_params)) for m in ms}) != 1:
        raise ConfigError("paired models must share the data law")
    pol = _policy(ms[0], delta_tail, T)
    data = lambda n: draw(ms[0].data, ms[0].data_params, rng, n)
    recs = run_exit_paired([m.stream for m in ms], data, ms[0].theta0, ms[0].dist, epsilon,
                           a_levels, pol, dists=[m.dist for m in ms])
    return np.asarray(sum((_record_vec(r, a_levels) for r in recs), []), dtype=float)


def split_records(out: np.ndarray, a_levels, epsilon: float, delta_tail: float):
    """Per block, the list of :class:`ExitRecord` over replications."""
    out = np.atleast_2d(out)
    w = 3 + len(a_levels)
    blocks = []
    for b in range(out.shape[1] // w):
        recs = []
        for r, row in enumerate(out[:, b * w:(b + 1) * w].astype(np.int64)):
            counts = {float(a): int(c) for a, c in zip(a_levels, row[2:-1])}
            recs.append(ExitRecord(float(epsilon), int(row[0]), int(row[1]), counts,
                                   int(row[-1]), float(delta_tail), r))
        blocks.append(recs)
    return blocks


# ---------------------------------------------------------------------------
# kernel bandwidth scans

SQRT5 = math.sqrt(5.0)
EPA_BETA = 3.0 / (5.0 * SQRT5)
EPA_GAMMA = 3.0 * SQRT5 / 50.0
SCAN_GRID = tuple(np.round(np.linspace(0.8, 1.3, 11), 10))


def density_setup(target: str) -> dict:
    """Scan configuration for the Epanechnikov kernel.

    ``density``: normal data at ``x0 = 2.5``. ``derivative``: data from the
    density ``0.5 + 0.15 x + 0.3 x^3`` on ``[-1, 1]`` at ``x0 = 0``, where
    ``f''`` vanishes so the bias is exactly ``h^2 f'''/2``.
    """
    if target == "density":
        x0 = 2.5
        f = float(stats.norm.pdf(x0))
        prob = BandwidthProblem("DENSITY", f, (x0 * x0 - 1.0) * f, EPA_BETA)
        return {"target": target, "x0": x0, "data": "normal", "data_params": {},
                "theta0": f, "problem": prob, "expo": 2.5, "bias": 0.5, "margin": 4.5}
    if target == "derivative":
        coef = [0.5, 0.15, 0.0, 0.3]
        prob = BandwidthProblem("DERIVATIVE", 0.5, 1.8, EPA_GAMMA)
        return {"target": target, "x0": 0.0, "data": "polynomial",
                "data_params": {"coef": coef}, "theta0": 0.15, "problem": prob,
                "expo": 3.5, "bias": 0.5 * _SQRT3, "margin": 4.0}
    raise ConfigError("target must be 'density' or 'derivative'")


def density_horizon(setup: dict, eta: float, a_max: float = 1.3) -> int:
    """``n_max`` covering ``|Z| <= bias a_max^{expo} + margin`` in ``k`` units."""
    e = setup["expo"]
    zmax = setup["bias"] * a_max**e + setup["margin"]
    return int(math.ceil((zmax / eta) ** e))


def density_scan_task(rng: RngStream, target: str, eta: float, a_grid=SCAN_GRID) -> np.ndarray:
    """``eps^{expo} Q_eps`` for each ``a`` with ``c = a c0`` and ``eps = eta k``."""
    s = density_setup(target)
    prob = s["problem"]
    eps = eta * prob.k
    n = density_horizon(s, eta, max(a_grid))
    x = draw(s["data"], s["data_params"], rng, n)
    q = kernel_q_counts(x, s["x0"], np.asarray(a_grid) * prob.c0, s["theta0"], eps,
                        prob.rate, target == "derivative")
    return q[:, 0].astype(float) * eps ** s["expo"]


def cubic_argmin(a_grid, values, window=(0.8, 1.3)) -> float:
    """Minimizer of a cubic fit to ``values`` over ``a_grid``."""
    a = np.asarray(a_grid, dtype=float)
    v = np.asarray(values, dtype=float)
    co = np.polyfit(a - 1.0, v / v.mean(), 3)
    d1 = np.polyder(co)
    d2 = np.polyder(d1)
    r = np.roots(d1)
    r = r[np.isreal(r)].real
    r = r[(r > window[0] - 1.0) & (r < window[1] - 1.0) & (np.polyval(d2, r) > 0)]
    return float(r[0] + 1.0) if r.size else float("nan")


# ---------------------------------------------------------------------------
# tail inequality tasks


def walk_tail_task(rng: RngStream, sampler: str, m_grid, a_grid, horizon_mult: float) -> np.ndarray:
    """Indicators ``sqrt(m) sup_{m <= n <= K m} |S_n / n| >= a``, flattened
    over ``(m, a)``."""
    m_grid = np.asarray(m_grid, dtype=np.int64)
    n = int(math.ceil(horizon_mult * m_grid.max()))
    x = INCREMENT_SAMPLERS[sampler].draw(rng.gen, n)
    r = np.abs(np.cumsum(x) / np.arange(1, n + 1))
    suf = np.maximum.accumulate(r[::-1])[::-1]
    out = []
    for m in m_grid:
        stop = int(math.ceil(horizon_mult * m))
        # suffix max over [m, stop]
        seg = r[m - 1:stop].max() if stop < n else suf[m - 1]
        out.extend(math.sqrt(m) * seg >= np.asarray(a_grid))
    return np.asarray(out, dtype=float)


def ecdf_tail_task(rng: RngStream, m: int, b_grid, horizon_mult: float,
                   nbuckets: int = 128) -> float:
    """Number of ``b`` levels reached by ``sqrt(m) sup_{m <= n <= K m} D_n``."""
    u = rng.gen.random(int(math.ceil(horizon_mult * m)))
    lev = np.sort(np.asarray(b_grid, dtype=float)) / math.sqrt(m)
    return float(_kernels.ecdf_sup_exceed(u, int(m), lev, nbuckets))
