"""The acceptance suite: every published constant recomputed with its
Monte Carlo error, a tolerance, and a pass/fail verdict.

Used by ``lastexit reproduce`` and by the test-suite. Each criterion runs
from its own seed ``100 * seed + k`` so rows are independent and any row can
be rerun alone.
"""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .confseq import (
    check_sequential_coverage,
    law_quantile,
    plan_fixed_volume,
    verify_tail_bound_44,
    verify_tail_bound_64,
)
from .efficiency import bandwidth_argmin, derivative_bandwidth_argmin
from .experiments import (
    SCAN_GRID,
    cubic_argmin,
    density_scan_task,
    exit_task,
    paired_task,
)
from .limit_functionals import (
    CATALAN,
    LawKind,
    LimitLawSpec,
    _law_task,
    w_max_cdf,
    w_max_constants,
    w_max_quantile,
)
from .mc_engine import (
    EmpiricalDist,
    ExperimentPlan,
    compare_prob,
    ks_distance,
    ks_two_sample,
    moments,
    run_replications,
)
from .rng import RngStream

TWO_G = 2.0 * CATALAN


@dataclass(frozen=True)
class Row:
    criterion: int
    quantity: str
    target: str
    value: float
    se: float
    tolerance: str
    passed: bool

    def cells(self) -> list[str]:
        se = "" if not np.isfinite(self.se) else f"{self.se:.4f}"
        return [str(self.criterion), self.quantity, self.target, f"{self.value:.4f}", se,
                self.tolerance, "PASS" if self.passed else "FAIL"]


@dataclass(frozen=True)
class Settings:
    seed: int = 20240601
    scale: float = 1.0
    workers: int = 1

    @property
    def tol_factor(self) -> float:
        # fewer replications, proportionally wider Monte Carlo bands
        return 1.0 if self.scale >= 1.0 else math.sqrt(1.0 / self.scale)

    def reps(self, n: int, floor: int = 200) -> int:
        return max(floor, int(round(n * self.scale)))

    def seed_for(self, k: int) -> int:
        return 100 * self.seed + k


def _near(crit, name, target, value, se, tol, st: Settings, label=None) -> Row:
    t = tol * st.tol_factor
    return Row(crit, name, label or f"{target:.4f}", value, se, f"+/-{t:.4f}",
               bool(abs(value - target) <= t))


def _at_most(crit, name, value, limit, st: Settings, label="", se=float("nan"),
             scale_tol=True) -> Row:
    lim = limit * (st.tol_factor if scale_tol else 1.0)
    return Row(crit, name, label, value, se, f"<= {lim:.4f}", bool(value <= lim))


def _run(task, params, reps, seed, st: Settings) -> np.ndarray:
    return run_replications(ExperimentPlan(task, params, reps, seed, st.workers))


def _mean_se(v):
    v = np.asarray(v, dtype=float)
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


# ---------------------------------------------------------------------------
# criteria


def crit_1_2(st: Settings) -> list[Row]:
    R = st.reps(100_000)
    law = {"kind": "WMAX2", "sigma0_sq": 1.0}
    w2 = _run(_law_task, {"law_dict": law, "grid_points": 4096}, R, st.seed_for(1), st)[:, 0]
    w = np.sqrt(w2)
    m1, sd1, _ = moments(w)
    m2, sd2, sk2 = moments(w2)
    n = w.size
    rows = [
        _near(1, "E W_max", math.sqrt(math.pi / 2), m1, sd1 / math.sqrt(n), 0.01, st),
        _near(1, "E W_max^2", TWO_G, m2, sd2 / math.sqrt(n), 0.015, st),
        _near(1, "sd(W_max)", 0.5110, sd1, float("nan"), 0.01, st),
        _near(1, "sd(W_max^2)", 1.6055, sd2, float("nan"), 0.03, st),
        _near(1, "skew(W_max^2)", 2.3308, sk2, float("nan"), 0.1, st),
    ]
    rows.append(_near(2, "q95 W_max (series)", 2.241, w_max_quantile(0.95), 0.0, 0.01, st))
    rows.append(_near(2, "q95 W_max (simulated)", 2.241, float(np.quantile(w, 0.95)),
                      float("nan"), 0.01, st))
    return rows


def _mean_run(st: Settings) -> np.ndarray:
    # shared by criteria 3, 4 and 12
    R = st.reps(20_000)
    return _run(exit_task, {"model": {"name": "mean"}, "epsilon": 0.02,
                            "a_levels": (0.0, 0.95)}, R, st.seed_for(3), st)


def crit_3_4(st: Settings, out: np.ndarray) -> list[Row]:
    e2 = 0.02**2
    n_ks = min(out.shape[0], st.reps(5000))
    ks = ks_distance(out[:n_ks, 0] * e2, lambda x: w_max_cdf(np.sqrt(np.maximum(x, 0))))
    q0, se0 = _mean_se(out[:, 2] * e2)
    q95, se95 = _mean_se(out[:, 3] * e2)
    return [
        _at_most(3, "KS eps^2 N vs W_max^2 (mean, eps=0.02)", ks, 0.03, st),
        _near(4, "eps^2 E Q(0) (mean)", 1.0, q0, se0, 0.02, st),
        _near(4, "eps^2 E Q(0.95) (mean)", 0.5, q95, se95, 0.015, st),
    ]


def _limit_sample(kind: str, p: int, R: int, seed: int, grid: int, st: Settings) -> np.ndarray:
    law = LimitLawSpec(kind, p=p).params()
    return _run(_law_task, {"law_dict": law, "grid_points": grid}, R, seed, st)[:, 0]


def crit_5(st: Settings) -> list[Row]:
    R = st.reps(3000)
    eps = 0.05
    lim = _limit_sample("CHI_P_MAX", 2, st.reps(20_000), st.seed_for(50), 4096, st)
    rows = []
    for name, model in (("normal MLE p=2", {"name": "normal_mle"}),
                        ("multinomial 3 cells", {"name": "multinomial",
                                                 "probs": [1 / 3, 1 / 3, 1 / 3]})):
        out = _run(exit_task, {"model": model, "epsilon": eps}, R, st.seed_for(5), st)
        ks = ks_two_sample(out[:, 0] * eps**2, lim)
        rows.append(_at_most(5, f"KS eps^2 N vs chi2_2,max ({name})", ks, 0.04, st))
    return rows


def crit_6(st: Settings) -> list[Row]:
    eps = 0.05
    lim = _limit_sample("KMAX2", 1, st.reps(20_000), st.seed_for(60), 64, st)
    out = _run(exit_task, {"model": {"name": "ecdf"}, "epsilon": eps}, st.reps(3000),
               st.seed_for(6), st)
    ks = ks_two_sample(out[:, 0] * eps**2, lim)
    rows = [_at_most(6, "KS eps^2 N vs K_max^2 (sup, eps=0.05)", ks, 0.04, st)]
    eps = 0.02
    out = _run(exit_task, {"model": {"name": "ecdf"}, "epsilon": eps}, st.reps(10_000),
               st.seed_for(61), st)
    w = out.shape[1] // 3
    for b, (name, target, tol) in enumerate((("sup", math.pi**2 / 12, 0.02),
                                             ("CvM", 1 / 6, 0.01), ("L1", 7 / 60, 0.005))):
        m, se = _mean_se(out[:, b * w + 1] * eps**2)
        rows.append(_near(6, f"eps^2 E Q ({name}, eps=0.02)", target, m, se, tol, st))
    return rows


def crit_7(st: Settings) -> list[Row]:
    R = st.reps(10_000)
    out = _run(paired_task, {"models": [{"name": "mean"}, {"name": "median"}, {"name": "arctan"}],
                             "epsilon": 0.02, "T": 50.0}, R, st.seed_for(7), st)
    # blocks of [last, total, count(a=0), horizon]
    N = out[:, [0, 4, 8]]
    Q = out[:, [1, 5, 9]]
    rows = []
    for j, name, tn, tq in ((1, "median", 0.72, 0.69), (2, "arctan", 0.56, 0.55)):
        cn = compare_prob(np.column_stack([N[:, 0], N[:, j]]))
        cq = compare_prob(np.column_stack([Q[:, 0], Q[:, j]]))
        rows.append(_near(7, f"P(N_mean < N_{name})", tn, cn.p_less, cn.se(), 0.02, st))
        rows.append(_near(7, f"P(Q_mean < Q_{name})", tq, cq.p_less, cq.se(), 0.02, st))
    return rows


def crit_8(st: Settings) -> list[Row]:
    R = st.reps(5000)
    # the minimax estimator's shrinkage costs about 2 eps / sigma of relative
    # bias, so its limit needs a small eps
    eps = 0.005
    rows = []
    for k, p in enumerate((0.2, 0.5, 0.8)):
        out = _run(paired_task, {"models": [{"name": "binomial", "p": p},
                                            {"name": "binomial", "p": p, "minimax": True}],
                                 "epsilon": eps}, R, st.seed_for(80 + k), st)
        m, se = _mean_se(out[:, 1] * eps**2)
        ms, ses = _mean_se(out[:, 5] * eps**2)
        rows.append(_near(8, f"eps^2 E Q (p_hat, p={p})", p * (1 - p), m, se, 0.02, st))
        rows.append(_near(8, f"eps^2 E Q* (minimax, p={p})", 0.25, ms, ses, 0.02, st))
    return rows


def _scan(target: str, eta: float, R: int, seed: int, st: Settings):
    out = _run(density_scan_task, {"target": target, "eta": eta}, R, seed, st)
    a = np.asarray(SCAN_GRID)
    am = cubic_argmin(a, out.mean(axis=0))
    g = np.random.Generator(np.random.Philox(key=[seed, 2**63 + 7]))
    boots = [cubic_argmin(a, out[g.integers(0, R, R)].mean(axis=0)) for _ in range(200)]
    return am, float(np.nanstd(boots)), out


def crit_9(st: Settings) -> list[Row]:
    am_d, se_d, _ = _scan("density", 0.07, st.reps(4000), st.seed_for(9), st)
    am_v, se_v, _ = _scan("derivative", 0.15, st.reps(1500), st.seed_for(90), st)
    quad = {"5/2": bandwidth_argmin(2.5), "5/4": bandwidth_argmin(1.25)}
    canon = min(quad, key=lambda k: abs(quad[k] - am_d))
    rows = [
        _near(9, "density scan argmin a", 1.008, am_d, se_d, 0.03, st),
        _near(9, "derivative scan argmin a", 1.049, am_v, se_v, 0.03, st),
        _near(9, f"density objective argmin (canonical inner exponent {canon})", am_d,
              quad[canon], se_d, 0.03, st, label="scan"),
        _near(9, "derivative objective argmin", am_v, derivative_bandwidth_argmin(), se_v,
              0.03, st, label="scan"),
    ]
    other = "5/4" if canon == "5/2" else "5/2"
    rows.append(Row(9, f"density objective argmin (inner exponent {other}, rejected)", "scan",
                    quad[other], float("nan"), "differs", bool(abs(quad[other] - am_d) > 0.03)))
    return rows


def crit_10(st: Settings) -> list[Row]:
    viol = 0
    for lam in (0.0, 0.5, 1.0):
        for k, sampler in enumerate(("normal", "rademacher", "uniform")):
            rep = verify_tail_bound_64(lam, sampler, replications=st.reps(2000),
                                       seed=st.seed_for(100 + k), workers=st.workers)
            viol += len(rep.violations)
    rows = [Row(10, "violations of the m >= 100 moment tail bound", "0", float(viol),
                float("nan"), "== 0", viol == 0)]
    rep = verify_tail_bound_44(replications=st.reps(10_000), seed=st.seed_for(110),
                               workers=st.workers)
    slope = max(rep.extras["slopes"].values())
    rows.append(_at_most(10, "ECDF tail log-log slope (adaptive window)", slope, -3.5, st,
                         label="<= -3.5", scale_tol=False))
    inv = sum(1 for v in rep.violations if v[0] == "m invariance")
    m0, m1 = rep.extras["invariance_pair"]
    rows.append(Row(10, f"ECDF tail law: m={m0} vs m={m1} disagreements", "0", float(inv),
                    float("nan"), "== 0", inv == 0))
    return rows


def crit_11(st: Settings) -> list[Row]:
    eps = 0.05
    R = st.reps(3000)
    qkw = {"replications": max(10_000, st.reps(20_000)), "seed": st.seed_for(111),
           "workers": st.workers}
    cases = (
        ("scalar mean", None, 1, {"name": "mean"}),
        ("normal MLE p=2, plug-in metric", LimitLawSpec(LawKind.CHI_P_MAX, p=2), 2,
         {"name": "normal_mle", "distance": "mahalanobis_estimated"}),
        ("ECDF band", LimitLawSpec(LawKind.KMAX2), 1, {"name": "ecdf"}),
    )
    rows = []
    for k, (name, law, p, model) in enumerate(cases):
        kw = dict(qkw, grid_points=64 if law is not None and law.kind == LawKind.KMAX2 else 4096)
        plan = plan_fixed_volume(eps, 0.95, p, law, **kw)
        res = check_sequential_coverage(plan, model, R, st.seed_for(11 + 10 * k),
                                        workers=st.workers)
        rows.append(_near(11, f"coverage ({name})", 0.95, res.coverage, res.se, 0.02, st))
    return rows


def crit_12(st: Settings, mean_out: np.ndarray) -> list[Row]:
    m, se = _mean_se(mean_out[:, 0] * 0.02**2 / TWO_G)
    rows = [_near(12, "eps^2 E N / (2G sigma0^2) (mean, eps=0.02)", 1.0, m, se, 0.03, st)]
    # the discrete-walk overshoot bias is of order eps; 0.03 keeps it well inside 3%
    eps = 0.03
    out = _run(exit_task, {"model": {"name": "skewness"}, "epsilon": eps}, st.reps(16_000),
               st.seed_for(12), st)
    m, se = _mean_se(out[:, 0] * eps**2 / (6.0 * TWO_G))
    rows.append(_near(12, "eps^2 E N / (2G sigma0^2) (skewness, sigma0^2=6, eps=0.03)", 1.0, m, se,
                      0.03, st))
    return rows


def crit_13(st: Settings) -> list[Row]:
    """Byte equality of a small report body across worker counts."""
    bodies = []
    for w in (1, 2):
        s = Settings(st.seed, 0.01, w)
        rows = crit_3_4(s, _mean_run(s))
        bodies.append(render_body(rows))
    return [Row(13, "report body identical for 1 and 2 workers", "identical",
                float(bodies[0] == bodies[1]), float("nan"), "== 1", bodies[0] == bodies[1])]


def _crit_3_4_12(st):
    out = _mean_run(st)
    return crit_3_4(st, out) + crit_12(st, out)


CRITERIA: dict[str, Callable[[Settings], list[Row]]] = {
    "1-2": crit_1_2,
    "3-4-12": _crit_3_4_12,
    "5": crit_5,
    "6": crit_6,
    "7": crit_7,
    "8": crit_8,
    "9": crit_9,
    "10": crit_10,
    "11": crit_11,
    "13": crit_13,
}


def run_suite(st: Settings, only=None, progress: Callable[[str], None] | None = None) -> list[Row]:
    rows: list[Row] = []
    for key, fn in CRITERIA.items():
        if only is not None and key not in only:
            continue
        t0 = time.time()
        got = fn(st)
        rows.extend(got)
        if progress:
            progress(f"criteria {key}: {sum(r.passed for r in got)}/{len(got)} pass "
                     f"({time.time() - t0:.0f} s)")
    return sorted(rows, key=lambda r: r.criterion)


HEADER = ["criterion", "quantity", "target", "computed", "se", "tolerance", "result"]


def render_body(rows: list[Row]) -> str:
    lines = ["| " + " | ".join(HEADER) + " |", "|" + "---|" * len(HEADER)]
    lines += ["| " + " | ".join(r.cells()) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def render_csv(rows: list[Row]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HEADER)
    for r in rows:
        w.writerow(r.cells())
    return buf.getvalue()


BODY_MARKER = "<!-- body -->"


def render_report(rows: list[Row], st: Settings, timestamp: str) -> str:
    """Markdown report; everything after ``BODY_MARKER`` is deterministic."""
    quick = st.scale < 1.0
    head = ["# Acceptance report", "", f"generated: {timestamp}", "", BODY_MARKER, "",
            f"seed: {st.seed}", f"replication scale: {st.scale:g}"]
    if quick:
        head.append(f"quick mode: replications x{st.scale:g}, Monte Carlo tolerances "
                    f"widened x{st.tol_factor:.3f}")
    n_pass = sum(r.passed for r in rows)
    head += [f"rows passing: {n_pass}/{len(rows)}", ""]
    return "\n".join(head) + "\n" + render_body(rows)


def diffable_body(report: str) -> str:
    return report.split(BODY_MARKER, 1)[1]


def constants_table(st: Settings, replications: int = 100_000) -> list[dict]:
    """Closed-form constants next to simulated values with standard errors."""
    c = w_max_constants()
    R = st.reps(replications)
    w2 = _run(_law_task, {"law_dict": {"kind": "WMAX2", "sigma0_sq": 1.0}, "grid_points": 4096},
              R, st.seed_for(1), st)[:, 0]
    w = np.sqrt(w2)
    (m1, sd1, _), (m2, sd2, sk2) = moments(w), moments(w2)
    # delta-method standard errors for the sd and skewness rows are not
    # tabulated; bootstrap them from the sample
    g = np.random.Generator(np.random.Philox(key=[st.seed_for(1), 2**63 + 3]))
    boots = np.array([[*moments(w[i])[1:2], *moments(w2[i])[1:]]
                      for i in (g.integers(0, R, R) for _ in range(50))])
    bse = boots.std(axis=0, ddof=1)
    return [
        {"quantity": "E W_max", "closed": c["mean"], "simulated": m1, "se": sd1 / math.sqrt(R)},
        {"quantity": "E W_max^2 = 2G", "closed": c["mean_sq"], "simulated": m2,
         "se": sd2 / math.sqrt(R)},
        {"quantity": "sd(W_max)", "closed": c["sd"], "simulated": sd1, "se": bse[0]},
        {"quantity": "sd(W_max^2)", "closed": c["sd_sq"], "simulated": sd2, "se": bse[1]},
        {"quantity": "skew(W_max^2)", "closed": c["skew_sq"], "simulated": sk2, "se": bse[2]},
        {"quantity": "q95 W_max", "closed": c["q95"], "simulated": float(np.quantile(w, 0.95)),
         "se": float("nan")},
        {"quantity": "GC miss mean (sup)", "closed": math.pi**2 / 12},
        {"quantity": "CvM miss mean", "closed": 1 / 6},
        {"quantity": "L1 miss mean", "closed": 7 / 60},
        {"quantity": "minimax binomial miss mean", "closed": 0.25},
    ]
