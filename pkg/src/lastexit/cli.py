"""Command line interface.

Every command takes a flat JSON config (``--config``) whose keys may be
overridden by flags. Results go to ``--out`` (a directory) as
``records.csv`` or ``records.json`` plus ``summary.json``; the summary is
also printed. With ``--check`` a command exits with status 2 when one of
its checks misses its tolerance. Quantile tables are cached in the
directory named by ``LASTEXIT_CACHE_DIR``.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .acceptance import (
    Settings,
    constants_table,
    render_csv,
    render_report,
    run_suite,
)
from .confseq import (
    check_sequential_coverage,
    plan_fixed_volume,
    pointwise_sample_size,
    verify_tail_bound_44,
    verify_tail_bound_64,
)
from .efficiency import bandwidth_argmin, derivative_bandwidth_argmin, eq_trace
from .errors import ConfigError, LastExitError
from .exit_census import DistanceKind, csv_header
from .experiments import (
    SCAN_GRID,
    build_model,
    cubic_argmin,
    density_scan_task,
    exit_task,
    paired_task,
    split_records,
)
from .limit_functionals import CATALAN, LawKind, LimitLawSpec, _law_task, w_max_cdf
from .mc_engine import (
    ExperimentPlan,
    compare_prob,
    default_workers,
    ks_distance,
    moments,
    run_replications,
)

SCHEMA_VERSION = 1
COMMON_KEYS = {"seed", "reps", "epsilon", "workers", "out", "format", "check", "quick"}
MODEL_KEYS = {"model", "data", "distance", "probs", "p", "minimax"}
COMMAND_KEYS = {
    "constants": set(),
    "limits": {"law", "p", "grid_points", "probs"},
    "exits": MODEL_KEYS | {"a_levels", "delta_tail", "T"},
    "compare": {"preset", "p", "a_levels", "delta_tail", "T"},
    "gc": {"a_levels", "delta_tail"},
    "density": {"target", "eta", "scan_c"},
    "confseq": MODEL_KEYS | {"coverage", "delta_tail", "quantile_reps"},
    "verify-tail": {"bound", "lam", "sampler", "min_hits"},
    "reproduce": set(),
}
DEFAULTS = {
    "constants": {"reps": 100_000},
    "limits": {"reps": 10_000, "law": "WMAX2", "p": 1, "grid_points": 4096,
               "probs": [0.5, 0.9, 0.95, 0.99]},
    "exits": {"reps": 1000, "epsilon": 0.05, "model": "mean", "a_levels": [0.0],
              "delta_tail": 1e-3},
    "compare": {"reps": 10_000, "epsilon": 0.02, "preset": "mean-median", "p": 0.5,
                "a_levels": [0.0], "delta_tail": 1e-3, "T": 50.0},
    "gc": {"reps": 1000, "epsilon": 0.05, "a_levels": [0.0], "delta_tail": 1e-3},
    "density": {"reps": 1000, "target": "density", "scan_c": False},
    "confseq": {"reps": 2000, "epsilon": 0.05, "model": "mean", "coverage": 0.95,
                "delta_tail": 1e-3, "quantile_reps": 20_000},
    "verify-tail": {"reps": 2000, "bound": "moment", "lam": 0.0, "sampler": "normal",
                    "min_hits": 20},
    "reproduce": {},
}
PRESETS = {
    "mean-median": ([{"name": "mean"}, {"name": "median"}], (0.72, 0.69)),
    "mean-arctan": ([{"name": "mean"}, {"name": "arctan"}], (0.56, 0.55)),
    "binomial-minimax": (None, None),
}
TWO_G = 2.0 * CATALAN


# ---------------------------------------------------------------------------
# config


def load_config(command: str, path: str | None, flags: dict) -> dict:
    """Defaults, then the JSON file, then explicit flags."""
    allowed = COMMON_KEYS | COMMAND_KEYS[command]
    cfg = {"seed": 20240601, "workers": 1, "format": "csv", "check": False, "quick": False,
           "out": None}
    cfg.update(DEFAULTS[command])
    if path is not None:
        with open(path) as fh:
            raw = json.load(fh)
        if not isinstance(raw, dict):
            raise ConfigError("config must be a flat JSON object")
        unknown = sorted(set(raw) - allowed)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        nested = sorted(k for k, v in raw.items() if isinstance(v, dict))
        if nested:
            raise ConfigError(f"config must be flat; nested values at: {', '.join(nested)}")
        cfg.update(raw)
    given = {k: v for k, v in flags.items() if v is not None}
    if given.get("quick") and given.get("reps") is not None:
        raise ConfigError("--quick and --reps conflict")
    cfg.update(given)
    return _validate(command, cfg)


def _validate(command: str, cfg: dict) -> dict:
    if "epsilon" in cfg and command in ("exits", "compare", "gc", "confseq"):
        if not (isinstance(cfg["epsilon"], (int, float)) and cfg["epsilon"] > 0):
            raise ConfigError("epsilon must be > 0")
    if "reps" in cfg and not (isinstance(cfg["reps"], int) and cfg["reps"] >= 1):
        raise ConfigError("reps must be a positive integer")
    if cfg["format"] not in ("csv", "json"):
        raise ConfigError("format must be csv or json")
    w = cfg["workers"]
    cfg["workers"] = default_workers() if w in ("auto", 0) else int(w)
    if cfg["workers"] < 1:
        raise ConfigError("workers must be >= 1")
    if cfg.get("quick") and "reps" in cfg:
        cfg["reps"] = max(1, cfg["reps"] // 10)
    return cfg


def _model_spec(cfg: dict) -> dict:
    spec = {"name": cfg["model"]}
    for k in MODEL_KEYS - {"model"}:
        if k in cfg:
            spec[k] = cfg[k]
    build_model(spec)  # fail early on a bad model
    return spec


def _plan(task, params, cfg, seed_offset=0) -> np.ndarray:
    return run_replications(ExperimentPlan(task, params, cfg["reps"], cfg["seed"] + seed_offset,
                                           cfg["workers"]))


def _mean_se(v) -> tuple[float, float]:
    v = np.asarray(v, dtype=float)
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else float("nan")
    return float(v.mean()), se


def _est(v) -> dict:
    m, se = _mean_se(v)
    return {"estimate": m, "se": se}


def _check(quantity, target, value, tol, se=float("nan")) -> dict:
    return {"quantity": quantity, "target": target, "value": value, "se": se,
            "tolerance": tol, "passed": bool(abs(value - target) <= tol)}


def _mc_tol(base: float, reps: int, reference: int) -> float:
    """Tolerance stated at ``reference`` replications, widened for fewer."""
    return base * max(1.0, math.sqrt(reference / reps))


# ---------------------------------------------------------------------------
# commands; each returns (records, summary)


def cmd_constants(cfg):
    rows = constants_table(Settings(cfg["seed"], 1.0, cfg["workers"]), cfg["reps"])
    checks = [_check(r["quantity"], r["closed"], r["simulated"], 3 * r["se"], r["se"])
              for r in rows if "simulated" in r and np.isfinite(r["se"])]
    return rows, {"rows": rows, "checks": checks}


def cmd_limits(cfg):
    law = LimitLawSpec(cfg["law"], p=int(cfg["p"]))
    v = _plan(_law_task, {"law_dict": law.params(), "grid_points": int(cfg["grid_points"])},
              cfg)[:, 0]
    m, sd, sk = moments(v)
    qs = {f"{q:g}": float(np.quantile(v, q)) for q in cfg["probs"]}
    checks = []
    if law.kind == LawKind.WMAX2:
        ks = ks_distance(v, lambda x: w_max_cdf(np.sqrt(np.maximum(x, 0.0))))
        # 1% critical value of the one-sample KS statistic
        checks.append({"quantity": "KS vs series CDF", "target": 0.0, "value": ks, "se": None,
                       "tolerance": 1.63 / math.sqrt(v.size),
                       "passed": bool(ks <= 1.63 / math.sqrt(v.size))})
    records = [{"replication_id": i, "value": float(x)} for i, x in enumerate(v)]
    return records, {"law": law.kind.value, "p": law.p, "mean": {"estimate": m,
                     "se": sd / math.sqrt(v.size)}, "sd": sd, "skewness": sk,
                     "quantiles": qs, "checks": checks}


def _limit_miss_mean(spec: dict) -> float | None:
    """Limit of ``eps^2 E Q(0)`` when the model is correctly specified."""
    m = build_model(spec)
    meta = m.stream.meta
    k = m.dist.kind
    if spec["name"] == "ecdf":
        return {"ECDF_SUP": math.pi**2 / 12, "ECDF_CVM": 1 / 6, "ECDF_L1": 7 / 60}[k.value]
    if k == DistanceKind.ABS and meta.sigma0_sq is not None and meta.Sigma0 is None:
        return float(meta.sigma0_sq)
    if k == DistanceKind.MAHALANOBIS_TRUE:
        return eq_trace(np.linalg.inv(m.dist.Sigma0), meta.Sigma0)
    if k == DistanceKind.QUAD_FORM:
        return eq_trace(m.dist.A, meta.Sigma0)
    if k == DistanceKind.MAHALANOBIS_ESTIMATED and spec.get("data", "normal") == "normal":
        return float(np.atleast_2d(meta.Sigma0).shape[0])
    return None


def cmd_exits(cfg):
    spec = _model_spec(cfg)
    eps = float(cfg["epsilon"])
    a = tuple(float(x) for x in cfg["a_levels"])
    out = _plan(exit_task, {"model": spec, "epsilon": eps, "a_levels": a,
                            "delta_tail": cfg["delta_tail"], "T": cfg.get("T")}, cfg)
    blocks = split_records(out, a, eps, cfg["delta_tail"])
    block = 0
    if spec["name"] == "ecdf":
        block = ("sup", "cvm", "l1").index(spec.get("distance", "sup"))
    recs = blocks[block]
    hdr = csv_header(a)
    records = [dict(zip(hdr, r.as_row(a))) for r in recs]
    e2 = eps * eps
    summary = {
        "model": spec, "epsilon": eps, "horizon_n": recs[0].horizon_n,
        "eps2_mean_last_exit": _est([r.last_exit_n * e2 for r in recs]),
        "eps2_mean_misses": {f"{x:g}": _est([r.miss_count_from[x] * e2 for r in recs])
                             for x in a},
        "censored_fraction": float(np.mean([r.censored_flag for r in recs])),
        "checks": [],
    }
    target = _limit_miss_mean(spec)
    if target is not None and 0.0 in a:
        est = summary["eps2_mean_misses"]["0"]
        # 3 SE plus a 3% finite-eps allowance
        tol = 3 * est["se"] + 0.03 * target
        summary["checks"].append(_check("eps^2 E Q(0)", target, est["estimate"], tol, est["se"]))
    return records, summary


def cmd_compare(cfg):
    name = cfg["preset"]
    if name not in PRESETS:
        raise ConfigError(f"preset must be one of {sorted(PRESETS)}")
    models, published = PRESETS[name]
    if name == "binomial-minimax":
        p = float(cfg["p"])
        models = [{"name": "binomial", "p": p}, {"name": "binomial", "p": p, "minimax": True}]
    eps = float(cfg["epsilon"])
    a = tuple(float(x) for x in cfg["a_levels"])
    out = _plan(paired_task, {"models": models, "epsilon": eps, "a_levels": a,
                              "delta_tail": cfg["delta_tail"], "T": cfg["T"]}, cfg)
    w = 3 + len(a)
    N = out[:, [0, w]]
    Q = out[:, [1, w + 1]]
    cn, cq = compare_prob(N), compare_prob(Q)
    labels = [m["name"] + ("_minimax" if m.get("minimax") else "") for m in models]
    records = [{"replication_id": i, "epsilon": eps, f"N_{labels[0]}": int(N[i, 0]),
                f"N_{labels[1]}": int(N[i, 1]), f"Q_{labels[0]}": int(Q[i, 0]),
                f"Q_{labels[1]}": int(Q[i, 1]), "horizon_n": int(out[i, w - 1])}
               for i in range(out.shape[0])]
    e2 = eps * eps
    summary = {
        "preset": name, "estimators": labels, "epsilon": eps,
        "p_less_N": {"estimate": cn.p_less, "se": cn.se(), "p_equal": cn.p_equal},
        "p_less_Q": {"estimate": cq.p_less, "se": cq.se(), "p_equal": cq.p_equal},
        "p_less": cn.p_less,
        "eps2_mean_misses": {lab: _est(Q[:, j] * e2) for j, lab in enumerate(labels)},
        "checks": [],
    }
    if published is not None:
        tol = _mc_tol(0.02, cfg["reps"], 10_000)
        summary["checks"] = [
            _check("P(N_1 < N_2)", published[0], cn.p_less, tol, cn.se()),
            _check("P(Q_1 < Q_2)", published[1], cq.p_less, tol, cq.se()),
        ]
    else:
        p = float(cfg["p"])
        tol = _mc_tol(0.02, cfg["reps"], 5000)
        summary["checks"] = [
            _check("eps^2 E Q", p * (1 - p), float(np.mean(Q[:, 0] * e2)), tol),
            # shrinkage toward 1/2 biases the minimax count low by about eps
            _check("eps^2 E Q* (minimax)", 0.25, float(np.mean(Q[:, 1] * e2)), tol + eps),
        ]
    return records, summary


def cmd_gc(cfg):
    eps = float(cfg["epsilon"])
    a = tuple(float(x) for x in cfg["a_levels"])
    out = _plan(exit_task, {"model": {"name": "ecdf"}, "epsilon": eps, "a_levels": a,
                            "delta_tail": cfg["delta_tail"]}, cfg)
    blocks = split_records(out, a, eps, cfg["delta_tail"])
    names = ("sup", "cvm", "l1")
    targets = (math.pi**2 / 12, 1 / 6, 7 / 60)
    tols = (0.02, 0.01, 0.005)
    e2 = eps * eps
    records = []
    for i in range(out.shape[0]):
        row = {"replication_id": i, "epsilon": eps}
        for nm, blk in zip(names, blocks):
            row[f"last_exit_n_{nm}"] = blk[i].last_exit_n
            row[f"total_misses_{nm}"] = blk[i].total_misses
        row["horizon_n"] = blocks[0][i].horizon_n
        records.append(row)
    summary = {"epsilon": eps, "horizon_n": blocks[0][0].horizon_n, "checks": []}
    for nm, blk, t, tol in zip(names, blocks, targets, tols):
        est = _est([r.total_misses * e2 for r in blk])
        summary[f"eps2_mean_misses_{nm}"] = est
        summary[f"eps2_mean_last_exit_{nm}"] = _est([r.last_exit_n * e2 for r in blk])
        summary["checks"].append(_check(f"eps^2 E Q ({nm})", t, est["estimate"],
                                        _mc_tol(tol, cfg["reps"], 10_000), est["se"]))
    return records, summary


def cmd_density(cfg):
    target = cfg["target"]
    if target not in ("density", "derivative"):
        raise ConfigError("target must be density or derivative")
    eta = float(cfg.get("eta", 0.07 if target == "density" else 0.15))
    if not eta > 0:
        raise ConfigError("eta must be > 0")
    grid = SCAN_GRID if cfg["scan_c"] else (1.0,)
    out = _plan(density_scan_task, {"target": target, "eta": eta, "a_grid": grid}, cfg)
    records = [{"a": a, "scaled_mean_misses": float(out[:, j].mean()),
                "se": float(out[:, j].std(ddof=1) / math.sqrt(out.shape[0]))}
               for j, a in enumerate(grid)]
    summary = {"target": target, "eta": eta, "rows": records, "checks": []}
    if cfg["scan_c"]:
        am = cubic_argmin(grid, out.mean(axis=0))
        g = np.random.Generator(np.random.Philox(key=[cfg["seed"], 2**63 + 7]))
        R = out.shape[0]
        boots = [cubic_argmin(grid, out[g.integers(0, R, R)].mean(axis=0)) for _ in range(200)]
        se = float(np.nanstd(boots))
        ref = 1.008 if target == "density" else 1.049
        quad = bandwidth_argmin(2.5) if target == "density" else derivative_bandwidth_argmin()
        summary.update({"argmin": am, "argmin_se": se, "objective_argmin": quad})
        summary["checks"].append(_check("scan argmin", ref, am, 0.03, se))
    return records, summary


def _confseq_law(spec: dict):
    m = build_model(spec)
    if spec["name"] == "ecdf":
        return LimitLawSpec(LawKind.KMAX2), 1, 64
    if m.stream.meta.Sigma0 is not None:
        p = int(np.atleast_2d(m.stream.meta.Sigma0).shape[0])
        if spec["name"] == "multinomial":
            p -= 1
        return LimitLawSpec(LawKind.CHI_P_MAX, p=p), p, 4096
    return LimitLawSpec(LawKind.WMAX2, sigma0_sq=float(m.stream.meta.sigma0_sq)), 1, 4096


def cmd_confseq(cfg):
    spec = _model_spec(cfg)
    law, p, grid = _confseq_law(spec)
    plan = plan_fixed_volume(float(cfg["epsilon"]), float(cfg["coverage"]), p, law,
                             replications=int(cfg["quantile_reps"]), seed=cfg["seed"],
                             grid_points=grid, workers=cfg["workers"])
    res = check_sequential_coverage(plan, spec, cfg["reps"], cfg["seed"] + 1,
                                    cfg["delta_tail"], cfg["workers"])
    summary = {
        "model": spec, "epsilon": plan.epsilon, "law": law.kind.value, "p": p,
        "c_quantile": plan.c_quantile, "m_start": plan.m_start, "horizon_n": res.horizon_n,
        "coverage": {"estimate": res.coverage, "se": res.se},
        "checks": [_check("coverage", plan.coverage, res.coverage,
                          _mc_tol(0.02, cfg["reps"], 3000), res.se)],
    }
    if law.kind == LawKind.WMAX2:
        summary["pointwise_sample_size"] = pointwise_sample_size(plan.epsilon, plan.coverage,
                                                                 law.sigma0_sq)
    return [], summary


def cmd_verify_tail(cfg):
    if cfg["bound"] == "moment":
        rep = verify_tail_bound_64(float(cfg["lam"]), cfg["sampler"], replications=cfg["reps"],
                                   seed=cfg["seed"], workers=cfg["workers"])
    elif cfg["bound"] == "ecdf":
        rep = verify_tail_bound_44(replications=cfg["reps"], seed=cfg["seed"],
                                   min_hits=int(cfg["min_hits"]), workers=cfg["workers"])
    else:
        raise ConfigError("bound must be moment or ecdf")
    extras = {k: ({str(kk): vv for kk, vv in v.items()} if isinstance(v, dict) else v)
              for k, v in rep.extras.items()}
    summary = {"bound": cfg["bound"], "violations": [list(v) for v in rep.violations],
               "extras": extras,
               "checks": [{"quantity": "violations", "target": 0, "value": len(rep.violations),
                           "se": None, "tolerance": 0, "passed": not rep.violations}]}
    return rep.rows(), summary


COMMANDS = {
    "constants": cmd_constants,
    "limits": cmd_limits,
    "exits": cmd_exits,
    "compare": cmd_compare,
    "gc": cmd_gc,
    "density": cmd_density,
    "confseq": cmd_confseq,
    "verify-tail": cmd_verify_tail,
}


# ---------------------------------------------------------------------------
# output


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        return None if not math.isfinite(float(x)) else float(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def write_outputs(out_dir: Path, records: list, summary: dict, fmt: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    if records:
        if fmt == "csv":
            with open(out_dir / "records.csv", "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=list(records[0]), lineterminator="\n")
                w.writeheader()
                w.writerows(records)
        else:
            (out_dir / "records.json").write_text(json.dumps(_jsonable(records), indent=1))
    (out_dir / "summary.json").write_text(json.dumps(_jsonable(summary), indent=2) + "\n")


def _reproduce(cfg) -> int:
    st = Settings(cfg["seed"], 0.1 if cfg["quick"] else 1.0, cfg["workers"])
    rows = run_suite(st, progress=lambda s: print(s, file=sys.stderr))
    stamp = _dt.datetime.now(_dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
    report = render_report(rows, st, stamp)
    if cfg["out"]:
        d = Path(cfg["out"])
        d.mkdir(parents=True, exist_ok=True)
        (d / "report.md").write_text(report)
        (d / "report.csv").write_text(render_csv(rows))
    print(report)
    return 0 if all(r.passed for r in rows) else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lastexit", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in list(COMMANDS) + ["reproduce"]:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", help="worker processes or 'auto'")
        p.add_argument("--out", help="output directory")
        p.add_argument("--quick", action="store_true", default=None,
                       help="a tenth of the replications")
        if name != "reproduce":
            p.add_argument("--reps", type=int)
            p.add_argument("--format", choices=("csv", "json"))
            p.add_argument("--check", action="store_true", default=None,
                           help="exit with status 2 when a check fails")
        if name in ("exits", "compare", "gc", "confseq"):
            p.add_argument("--epsilon", type=float)
        if name in ("exits", "confseq"):
            p.add_argument("--model")
        if name == "compare":
            p.add_argument("--preset", choices=sorted(PRESETS))
        if name == "density":
            p.add_argument("--target", choices=("density", "derivative"))
            p.add_argument("--scan-c", dest="scan_c", action="store_true", default=None)
        if name == "verify-tail":
            p.add_argument("--bound", choices=("moment", "ecdf"))
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    try:
        cfg = load_config(args.command, args.config, flags)
        if args.command == "reproduce":
            return _reproduce(cfg)
        records, summary = COMMANDS[args.command](cfg)
    except (LastExitError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    summary = {"schema_version": SCHEMA_VERSION, "command": args.command,
               "config": {k: v for k, v in cfg.items() if k != "out"}, **summary}
    summary["passed"] = all(c["passed"] for c in summary.get("checks", []))
    if cfg["out"]:
        write_outputs(Path(cfg["out"]), records, summary, cfg["format"])
    print(json.dumps(_jsonable(summary), indent=2))
    if cfg["check"] and not summary["passed"]:
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
