"""``covshift`` command line: scenario, estimate, bench and report.

Exit codes: 0 success, 2 usage or configuration error, 3 numeric or solver
failure. ``COVSHIFT_SEED`` supplies the root seed when no flag or file sets one.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

import numpy as np

from covshift import harness
from covshift.density_ratio import (
    GaussianRatio,
    KernelLogisticRatio,
    LogisticRatio,
    ratio_model_from_dict,
)
from covshift.distributions import model_from_dict
from covshift.errors import ConfigError, CovshiftError
from covshift.estimators import CSV_FIELDS, EstimatorConfig, estimate_truncated_ratio
from covshift.kernels import KernelSpec
from covshift.serialization import (
    RowWriter,
    dumps,
    format_cell,
    provenance,
    read_json,
    read_rows_csv,
    write_json,
    write_rows_csv,
)
from covshift.targets import HalfspaceIndicator, PlantedRkhs, TanhCoordinate

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3

CONFIG_FLAGS = {
    "epsilon": float, "delta": float, "ratio_bound": float, "batch_size": int,
    "batch_count": int, "c_K": float, "c_m": float, "c_t": float, "norm_bound": float,
}


class UsageError(Exception):
    pass


def _env_seed(default=0) -> int:
    raw = os.environ.get("COVSHIFT_SEED")
    if raw is None or raw == "":
        return default
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"COVSHIFT_SEED must be an integer, got {raw!r}") from None


def _add_config_flags(p):
    g = p.add_argument_group("estimator constants (override file values)")
    for name, typ in CONFIG_FLAGS.items():
        g.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None)
    g.add_argument("--truncate", action="store_true", default=None,
                   help="apply truncation in the Gaussian plug-in (extension)")
    g.add_argument("--boost", action="store_true", default=None,
                   help="median-of-means boosting for the truncated estimators")


def _config_overrides(args) -> dict:
    keys = list(CONFIG_FLAGS) + ["truncate", "boost"]
    return {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}


def _writable(path):
    path = Path(path)
    parent = path.parent if str(path.parent) else Path(".")
    if not parent.is_dir():
        raise UsageError(f"output directory {parent} does not exist")
    if not os.access(parent, os.W_OK):
        raise UsageError(f"output directory {parent} is not writable")
    return path


def _readable(path):
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"input file {path} does not exist")
    return path


# ---------------------------------------------------------------------------
# scenario


def _target_from_args(args, d):
    if args.f == "halfspace":
        return HalfspaceIndicator(np.eye(d)[0], 0.0)
    if args.f == "tanh":
        return TanhCoordinate(0)
    center = np.zeros((1, d))
    center[0, 0] = args.f_center
    return PlantedRkhs(KernelSpec.rbf(args.f_bandwidth), center, [1.0])


def cmd_scenario(args) -> int:
    if args.kind == "lower-bound":
        a, b = harness.make_lower_bound_instance(args.B, args.eps)
        prefix = Path(args.out) if args.out else Path(f"lower-bound-B{args.B:g}-eps{args.eps:g}")
        paths = [prefix.with_name(prefix.name + "-A.json"), prefix.with_name(prefix.name + "-B.json")]
        for p in paths:
            _writable(p)
        for scen, path, other in ((a, paths[0], paths[1]), (b, paths[1], paths[0])):
            scen.metadata["partner"] = other.name
            scen.metadata["probe"] = harness.measure_assumptions(scen, B=args.B, seed=args.seed)
            write_json(path, scen.to_dict())
            print(path)
        return EXIT_OK
    if args.kind == "gaussian":
        d = args.d
        cov_tr = cov_te = None
        if args.prec_gap > 0:
            cov_tr, cov_te = harness.make_covariance_pair(d, args.prec_gap, seed=args.seed)
        scen = harness.make_gaussian_scenario(
            d, args.shift, cov_tr, cov_te, f=_target_from_args(args, d),
            isotropic=args.isotropic, warn_only=args.warn_only, scenario_id=args.id,
            oracle_precision=args.precision, oracle_seed=args.seed)
    else:
        scen = harness.make_rkhs_scenario(alphas=args.alpha, centers=[[0.0]] * len(args.alpha),
                                          bandwidth=args.bandwidth, scenario_id=args.id,
                                          oracle_precision=args.precision, oracle_seed=args.seed)
    out = _writable(args.out or f"{scen.id}.json")
    scen.probe()
    scen.metadata["probe"] = harness.measure_assumptions(scen, B=args.B, seed=args.seed)
    write_json(out, scen.to_dict())
    print(out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# estimate


def _saved_ratio(res):
    model = res.diagnostics.get("model")
    if res.estimator in ("gauss", "gauss-iso"):
        p_tr = model_from_dict(res.diagnostics["p_tr_hat"])
        p_te = model_from_dict(res.diagnostics["p_te_hat"])
        return GaussianRatio(p_te, p_tr)
    if res.estimator == "logistic":
        return LogisticRatio(model)
    if res.estimator == "kernel-logistic":
        return KernelLogisticRatio(model)
    raise UsageError(f"estimator {res.estimator!r} does not produce a ratio model")


def cmd_estimate(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be a positive integer")
    scen = harness.ScenarioSpec.from_dict(read_json(_readable(args.scenario)))
    seed = args.seed if args.seed is not None else _env_seed()
    config = EstimatorConfig().with_overrides(**_config_overrides(args))
    if args.estimator in ("gauss", "gauss-iso") and config.batch_size is not None \
            and config.m * config.t > args.n:
        raise UsageError(f"sample budget too small: m*t = {config.m}*{config.t} > n = {args.n}")
    options = {}
    if args.kernel_bandwidth is not None:
        options["kernel"] = {"kind": "rbf", "bandwidth": args.kernel_bandwidth}
    if args.rkhs_norm_bound is not None:
        options["rkhs_norm_bound"] = args.rkhs_norm_bound
    ss = harness.trial_seed(seed, args.n, 0)
    t0 = time.perf_counter()
    if args.ratio_model:
        rec = read_json(_readable(args.ratio_model))
        harness.check_version(rec, "ratio model")
        if args.estimator != "truncated":
            raise UsageError("--ratio-model only applies to the truncated estimator")
        ratio = ratio_model_from_dict(rec["model"])
        x, fx = scen.sample_labeled(args.n, np.random.default_rng(ss))
        res = estimate_truncated_ratio(x, fx, ratio, config)
    else:
        res = harness.run_estimator(scen, args.estimator, args.n, ss, config, options)
    wall_ms = (time.perf_counter() - t0) * 1e3
    truth, truth_se = harness.ground_truth(scen, precision=args.truth_precision)
    row = res.csv_row(scen.id, args.n, seed, truth, wall_ms)
    sys.stdout.write(",".join(CSV_FIELDS) + "\n")
    sys.stdout.write(",".join(format_cell(row[k]) for k in CSV_FIELDS) + "\n")
    record = {"format_version": 1, "kind": "estimate", "scenario_id": scen.id, "seed": seed,
              "truth": truth, "truth_stderr": truth_se, "config": config.to_dict(),
              "result": res.to_record()}
    record["result"]["diagnostics"].pop("model", None)
    sys.stdout.write(dumps(record))
    if args.out:
        write_json(_writable(args.out), record)
    if args.save_model:
        path = _writable(args.save_model)
        write_json(path, {"format_version": 1, "kind": "ratio_model",
                          "model": _saved_ratio(res).to_dict()})
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench


def load_plan(path, args=None) -> harness.ExperimentPlan:
    path = _readable(path)
    d = read_json(path)
    scen = None
    if "scenario_path" in d:
        scen_path = Path(d["scenario_path"])
        if not scen_path.is_absolute():
            scen_path = path.parent / scen_path
        scen = harness.ScenarioSpec.from_dict(read_json(_readable(scen_path)))
    if args is not None:
        d = dict(d)
        if args.seed is not None:
            d["root_seed"] = args.seed
        elif "root_seed" not in d:
            d["root_seed"] = _env_seed()
        if args.trials is not None:
            d["trials_per_n"] = args.trials
        if args.n_grid is not None:
            d["n_grid"] = args.n_grid
        cfg = dict(d.get("config") or {})
        cfg.update(_config_overrides(args))
        d["config"] = cfg
    elif "root_seed" not in d:
        d["root_seed"] = _env_seed()
    return harness.ExperimentPlan.from_dict(d, scenario=scen)


def cmd_bench(args) -> int:
    plan = load_plan(args.plan, args)
    out = Path(args.out)
    if out.exists() and not out.is_dir():
        raise UsageError(f"{out} exists and is not a directory")
    out.mkdir(parents=True, exist_ok=True)
    _writable(out / "trials.csv")
    truth, truth_se = harness.plan_truth(plan)
    timing_rows = []
    with RowWriter(out / "trials.csv", harness.TRIAL_FIELDS) as w:
        def sink(rec):
            w.write(vars(rec))
            timing_rows.append({"n": rec.n, "trial_index": rec.trial_index, "wall_ms": rec.wall_ms})
        records = harness.run_plan(plan, workers=args.workers, on_record=sink, truth=truth)
    write_rows_csv(out / "timings.csv", ("n", "trial_index", "wall_ms"), timing_rows)
    rows = harness.summarize(records, plan.config.epsilon)
    write_rows_csv(out / "summary.csv", harness.SUMMARY_FIELDS, rows)
    plan_dict = plan.to_dict()
    report = {"format_version": 1, "provenance": provenance(plan_dict), "plan": plan_dict,
              "truth": truth, "truth_stderr": truth_se,
              "assumptions": harness.measure_assumptions(plan.scenario,
                                                         B=plan.config.ratio_bound),
              "summary": rows, "n_failed": sum(r.failed for r in records)}
    try:
        slope, intercept, r2 = harness.fit_loglog_slope(rows)
        report["loglog_fit"] = {"slope": slope, "intercept": intercept, "r_squared": r2}
    except ValueError as exc:
        report["loglog_fit"] = {"skipped": str(exc)}
    write_json(out / "report.json", report)
    for r in rows:
        print(f"n={r['n']:>8}  median|err|={format_cell(r['median_abs_error']):>22}  "
              f"success@{plan.config.epsilon:g}={format_cell(r['success_rate'])}")
    if "slope" in report["loglog_fit"]:
        fit = report["loglog_fit"]
        print(f"log-log slope {fit['slope']:.4f}  R^2 {fit['r_squared']:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# report


REPORT_REQUIRED = {"estimator", "scenario_id", "n", "success_rate"}


def cmd_report(args) -> int:
    groups = {}
    for p in args.summaries:
        rows = read_rows_csv(_readable(p))
        if not rows:
            raise ConfigError(f"{p}: empty summary")
        missing = REPORT_REQUIRED - set(rows[0])
        if missing:
            raise ConfigError(f"{p}: inconsistent schema, missing column {sorted(missing)[0]!r}")
        for r in rows:
            groups.setdefault((r["scenario_id"], r["estimator"]), []).append(r)
    table = []
    for (sid, est), rows in sorted(groups.items()):
        n_hit, best = harness.n_to_reach(rows, args.target)
        table.append({"scenario_id": sid, "estimator": est,
                      "n_to_target": None if n_hit is None else round(n_hit),
                      "max_success_rate": best})
    lines = [f"| scenario | estimator | n for success >= {args.target:g} |",
             "|---|---|---|"]
    for t in table:
        if t["n_to_target"] is None:
            best = "n/a" if t["max_success_rate"] is None else f"{t['max_success_rate']:.2f}"
            cell = f"– (max {best})"
        else:
            cell = str(t["n_to_target"])
        lines.append(f"| {t['scenario_id']} | {t['estimator']} | {cell} |")
    md = "\n".join(lines) + "\n"
    sys.stdout.write(md)
    if args.out:
        prefix = Path(args.out)
        _writable(prefix)
        prefix.with_name(prefix.name + ".md").write_text(md)
        write_rows_csv(prefix.with_name(prefix.name + ".csv"),
                       ("scenario_id", "estimator", "n_to_target", "max_success_rate"), table)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="covshift", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    sc = sub.add_parser("scenario", help="build a scenario file with measured assumptions")
    sc_sub = sc.add_subparsers(dest="kind", required=True)
    g = sc_sub.add_parser("gaussian")
    g.add_argument("--d", type=int, required=True)
    g.add_argument("--shift", type=float, required=True, help="mean shift along the first axis")
    g.add_argument("--prec-gap", type=float, default=0.0,
                   help="Frobenius gap between the two precision matrices")
    g.add_argument("--isotropic", action="store_true")
    g.add_argument("--warn-only", action="store_true", help="proceed on assumption violations")
    g.add_argument("--f", choices=("halfspace", "tanh", "rbf"), default="halfspace")
    g.add_argument("--f-center", type=float, default=0.5)
    g.add_argument("--f-bandwidth", type=float, default=1.0)
    r = sc_sub.add_parser("rkhs")
    r.add_argument("--alpha", type=float, nargs="+", default=[-0.8])
    r.add_argument("--bandwidth", type=float, default=1.0)
    lb = sc_sub.add_parser("lower-bound")
    lb.add_argument("--eps", type=float, required=True)
    for p in (g, r, lb):
        p.add_argument("--out", help="output path (prefix for lower-bound)")
        p.add_argument("--seed", type=int, default=0)
        if p is not lb:
            p.add_argument("--id")
            p.add_argument("--B", type=float, default=20.0, help="tail-probe threshold")
            p.add_argument("--precision", type=float, default=1e-3,
                           help="Monte-Carlo oracle precision")
    lb.add_argument("--B", type=float, required=True)

    es = sub.add_parser("estimate", help="run one estimator once")
    es.add_argument("--scenario", required=True)
    es.add_argument("--estimator", required=True, choices=harness.ESTIMATORS)
    es.add_argument("--n", type=int, required=True)
    es.add_argument("--seed", type=int)
    es.add_argument("--out", help="write the structured record here")
    es.add_argument("--save-model", help="write the fitted ratio model here")
    es.add_argument("--ratio-model", help="use a saved ratio model (truncated estimator)")
    es.add_argument("--kernel-bandwidth", type=float)
    es.add_argument("--rkhs-norm-bound", type=float)
    es.add_argument("--truth-precision", type=float, default=2e-3)
    _add_config_flags(es)

    be = sub.add_parser("bench", help="run an experiment plan")
    be.add_argument("--plan", required=True)
    be.add_argument("--out", required=True, help="output directory")
    be.add_argument("--workers", type=int, default=1)
    be.add_argument("--seed", type=int)
    be.add_argument("--trials", type=int)
    be.add_argument("--n-grid", type=int, nargs="+")
    _add_config_flags(be)

    rp = sub.add_parser("report", help="compare summaries")
    rp.add_argument("summaries", nargs="+")
    rp.add_argument("--target", type=float, default=0.9)
    rp.add_argument("--out", help="prefix for <out>.md and <out>.csv")
    return parser


COMMANDS = {"scenario": cmd_scenario, "estimate": cmd_estimate, "bench": cmd_bench,
            "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"covshift {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CovshiftError, ArithmeticError, np.linalg.LinAlgError, ValueError) as exc:
        print(f"covshift {args.command}: numeric failure: {type(exc).__name__}: {exc}",
              file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
