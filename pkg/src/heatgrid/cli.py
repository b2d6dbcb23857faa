"""Command-line entry point: solve, compare, check.

Exit codes: 0 success, 1 usage/data error, 2 infeasible,
3 budget exhausted with an incumbent, 4 violation tolerance exceeded.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import analysis, formulation as fm, network as net
from .errors import HeatgridError
from .globalsolve import BnbConfig, solve_global, write_node_log
from .qpsolver import QpProblem, SolveStatus, SolverConfig, extract_duals, solve_qp
from .tightening import (
    TighteningConfig,
    TightenStatus,
    tighten,
    violation_report,
    write_iteration_log,
)


def parse_hours(text: str, horizon: int) -> tuple[int, ...]:
    """Hour selection grammar: 'all', 'a..b' inclusive, or a single hour."""
    if text == "all":
        return tuple(range(1, horizon + 1))
    if ".." in text:
        a, b = text.split("..", 1)
        hours = tuple(range(int(a), int(b) + 1))
    else:
        hours = (int(text),)
    if not hours or hours[0] < 1 or hours[-1] > horizon:
        raise HeatgridError(f"hour selection {text!r} outside 1..{horizon}")
    return hours


def parse_schedule(text: str) -> tuple[float, ...]:
    """Schedule grammar: 'geom:a,r' or 'list:v1,v2,...'."""
    kind, _, body = text.partition(":")
    if kind == "geom":
        a, r = (float(v) for v in body.split(","))
        sched = tuple(a * r ** k for k in range(64))
    elif kind == "list":
        sched = tuple(float(v) for v in body.split(","))
    else:
        raise HeatgridError(f"unknown schedule kind {kind!r} (use geom: or list:)")
    if any(b > a + 1e-15 for a, b in zip(sched, sched[1:])):
        raise HeatgridError("schedule must be nonincreasing")
    return sched


def config_digest(payload: dict) -> str:
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _write_solution(path: Path, instance, x, digest: str, extra: dict | None = None):
    values = {
        f"{kind}[{ent},t{hour}]": float(x[i])
        for i, (kind, ent, hour) in enumerate(instance.varmap.keys)
    }
    payload = {
        "artifact_version": __version__,
        "config_digest": digest,
        "variant": instance.variant.value,
        "hours": list(instance.hours),
        "objective": fm.objective_value(instance, x),
        "variables": values,
    }
    if extra:
        payload.update(extra)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


def _write_violations(path: Path, instance, x):
    errs, mx, avg = violation_report(x, instance)
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["pipe", "hour", "rel_violation"])
    for tm, e in zip(instance.audit_terms(), errs):
        w.writerow([tm.pipe_id, tm.hour, f"{e:.10g}"])
    w.writerow(["max", "", f"{mx:.10g}"])
    w.writerow(["avg", "", f"{avg:.10g}"])
    path.write_text(out.getvalue(), encoding="utf-8")


def _write_duals(path: Path, instance, solution):
    prices = extract_duals(solution, instance)
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["commodity", "entity", "hour", "price_per_mwh"])
    for (ent, t), v in sorted(prices["heat"].items()):
        w.writerow(["heat", ent, t, f"{v:.10g}"])
    for (ent, t), v in sorted(prices["power"].items()):
        w.writerow(["power", ent, t, f"{v:.10g}"])
    path.write_text(out.getvalue(), encoding="utf-8")


def cmd_solve(args) -> int:
    model = net.load_network(args.network)
    hours = parse_hours(args.hours, model.horizon_hours)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    digest = config_digest({
        "command": "solve", "network": Path(args.network).name,
        "variant": args.variant, "hours": args.hours, "tol": args.tol,
        "gap_tol": args.gap_tol, "feas_tol": args.feas_tol,
        "delta": args.delta, "eps": args.eps, "max_iters": args.max_iters,
    })
    qp_config = SolverConfig(tol=args.tol)

    if args.variant == "tightening":
        config = TighteningConfig(
            delta=args.delta, max_iters=args.max_iters,
            eps_schedule=parse_schedule(args.eps), qp=qp_config)
        result = tighten(model, hours, config)
        x = result.repaired_x if result.repaired_x is not None else result.final_x
        _write_solution(outdir / "solution.json", result.instance, x, digest,
                        extra={"tightening_status": result.final_status.value,
                               "repaired": result.repaired_x is not None})
        _write_violations(outdir / "violations.csv", result.instance, x)
        write_iteration_log(outdir / "iterations.csv", result)
        if result.final_status == TightenStatus.CONVERGED_BY_DELTA or \
                result.repaired_x is not None:
            return 0
        return 3

    variant = fm.Variant(args.variant)
    instance = fm.build(model, variant, hours)

    if instance.bilinear_terms:
        config = BnbConfig(gap_tol=args.gap_tol, feas_tol=args.feas_tol,
                           node_limit=args.node_limit,
                           time_limit=args.time_limit, qp=qp_config)
        g = solve_global(instance, config)
        _write_solution(outdir / "solution.json", instance, g.x, digest,
                        extra={"gap": g.gap, "lower_bound": g.lower_bound,
                               "nodes": g.node_count})
        _write_violations(outdir / "violations.csv", instance, g.x)
        if args.node_log:
            write_node_log(outdir / "nodes.csv", g)
        if args.lp:
            (outdir / "problem.lp").write_text(fm.to_lp_text(instance),
                                               encoding="utf-8")
        return 3 if g.hit_limit else 0

    sol = solve_qp(QpProblem.from_instance(instance), qp_config)
    if sol.status == SolveStatus.PRIMAL_INFEASIBLE:
        print(f"infeasible: {sol.message}", file=sys.stderr)
        return 2
    if sol.status != SolveStatus.OPTIMAL:
        print(f"solver failed: {sol.status.value} {sol.message}", file=sys.stderr)
        return 1
    _write_solution(outdir / "solution.json", instance, sol.x, digest)
    _write_duals(outdir / "duals.csv", instance, sol)
    _write_violations(outdir / "violations.csv", instance, sol.x)
    if args.lp:
        (outdir / "problem.lp").write_text(fm.to_lp_text(instance), encoding="utf-8")
    return 0


def cmd_compare(args) -> int:
    model = net.load_network(args.network)
    hours = parse_hours(args.hours, model.horizon_hours)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    digest = config_digest({
        "command": "compare", "network": Path(args.network).name,
        "hours": args.hours, "tol": args.tol, "gap_tol": args.gap_tol,
        "skip_global": args.skip_global,
    })
    config = analysis.CompareConfig(
        bnb=BnbConfig(gap_tol=args.gap_tol, feas_tol=args.feas_tol,
                      qp=SolverConfig(tol=args.tol)),
        tightening=TighteningConfig(qp=SolverConfig(tol=args.tol)),
        qp=SolverConfig(tol=args.tol),
        skip_global=args.skip_global)
    report = analysis.compare_variants(model, hours, config)
    report.config_digest = digest

    stem = outdir / model.name
    # timings vary run to run; they go to a sidecar unless inlined explicitly
    Path(f"{stem}.comparison.csv").write_text(
        analysis.render_comparison_csv(report, include_timings=args.timings),
        encoding="utf-8")
    Path(f"{stem}.comparison.json").write_text(
        analysis.render_comparison_json(report, include_timings=args.timings),
        encoding="utf-8")
    if not args.timings:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["variant", "wall_time_s"])
        for r in report.rows:
            w.writerow([r.name, "" if r.wall_time is None else f"{r.wall_time:.3f}"])
        Path(f"{stem}.timings.csv").write_text(out.getvalue(), encoding="utf-8")
    failed = [r for r in report.rows if r.note.startswith("failed")]
    return 1 if failed else 0


def cmd_check(args) -> int:
    model = net.load_network(args.network)
    try:
        payload = json.loads(Path(args.solution).read_text(encoding="utf-8"))
        variant = fm.Variant(payload["variant"])
        hours = tuple(payload["hours"])
        variables = payload["variables"]
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        print(f"cannot parse solution file: {exc}", file=sys.stderr)
        return 1
    instance = fm.build(model, variant, hours)
    x = np.zeros(instance.n)
    missing = []
    for i, (kind, ent, hour) in enumerate(instance.varmap.keys):
        key = f"{kind}[{ent},t{hour}]"
        if key not in variables:
            missing.append(key)
        else:
            x[i] = variables[key]
    if missing or len(variables) != instance.n:
        print(f"solution does not match network dimensions "
              f"({len(missing)} missing, {len(variables)} given, "
              f"{instance.n} expected)", file=sys.stderr)
        return 1

    errs, mx, avg = violation_report(x, instance)
    audit = analysis.exact_heat_loss_audit(x, instance, model)
    print(f"bilinear violations: max={mx:.6g} avg={avg:.6g} over {errs.size} terms")
    worst = max((abs(p.abs_discrepancy) for p in audit.pipes), default=0.0)
    print(f"exact-vs-linearized outlet temperature discrepancy: "
          f"max {worst:.6g} degC; {len(audit.flagged)} pipes outside premise")
    for t in sorted(audit.energy_closure):
        print(f"hour {t}: energy closure (exact losses) "
              f"{audit.energy_closure[t]:+.6g} MW")
    return 0 if mx <= args.tolerance else 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="heatgrid",
        description="Planning toolkit for integrated heat and electricity systems")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--network", required=True, help="network JSON file")
    common.add_argument("--hours", default="all",
                        help="hour selection, e.g. 1..24 or 'all' (default)")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--tol", type=float, default=1e-8, help="QP solver tolerance")
    common.add_argument("--gap-tol", type=float, default=1e-4)
    common.add_argument("--feas-tol", type=float, default=1e-6)
    common.add_argument("--workers", type=int, default=1)

    ps = sub.add_parser("solve", parents=[common], help="solve one variant")
    ps.add_argument("--variant", required=True,
                    choices=[v.value for v in fm.Variant] + ["tightening"])
    ps.add_argument("--delta", type=float, default=0.01)
    ps.add_argument("--eps", default="geom:0.5,0.5")
    ps.add_argument("--max-iters", type=int, default=10)
    ps.add_argument("--node-limit", type=int, default=100_000)
    ps.add_argument("--time-limit", type=float, default=600.0)
    ps.add_argument("--node-log", action="store_true")
    ps.add_argument("--lp", action="store_true", help="also export LP text")
    ps.set_defaults(fn=cmd_solve)

    pc = sub.add_parser("compare", parents=[common],
                        help="run the cross-variant comparison harness")
    pc.add_argument("--skip-global", action="store_true")
    pc.add_argument("--timings", action="store_true",
                    help="inline wall times into the report files")
    pc.set_defaults(fn=cmd_compare)

    pk = sub.add_parser("check", help="audit a solution file")
    pk.add_argument("--network", required=True)
    pk.add_argument("--solution", required=True)
    pk.add_argument("--tolerance", type=float, default=0.08)
    pk.set_defaults(fn=cmd_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except HeatgridError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
