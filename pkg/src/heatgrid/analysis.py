"""Post-solution physics audits and cross-variant comparison reports.

The audits recompute pipe outlet temperatures with the true exponential
cooling law and quantify how far the linearized heat-loss rows drift
from it; the comparison harness runs every model variant on one
instance and assembles an objective/gap/violation matrix.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import formulation as fm
from . import network as net
from .errors import HeatgridError, ValidationError
from .globalsolve import BnbConfig, solve_global
from .qpsolver import QpProblem, SolveStatus, SolverConfig, solve_qp
from .tightening import TighteningConfig, tighten, violation_report

ZERO_FLOW_EPS = 1e-9  # kg/s; below this a pipe temperature is undefined
TAYLOR_PREMISE_DEFAULT = 0.1  # flag pipes with nu*L/(c*m) above this


def value(instance: fm.ProblemInstance, x, kind, ent, hour) -> float:
    return float(x[instance.varmap.index(kind, ent, hour)])


@dataclass
class TemperatureRecovery:
    node_temp: dict[tuple[str, int], float]
    pipe_outlet_temp: dict[tuple[str, int], float | None]
    out_of_window: list[str]


@dataclass
class PipeAudit:
    pipe_id: str
    hour: int
    m: float
    loss_ratio: float  # nu*L/(c*m)
    tau_up: float
    exact_outlet: float
    taylor_outlet: float
    abs_discrepancy: float
    rel_discrepancy: float
    outside_premise: bool


@dataclass
class PhysicsAudit:
    pipes: list[PipeAudit]
    energy_closure: dict[int, float]  # production - load - exact losses
    linear_closure: dict[int, float]  # production - load - linearized losses

    @property
    def flagged(self) -> list[PipeAudit]:
        return [p for p in self.pipes if p.outside_premise]


def recover_temperatures(x, instance: fm.ProblemInstance,
                         model: net.NetworkModel | None = None) -> TemperatureRecovery:
    """Back out nodal and pipe temperatures in degC from a solution."""
    model = model or instance.model
    tau_a = model.ambient_temp
    c = model.specific_heat
    node_temp = {}
    pipe_temp = {}
    flags = []
    for t in instance.hours:
        for nd in model.heat_nodes:
            tau = value(instance, x, fm.TAU_NODE, nd.id, t) + tau_a
            node_temp[(nd.id, t)] = tau
            if not nd.tau_min - 1e-6 <= tau <= nd.tau_max + 1e-6:
                flags.append(f"node {nd.id} t{t}: {tau:.4f} outside "
                             f"[{nd.tau_min}, {nd.tau_max}]")
        for p in model.pipes:
            m = value(instance, x, fm.M_PIPE, p.id, t)
            if m < ZERO_FLOW_EPS:
                pipe_temp[(p.id, t)] = None
                continue
            h_in = value(instance, x, fm.H_IN, p.id, t)
            tau = h_in / (c * m) + tau_a
            pipe_temp[(p.id, t)] = tau
            if not p.tau_pipe_min - 1e-6 <= tau <= p.tau_pipe_max + 1e-6:
                flags.append(f"pipe {p.id} t{t}: outlet {tau:.4f} outside "
                             f"[{p.tau_pipe_min}, {p.tau_pipe_max}]")
    return TemperatureRecovery(node_temp=node_temp, pipe_outlet_temp=pipe_temp,
                               out_of_window=flags)


def exact_heat_loss_audit(x, instance: fm.ProblemInstance,
                          model: net.NetworkModel | None = None,
                          premise_threshold: float = TAYLOR_PREMISE_DEFAULT) -> PhysicsAudit:
    """Recompute outlet temperatures with the exponential cooling law."""
    model = model or instance.model
    tau_a = model.ambient_temp
    c = model.specific_heat
    pipes = []
    closure = {}
    lin_closure = {}
    for t in instance.hours:
        exact_losses = 0.0
        lin_losses = 0.0
        for p in model.pipes:
            m = value(instance, x, fm.M_PIPE, p.id, t)
            tau_up = value(instance, x, fm.TAU_NODE, p.from_node, t)
            nu_l = p.heat_transfer_coeff * p.length
            if m < ZERO_FLOW_EPS:
                continue
            ratio = nu_l / (c * m)
            exact_out = tau_up * np.exp(-ratio) + tau_a
            taylor_out = tau_up * (1.0 - ratio) + tau_a
            pipes.append(PipeAudit(
                pipe_id=p.id, hour=t, m=m, loss_ratio=ratio, tau_up=tau_up,
                exact_outlet=exact_out, taylor_outlet=taylor_out,
                abs_discrepancy=exact_out - taylor_out,
                rel_discrepancy=float(np.exp(-ratio) - (1.0 - ratio)),
                outside_premise=ratio > premise_threshold))
            exact_losses += c * m * tau_up * (1.0 - np.exp(-ratio))
            lin_losses += nu_l * tau_up
        production = 0.0
        load = 0.0
        for u in model.boilers:
            production += value(instance, x, fm.H_HB, u.id, t)
        for u in model.chps:
            production += value(instance, x, fm.H_CHP, u.id, t)
        for nd in model.heat_nodes:
            load += nd.heat_load[t - 1]
        closure[t] = production - load - exact_losses
        lin_closure[t] = production - load - lin_losses
    return PhysicsAudit(pipes=pipes, energy_closure=closure,
                        linear_closure=lin_closure)


def linearized_losses(x, instance: fm.ProblemInstance) -> dict[int, float]:
    """Per-hour sum of nu*L*tau_upstream at the point x."""
    model = instance.model
    out = {}
    for t in instance.hours:
        total = 0.0
        for p in model.pipes:
            nu_l = p.heat_transfer_coeff * p.length
            total += nu_l * value(instance, x, fm.TAU_NODE, p.from_node, t)
        out[t] = total
    return out


def heat_production_minus_load(x, instance: fm.ProblemInstance) -> dict[int, float]:
    model = instance.model
    out = {}
    for t in instance.hours:
        prod = sum(value(instance, x, fm.H_HB, u.id, t) for u in model.boilers)
        prod += sum(value(instance, x, fm.H_CHP, u.id, t) for u in model.chps)
        load = sum(nd.heat_load[t - 1] for nd in model.heat_nodes)
        out[t] = prod - load
    return out


VARIANT_ORDER = (
    "base_global",
    "reformulated_global",
    "remove_bilinear",
    "mccormick",
    "tightening_mccormick",
    "constant_flow",
)


@dataclass
class VariantRow:
    name: str
    objective: float | None
    gap_vs_global: float | None
    wall_time: float | None
    max_violation: float | None
    avg_violation: float | None
    note: str = ""


@dataclass
class ComparisonReport:
    instance_name: str
    hours: tuple[int, ...]
    rows: list[VariantRow]
    config_digest: str = ""

    def row(self, name: str) -> VariantRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)


@dataclass
class CompareConfig:
    bnb: BnbConfig = field(default_factory=BnbConfig)
    tightening: TighteningConfig = field(default_factory=TighteningConfig)
    qp: SolverConfig = field(default_factory=SolverConfig)
    skip_global: bool = False
    per_hour_global: bool = True  # hours decouple; solve them separately


def _convex_run(model, variant, hours, qp_config):
    instance = fm.build(model, variant, hours)
    sol = solve_qp(QpProblem.from_instance(instance), qp_config)
    if sol.status != SolveStatus.OPTIMAL:
        raise HeatgridError(f"{variant.value}: solver returned {sol.status.value}")
    return instance, sol


def _global_run(model, variant, hours, config: CompareConfig):
    if config.per_hour_global and len(hours) > 1:
        total = 0.0
        max_v, sum_v, n_v = 0.0, 0.0, 0
        for t in hours:
            instance = fm.build(model, variant, (t,))
            g = solve_global(instance, config.bnb)
            total += g.upper_bound
            errs, mx, _ = violation_report(g.x, instance)
            max_v = max(max_v, mx)
            sum_v += errs.sum()
            n_v += errs.size
        return total, max_v, (sum_v / n_v if n_v else 0.0)
    instance = fm.build(model, variant, hours)
    g = solve_global(instance, config.bnb)
    errs, mx, avg = violation_report(g.x, instance)
    return g.upper_bound, mx, avg


def compare_variants(model: net.NetworkModel, hours,
                     config: CompareConfig | None = None) -> ComparisonReport:
    """Run all model variants on one instance and tabulate the results."""
    config = config or CompareConfig()
    hours = tuple(hours)
    if not hours:
        raise ValidationError("hour subset must be nonempty")

    rows: dict[str, VariantRow] = {}

    def run(name, fn):
        t0 = time.perf_counter()
        try:
            objective, mx, avg = fn()
            rows[name] = VariantRow(
                name=name, objective=objective, gap_vs_global=None,
                wall_time=time.perf_counter() - t0,
                max_violation=mx, avg_violation=avg)
        except HeatgridError as exc:
            rows[name] = VariantRow(
                name=name, objective=None, gap_vs_global=None,
                wall_time=time.perf_counter() - t0,
                max_violation=None, avg_violation=None,
                note=f"failed: {exc}")

    if config.skip_global:
        for name in ("base_global", "reformulated_global"):
            rows[name] = VariantRow(name=name, objective=None, gap_vs_global=None,
                                    wall_time=None, max_violation=None,
                                    avg_violation=None, note="skipped")
    else:
        run("base_global",
            lambda: _global_run(model, fm.Variant.BASE, hours, config))
        run("reformulated_global",
            lambda: _global_run(model, fm.Variant.REFORMULATED, hours, config))

    def convex(variant):
        instance, sol = _convex_run(model, variant, hours, config.qp)
        _, mx, avg = violation_report(sol.x, instance)
        return sol.objective, mx, avg

    run("remove_bilinear", lambda: convex(fm.Variant.REMOVE_BILINEAR))
    run("mccormick", lambda: convex(fm.Variant.MCCORMICK))

    def tightened():
        result = tighten(model, hours, config.tightening)
        return (result.final_objective, result.final_max_violation,
                result.final_avg_violation)

    run("tightening_mccormick", tightened)
    run("constant_flow", lambda: convex(fm.Variant.CONSTANT_FLOW))

    reference = rows["base_global"].objective
    for r in rows.values():
        if reference is not None and r.objective is not None and reference != 0:
            r.gap_vs_global = abs(r.objective - reference) / abs(reference)
    if reference is not None:
        rows["base_global"].gap_vs_global = 0.0

    return ComparisonReport(
        instance_name=model.name, hours=hours,
        rows=[rows[name] for name in VARIANT_ORDER])


def render_comparison_csv(report: ComparisonReport,
                          include_timings: bool = False) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    header = ["variant", "objective", "gap_vs_global",
              "max_violation", "avg_violation", "note"]
    if include_timings:
        header.insert(3, "wall_time_s")
    w.writerow(header)

    def fmt(v, spec="{:.10g}"):
        return "" if v is None else spec.format(v)

    for r in report.rows:
        row = [r.name, fmt(r.objective), fmt(r.gap_vs_global),
               fmt(r.max_violation), fmt(r.avg_violation), r.note]
        if include_timings:
            row.insert(3, fmt(r.wall_time, "{:.3f}"))
        w.writerow(row)
    return out.getvalue()


def render_comparison_json(report: ComparisonReport,
                           include_timings: bool = False) -> str:
    payload = {
        "instance": report.instance_name,
        "hours": list(report.hours),
        "config_digest": report.config_digest,
        "rows": [
            {
                "variant": r.name,
                "objective": r.objective,
                "gap_vs_global": r.gap_vs_global,
                **({"wall_time_s": r.wall_time} if include_timings else {}),
                "max_violation": r.max_violation,
                "avg_violation": r.avg_violation,
                "note": r.note,
            }
            for r in report.rows
        ],
    }
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def render_audit_csv(audit: PhysicsAudit) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["pipe", "hour", "m_kg_s", "loss_ratio", "tau_up_rel",
                "exact_outlet_c", "taylor_outlet_c", "abs_discrepancy_c",
                "rel_discrepancy", "outside_premise"])
    for p in audit.pipes:
        w.writerow([p.pipe_id, p.hour, f"{p.m:.10g}", f"{p.loss_ratio:.10g}",
                    f"{p.tau_up:.10g}", f"{p.exact_outlet:.10g}",
                    f"{p.taylor_outlet:.10g}", f"{p.abs_discrepancy:.10g}",
                    f"{p.rel_discrepancy:.10g}", int(p.outside_premise)])
    for t in sorted(audit.energy_closure):
        w.writerow(["energy_closure", t, "", "", "", "", "",
                    f"{audit.energy_closure[t]:.10g}",
                    f"{audit.linear_closure[t]:.10g}", ""])
    return out.getvalue()
