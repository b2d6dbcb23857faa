"""Iterative bound tightening of the McCormick relaxation.

Solve the relaxation, measure the relative error of every bilinear
product at the iterate, and if the worst error is still above the
threshold shrink every flow/temperature box around the iterate by the
scheduled factor, always intersecting with the original physical bounds.
Source-node temperatures are pinned by the model and never tightened.
An optional repair step pins the final flows and re-solves to produce an
exactly feasible plan.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import formulation as fm
from . import network as net
from .errors import FixedFlowInfeasible, ValidationError
from .globalsolve import term_violations
from .qpsolver import QpProblem, SolveStatus, SolverConfig, solve_qp


def geometric_schedule(a: float = 0.5, r: float = 0.5, n: int = 10) -> tuple[float, ...]:
    return tuple(a * r ** k for k in range(n))


class TightenStatus(enum.Enum):
    CONVERGED_BY_DELTA = "converged_by_delta"
    BUDGET_EXHAUSTED = "budget_exhausted"
    RELAXATION_INFEASIBLE = "relaxation_infeasible"


@dataclass
class TighteningConfig:
    delta: float = 0.01
    max_iters: int = 10
    eps_schedule: tuple[float, ...] = field(default_factory=geometric_schedule)
    repair: bool = True
    qp: SolverConfig = field(default_factory=SolverConfig)

    def validate(self):
        if self.delta <= 0:
            raise ValidationError("delta must be positive")
        if self.max_iters < 1:
            raise ValidationError("max_iters must be at least 1")
        sched = self.eps_schedule[:self.max_iters]
        if len(sched) < self.max_iters:
            raise ValidationError(
                f"schedule has {len(self.eps_schedule)} entries for "
                f"max_iters={self.max_iters}")
        if any(not (0 < e < 1) for e in sched):
            raise ValidationError("every schedule entry must lie in (0, 1)")
        if any(b > a + 1e-15 for a, b in zip(sched, sched[1:])):
            raise ValidationError("schedule must be nonincreasing")


@dataclass
class IterationRecord:
    n: int
    objective: float
    max_violation: float
    avg_violation: float
    boxes: dict[int, tuple[float, float]]
    seconds: float


@dataclass
class TighteningResult:
    iterations: list[IterationRecord]
    final_x: np.ndarray
    final_status: TightenStatus
    instance: fm.ProblemInstance
    repaired_x: np.ndarray | None = None
    repaired_objective: float | None = None

    @property
    def final_objective(self) -> float:
        return self.iterations[-1].objective

    @property
    def final_max_violation(self) -> float:
        return self.iterations[-1].max_violation

    @property
    def final_avg_violation(self) -> float:
        return self.iterations[-1].avg_violation


def shrink_box(value: float, eps: float,
               original: tuple[float, float]) -> tuple[float, float]:
    """One tightening update: (1 +- eps) around the iterate, clipped."""
    lo = max((1 - eps) * value, original[0])
    hi = min((1 + eps) * value, original[1])
    if lo > hi:  # iterate escaped the physical box by roundoff
        lo = hi = min(max(value, original[0]), original[1])
    return lo, hi


def violation_report(x: np.ndarray, instance: fm.ProblemInstance):
    """Per-term relative bilinear errors plus max/avg aggregates."""
    terms = instance.audit_terms()
    if not terms:
        return np.zeros(0), 0.0, 0.0
    errs = term_violations(x, terms)
    return errs, float(errs.max()), float(errs.mean())


def tighten(model: net.NetworkModel, hours,
            config: TighteningConfig | None = None) -> TighteningResult:
    """Run the tightening loop on the reformulated model."""
    import time

    config = config or TighteningConfig()
    config.validate()
    instance = fm.build(model, fm.Variant.REFORMULATED, hours)
    terms = instance.bilinear_terms

    source_taus = _source_tau_vars(instance)
    tighten_vars = sorted(
        {tm.m_var for tm in terms}
        | {tm.tau_var for tm in terms if tm.tau_var not in source_taus})
    original = {j: (float(instance.lb[j]), float(instance.ub[j]))
                for j in tighten_vars}
    boxes = dict(original)

    records: list[IterationRecord] = []
    last_x = None
    status = TightenStatus.BUDGET_EXHAUSTED

    for n in range(1, config.max_iters + 1):
        t0 = time.perf_counter()
        term_boxes = [
            (boxes.get(tm.m_var, (instance.lb[tm.m_var], instance.ub[tm.m_var]))[0],
             boxes.get(tm.m_var, (instance.lb[tm.m_var], instance.ub[tm.m_var]))[1],
             boxes.get(tm.tau_var, (instance.lb[tm.tau_var], instance.ub[tm.tau_var]))[0],
             boxes.get(tm.tau_var, (instance.lb[tm.tau_var], instance.ub[tm.tau_var]))[1])
            for tm in terms]
        relaxed = fm.relax_bilinear(instance, term_boxes)
        sol = solve_qp(QpProblem.from_instance(relaxed), config.qp)
        if sol.status != SolveStatus.OPTIMAL:
            if n == 1 or last_x is None:
                raise ValidationError(
                    f"McCormick relaxation not solvable at iteration 1 "
                    f"({sol.status.value})")
            status = TightenStatus.RELAXATION_INFEASIBLE
            break
        last_x = sol.x
        errs = term_violations(sol.x, terms)
        records.append(IterationRecord(
            n=n, objective=sol.objective,
            max_violation=float(errs.max()) if errs.size else 0.0,
            avg_violation=float(errs.mean()) if errs.size else 0.0,
            boxes=dict(boxes), seconds=time.perf_counter() - t0))
        if records[-1].max_violation <= config.delta:
            status = TightenStatus.CONVERGED_BY_DELTA
            break
        if n == config.max_iters:
            break
        eps = config.eps_schedule[n - 1]
        for j in tighten_vars:
            boxes[j] = shrink_box(float(sol.x[j]), eps, original[j])

    result = TighteningResult(
        iterations=records, final_x=last_x, final_status=status,
        instance=instance)

    if config.repair and last_x is not None:
        try:
            rx, robj = repair_fixed_flow(model, hours, last_x,
                                         instance=instance, qp_config=config.qp)
            result.repaired_x = rx
            result.repaired_objective = robj
        except FixedFlowInfeasible:
            pass
    return result


DAMPING_SCALES = (1.0, 0.9995, 0.999, 0.995, 0.99, 0.98, 0.95)


def _project_flows(instance: fm.ProblemInstance, target: dict[int, float],
                   config: SolverConfig) -> dict[int, float] | None:
    """Nearest flow vector inside the box that keeps junctions balanced.

    A damped flow vector can leave a pipe's box when the original flow sits
    on a bound; clipping it back would unbalance the junction it feeds, so
    instead we project the whole vector onto the balanced box.
    """
    cols = sorted(target)
    colset = set(cols)
    A = instance.A_eq.tocsr()
    rows = [i for i in range(A.shape[0])
            if len(support := A.indices[A.indptr[i]:A.indptr[i + 1]])
            and all(j in colset for j in support)]
    if rows:
        A_bal, b_bal = A[rows][:, cols], instance.b_eq[rows]
    else:
        A_bal, b_bal = sp.csr_matrix((0, len(cols))), np.zeros(0)
    t = np.array([target[j] for j in cols])
    prob = QpProblem(
        Q=sp.identity(len(cols), format="csr"), q=-t, c0=0.0,
        A_eq=A_bal, b_eq=b_bal,
        A_in=sp.csr_matrix((0, len(cols))), b_in=np.zeros(0),
        lb=instance.lb[cols], ub=instance.ub[cols])
    sol = solve_qp(prob, config)
    if sol.status != SolveStatus.OPTIMAL:
        return None
    return {j: float(v) for j, v in zip(cols, sol.x)}


def repair_fixed_flow(model: net.NetworkModel, hours, x,
                      instance: fm.ProblemInstance | None = None,
                      qp_config: SolverConfig | None = None):
    """Pin flows at x and re-solve; yields an exactly feasible plan.

    Flows coming from a relaxation can slightly over-deliver: the pinned
    system then has no feasible completion because production terms cannot
    go negative. Scaling every flow by a common factor preserves mass
    balance while shrinking delivery, so a short damping sweep recovers a
    feasible plan whenever one is nearby.
    """
    if instance is None:
        instance = fm.build(model, fm.Variant.REFORMULATED, hours)
    config = qp_config or SolverConfig()
    flows = {tm.m_var: float(x[tm.m_var]) for tm in instance.bilinear_terms}
    last = None
    for scale in DAMPING_SCALES:
        m_values = {j: scale * v for j, v in flows.items()}
        if any(not instance.lb[j] <= v <= instance.ub[j]
               for j, v in m_values.items()):
            m_values = _project_flows(instance, m_values, config)
            if m_values is None:
                continue
        pinned = fm.fix_flows(instance, m_values)
        sol = solve_qp(QpProblem.from_instance(pinned), config)
        if sol.status == SolveStatus.OPTIMAL:
            return sol.x, sol.objective
        last = sol.status.value
    raise FixedFlowInfeasible(
        f"fixed flows cannot serve the loads ({last})")


def _source_tau_vars(instance: fm.ProblemInstance) -> set[int]:
    sources = {n.id for n in instance.model.heat_nodes if n.kind == net.SOURCE}
    out = set()
    for j, (kind, ent, _hour) in enumerate(instance.varmap.keys):
        if kind == fm.TAU_NODE and ent in sources:
            out.add(j)
    return out


def write_iteration_log(path, result: TighteningResult) -> None:
    """CSV export: iteration, objective, max/avg violation, seconds."""
    import csv

    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["n", "objective", "max_violation", "avg_violation", "seconds"])
        for rec in result.iterations:
            w.writerow([rec.n, f"{rec.objective:.10g}",
                        f"{rec.max_violation:.10g}",
                        f"{rec.avg_violation:.10g}", f"{rec.seconds:.4f}"])
