"""Builds indexed optimization problems from a network model.

Five variants share one variable space per hour: pipe mass flows, relative
nodal temperatures (node temperature minus ambient), pipe heat injections
and deliveries, bus angles, and unit outputs. Hours are block-decoupled.

Every constraint row carries a label naming the physical relation it
encodes, e.g. ``heat_balance[n3,t2]`` or ``line_limit_up[l1,t1]``; the
labels double as LP-export row names and as the keys for dual extraction.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np
import scipy.sparse as sp

from . import network as net
from .errors import (
    EmptyBox,
    InfeasibleBoundsError,
    MissingNominalFlow,
    DimensionMismatch,
    UnsupportedVariant,
    ValidationError,
)


class Variant(str, Enum):
    BASE = "base"
    REFORMULATED = "reformulated"
    REMOVE_BILINEAR = "remove-bilinear"
    MCCORMICK = "mccormick"
    CONSTANT_FLOW = "constant-flow"


# variable kinds, ordered deterministically by string sort
M_PIPE = "m_pipe"
TAU_NODE = "tau_tilde_node"
TAU_PIPE = "tau_tilde_pipe"  # base variant only
H_IN = "h_in_pipe"
H_OUT = "h_out_pipe"
THETA = "theta_bus"
P_CHP = "p_chp"
H_CHP = "h_chp"
P_TU = "p_tu"
H_HB = "h_hb"


class VarMap:
    """Bijection between (kind, entity id, hour) keys and column indices."""

    def __init__(self, keys):
        self._keys = tuple(sorted(keys))
        self._index = {k: i for i, k in enumerate(self._keys)}
        if len(self._index) != len(self._keys):
            raise ValidationError("variable map keys are not unique")

    def __len__(self):
        return len(self._keys)

    def __contains__(self, key):
        return key in self._index

    def index(self, kind, entity, hour):
        return self._index[(kind, entity, hour)]

    def key(self, i):
        return self._keys[i]

    @property
    def keys(self):
        return self._keys


@dataclass(frozen=True)
class BilinearTerm:
    """product = coeff * m * tau, indices into the variable map."""
    product: int
    m_var: int
    tau_var: int
    coeff: float
    pipe_id: str
    hour: int


@dataclass(frozen=True)
class ProblemInstance:
    varmap: VarMap
    Q: sp.csr_matrix
    q: np.ndarray
    c0: float
    A_eq: sp.csr_matrix
    b_eq: np.ndarray
    eq_labels: tuple[str, ...]
    A_in: sp.csr_matrix
    b_in: np.ndarray
    in_labels: tuple[str, ...]
    lb: np.ndarray
    ub: np.ndarray
    bilinear_terms: tuple[BilinearTerm, ...]
    variant: Variant
    model: net.NetworkModel
    hours: tuple[int, ...]
    # original bilinear structure preserved through relaxation for auditing
    relaxed_terms: tuple[BilinearTerm, ...] = ()

    @property
    def n(self):
        return len(self.varmap)

    def audit_terms(self) -> tuple[BilinearTerm, ...]:
        return self.bilinear_terms if self.bilinear_terms else self.relaxed_terms


class _Rows:
    def __init__(self, n):
        self.n = n
        self.data, self.ri, self.ci = [], [], []
        self.rhs, self.labels = [], []

    def add(self, coeffs: dict[int, float], rhs: float, label: str):
        r = len(self.rhs)
        for c, v in coeffs.items():
            self.ri.append(r)
            self.ci.append(c)
            self.data.append(float(v))
        self.rhs.append(float(rhs))
        self.labels.append(label)

    def matrix(self):
        m = len(self.rhs)
        A = sp.coo_matrix((self.data, (self.ri, self.ci)), shape=(m, self.n)).tocsr()
        return A, np.array(self.rhs), tuple(self.labels)


def _collect_keys(model: net.NetworkModel, variant: Variant, hours) -> list:
    keys = []
    for t in hours:
        for p in model.pipes:
            keys.append((M_PIPE, p.id, t))
            keys.append((H_IN, p.id, t))
            keys.append((H_OUT, p.id, t))
            if variant == Variant.BASE:
                keys.append((TAU_PIPE, p.id, t))
        for n in model.heat_nodes:
            keys.append((TAU_NODE, n.id, t))
        for b in model.buses:
            keys.append((THETA, b.id, t))
        for u in model.chps:
            keys.append((P_CHP, u.id, t))
            keys.append((H_CHP, u.id, t))
        for u in model.thermal_units:
            keys.append((P_TU, u.id, t))
        for u in model.boilers:
            keys.append((H_HB, u.id, t))
    return keys


def _interval_product(c, mlo, mhi, tlo, thi):
    corners = [c * m * t for m in (mlo, mhi) for t in (tlo, thi)]
    return min(corners), max(corners)


def build(model: net.NetworkModel, variant: Variant | str,
          hours) -> ProblemInstance:
    """Assemble the full planning problem for an hour subset."""
    variant = Variant(variant)
    hours = tuple(hours)
    if not hours:
        raise ValidationError("hour subset must be nonempty")
    for t in hours:
        if not 1 <= t <= model.horizon_hours:
            raise ValidationError(f"hour {t} outside 1..{model.horizon_hours}")
    if variant == Variant.MCCORMICK:
        base = build(model, Variant.REFORMULATED, hours)
        return apply_mccormick(base, None)
    if variant == Variant.CONSTANT_FLOW:
        for p in model.pipes:
            if p.m_nominal is None:
                raise MissingNominalFlow(f"pipe {p.id}: m_nominal missing")

    c = model.specific_heat
    tau_a = model.ambient_temp
    varmap = VarMap(_collect_keys(model, variant, hours))
    n = len(varmap)

    lb = np.full(n, -np.inf)
    ub = np.full(n, np.inf)
    eq = _Rows(n)
    ineq = _Rows(n)
    Qd, Qr, Qc = [], [], []
    q = np.zeros(n)
    c0 = 0.0
    terms: list[BilinearTerm] = []

    in_map, out_map = net.derive_adjacency(model)
    source_ids = {nd.id for nd in model.heat_nodes if nd.kind == net.SOURCE}
    ref_bus = min(b.id for b in model.buses) if model.buses else None

    for t in hours:
        # ---- variable bounds -------------------------------------------------
        for nd in model.heat_nodes:
            j = varmap.index(TAU_NODE, nd.id, t)
            lb[j] = nd.tau_min - tau_a
            ub[j] = nd.tau_max - tau_a
            if nd.kind == net.SOURCE and variant != Variant.CONSTANT_FLOW:
                # pinned supply temperature; the degenerate box keeps
                # McCormick envelopes on source-fed pipes exact
                lb[j] = ub[j] = nd.tau_source - tau_a
        for p in model.pipes:
            jm = varmap.index(M_PIPE, p.id, t)
            if variant == Variant.CONSTANT_FLOW:
                lb[jm] = ub[jm] = p.m_nominal
            else:
                lb[jm], ub[jm] = p.m_min, p.m_max
            jt_up_b = varmap.index(TAU_NODE, p.from_node, t)
            t_up_lo, t_up_hi = lb[jt_up_b], ub[jt_up_b]
            jo = varmap.index(H_OUT, p.id, t)
            lb[jo], ub[jo] = _interval_product(c, lb[jm], ub[jm], t_up_lo, t_up_hi)
            ji = varmap.index(H_IN, p.id, t)
            lo_i, hi_i = _interval_product(
                c, lb[jm], ub[jm], p.tau_pipe_min - tau_a, p.tau_pipe_max - tau_a)
            lb[ji], ub[ji] = lo_i, hi_i
            if variant == Variant.BASE:
                jp = varmap.index(TAU_PIPE, p.id, t)
                lb[jp] = p.tau_pipe_min - tau_a
                ub[jp] = p.tau_pipe_max - tau_a
        for u in model.boilers:
            j = varmap.index(H_HB, u.id, t)
            lb[j], ub[j] = u.h_min, u.h_max
        for u in model.thermal_units:
            j = varmap.index(P_TU, u.id, t)
            lb[j], ub[j] = u.p_min, u.p_max
        for u in model.chps:
            verts = net.validate_chp_region(u)
            jp = varmap.index(P_CHP, u.id, t)
            jh = varmap.index(H_CHP, u.id, t)
            lb[jp], ub[jp] = 0.0, max(v[0] for v in verts)
            lb[jh], ub[jh] = 0.0, max(v[1] for v in verts)

        # ---- district heating block -----------------------------------------
        for nd in model.heat_nodes:
            coeffs: dict[int, float] = {}
            for u in model.units_at_node(nd.id):
                kind = H_HB if isinstance(u, net.HeatingBoiler) else H_CHP
                coeffs[varmap.index(kind, u.id, t)] = 1.0
            for pid in in_map[nd.id]:
                coeffs[varmap.index(H_IN, pid, t)] = 1.0
            for pid in out_map[nd.id]:
                coeffs[varmap.index(H_OUT, pid, t)] = coeffs.get(
                    varmap.index(H_OUT, pid, t), 0.0) - 1.0
            eq.add(coeffs, nd.heat_load[t - 1], f"heat_balance[{nd.id},t{t}]")

            if in_map[nd.id] and out_map[nd.id]:
                mc: dict[int, float] = {}
                for pid in in_map[nd.id]:
                    mc[varmap.index(M_PIPE, pid, t)] = 1.0
                for pid in out_map[nd.id]:
                    j = varmap.index(M_PIPE, pid, t)
                    mc[j] = mc.get(j, 0.0) - 1.0
                eq.add(mc, 0.0, f"mass_balance[{nd.id},t{t}]")

            if nd.kind == net.SOURCE and variant != Variant.CONSTANT_FLOW:
                j = varmap.index(TAU_NODE, nd.id, t)
                eq.add({j: 1.0}, nd.tau_source - tau_a,
                       f"source_temp[{nd.id},t{t}]")

        for p in model.pipes:
            jm = varmap.index(M_PIPE, p.id, t)
            ji = varmap.index(H_IN, p.id, t)
            jo = varmap.index(H_OUT, p.id, t)
            jt_up = varmap.index(TAU_NODE, p.from_node, t)
            nu_l = p.heat_transfer_coeff * p.length

            # linearized heat loss: h_in = h_out - nu*L*tau_up
            eq.add({ji: 1.0, jo: -1.0, jt_up: nu_l}, 0.0,
                   f"heat_loss[{p.id},t{t}]")

            if variant == Variant.BASE:
                jt_pipe = varmap.index(TAU_PIPE, p.id, t)
                terms.append(BilinearTerm(ji, jm, jt_pipe, c, p.id, t))
                terms.append(BilinearTerm(jo, jm, jt_up, c, p.id, t))
            else:
                # flow-dependent delivery/injection windows
                tp_lo, tp_hi = p.tau_pipe_min - tau_a, p.tau_pipe_max - tau_a
                ineq.add({jm: c * tp_lo, ji: -1.0}, 0.0,
                         f"delivery_window_lo[{p.id},t{t}]")
                ineq.add({ji: 1.0, jm: -c * tp_hi}, 0.0,
                         f"delivery_window_hi[{p.id},t{t}]")
                up = model.node(p.from_node)
                tn_lo, tn_hi = up.tau_min - tau_a, up.tau_max - tau_a
                ineq.add({jm: c * tn_lo, jo: -1.0}, 0.0,
                         f"injection_window_lo[{p.id},t{t}]")
                ineq.add({jo: 1.0, jm: -c * tn_hi}, 0.0,
                         f"injection_window_hi[{p.id},t{t}]")

                # injection product structure retained even when a variant
                # drops or linearizes it, so violations stay auditable
                terms.append(BilinearTerm(jo, jm, jt_up, c, p.id, t))
                if variant == Variant.CONSTANT_FLOW:
                    eq.add({jo: 1.0, jt_up: -c * p.m_nominal}, 0.0,
                           f"fixed_flow_injection[{p.id},t{t}]")

        # ---- electric block --------------------------------------------------
        base_mva = model.base_power
        for b in model.buses:
            coeffs = {}
            for u in model.units_at_bus(b.id):
                kind = P_CHP if isinstance(u, net.ChpUnit) else P_TU
                coeffs[varmap.index(kind, u.id, t)] = 1.0 / base_mva
            for ln in model.lines:
                if b.id not in (ln.from_bus, ln.to_bus):
                    continue
                other = ln.to_bus if ln.from_bus == b.id else ln.from_bus
                jt = varmap.index(THETA, b.id, t)
                jo2 = varmap.index(THETA, other, t)
                coeffs[jt] = coeffs.get(jt, 0.0) - 1.0 / ln.reactance
                coeffs[jo2] = coeffs.get(jo2, 0.0) + 1.0 / ln.reactance
            eq.add(coeffs, b.p_load[t - 1] / base_mva,
                   f"power_balance[{b.id},t{t}]")
        if ref_bus is not None:
            eq.add({varmap.index(THETA, ref_bus, t): 1.0}, 0.0,
                   f"angle_reference[{ref_bus},t{t}]")
        for ln in model.lines:
            jf = varmap.index(THETA, ln.from_bus, t)
            jt = varmap.index(THETA, ln.to_bus, t)
            x = ln.reactance
            cap = ln.p_max / base_mva
            ineq.add({jf: 1.0 / x, jt: -1.0 / x}, cap,
                     f"line_limit_up[{ln.id},t{t}]")
            ineq.add({jf: -1.0 / x, jt: 1.0 / x}, cap,
                     f"line_limit_dn[{ln.id},t{t}]")

        # ---- unit operating regions and costs --------------------------------
        for u in model.chps:
            jp = varmap.index(P_CHP, u.id, t)
            jh = varmap.index(H_CHP, u.id, t)
            for k, (a, bb, d) in enumerate(u.region):
                ineq.add({jp: a, jh: bb}, d, f"chp_region[{u.id},r{k},t{t}]")
            cc0, cc1, cc2, cc3, cc4, cc5 = u.cost
            c0 += cc0
            q[jp] += cc1
            q[jh] += cc3
            if cc2:
                Qr.append(jp); Qc.append(jp); Qd.append(2 * cc2)
            if cc4:
                Qr.append(jh); Qc.append(jh); Qd.append(2 * cc4)
            if cc5:
                Qr.append(jp); Qc.append(jh); Qd.append(cc5)
                Qr.append(jh); Qc.append(jp); Qd.append(cc5)
        for u in model.thermal_units:
            jp = varmap.index(P_TU, u.id, t)
            q[jp] += u.cost_c1
            if u.cost_c2:
                Qr.append(jp); Qc.append(jp); Qd.append(2 * u.cost_c2)
        for u in model.boilers:
            q[varmap.index(H_HB, u.id, t)] += u.cost_c

    if np.any(lb > ub + 1e-15):
        bad = int(np.argmax(lb - ub))
        raise InfeasibleBoundsError(
            f"variable {varmap.key(bad)}: empty bound interval [{lb[bad]}, {ub[bad]}]")

    A_eq, b_eq, eq_labels = eq.matrix()
    A_in, b_in, in_labels = ineq.matrix()
    Q = sp.coo_matrix((Qd, (Qr, Qc)), shape=(n, n)).tocsr()

    keep_bilinear = variant in (Variant.BASE, Variant.REFORMULATED)
    return ProblemInstance(
        varmap=varmap, Q=Q, q=q, c0=c0,
        A_eq=A_eq, b_eq=b_eq, eq_labels=eq_labels,
        A_in=A_in, b_in=b_in, in_labels=in_labels,
        lb=lb, ub=ub,
        bilinear_terms=tuple(terms) if keep_bilinear else (),
        relaxed_terms=() if keep_bilinear else tuple(terms),
        variant=variant, model=model, hours=hours,
    )


def default_term_boxes(instance: ProblemInstance,
                       terms=None) -> list[tuple[float, float, float, float]]:
    """Physical boxes (m_lo, m_hi, tau_lo, tau_hi) per bilinear term."""
    terms = instance.bilinear_terms if terms is None else terms
    return [
        (instance.lb[tm.m_var], instance.ub[tm.m_var],
         instance.lb[tm.tau_var], instance.ub[tm.tau_var])
        for tm in terms
    ]


def relax_bilinear(instance: ProblemInstance,
                   term_boxes=None) -> ProblemInstance:
    """Replace every bilinear term with its four-plane McCormick envelope.

    Works for any variant carrying bilinear terms; the public
    apply_mccormick wrapper adds the reformulated-variant precondition.
    """
    terms = instance.bilinear_terms
    if term_boxes is None:
        term_boxes = default_term_boxes(instance)
    if len(term_boxes) != len(terms):
        raise DimensionMismatch(
            f"{len(term_boxes)} boxes supplied for {len(terms)} bilinear terms")

    n = instance.n
    ex = _Rows(n)
    lb = instance.lb.copy()
    ub = instance.ub.copy()
    for tm, (mlo, mhi, tlo, thi) in zip(terms, term_boxes):
        if mlo > mhi or tlo > thi:
            raise EmptyBox(
                f"pipe {tm.pipe_id} t{tm.hour}: empty box "
                f"m[{mlo},{mhi}] tau[{tlo},{thi}]")
        c = tm.coeff
        h, m, ta = tm.product, tm.m_var, tm.tau_var
        tag = f"[{tm.pipe_id},t{tm.hour}]"
        # lower envelopes: H >= c(m_lo*tau + tau_lo*m - m_lo*tau_lo) etc.
        ex.add({h: -1.0, ta: c * mlo, m: c * tlo}, c * mlo * tlo,
               f"mccormick_lo1{tag}")
        ex.add({h: -1.0, ta: c * mhi, m: c * thi}, c * mhi * thi,
               f"mccormick_lo2{tag}")
        # upper envelopes
        ex.add({h: 1.0, ta: -c * mhi, m: -c * tlo}, -c * mhi * tlo,
               f"mccormick_up1{tag}")
        ex.add({h: 1.0, ta: -c * mlo, m: -c * thi}, -c * mlo * thi,
               f"mccormick_up2{tag}")
        lb[m] = max(lb[m], mlo)
        ub[m] = min(ub[m], mhi)
        lb[ta] = max(lb[ta], tlo)
        ub[ta] = min(ub[ta], thi)
        plo, phi = _interval_product(c, mlo, mhi, tlo, thi)
        lb[h] = max(lb[h], plo)
        ub[h] = min(ub[h], phi)
    if np.any(lb > ub + 1e-12):
        bad = int(np.argmax(lb - ub))
        raise InfeasibleBoundsError(
            f"variable {instance.varmap.key(bad)}: empty interval after box "
            f"intersection [{lb[bad]}, {ub[bad]}]")

    A_ex, b_ex, ex_labels = ex.matrix()
    return replace(
        instance,
        A_in=sp.vstack([instance.A_in, A_ex]).tocsr(),
        b_in=np.concatenate([instance.b_in, b_ex]),
        in_labels=instance.in_labels + ex_labels,
        lb=lb, ub=ub,
        bilinear_terms=(),
        relaxed_terms=instance.audit_terms(),
        variant=Variant.MCCORMICK,
    )


def apply_mccormick(instance: ProblemInstance,
                    bounds=None) -> ProblemInstance:
    """McCormick-relax a reformulated instance under per-term boxes."""
    if instance.variant != Variant.REFORMULATED:
        raise UnsupportedVariant(
            f"apply_mccormick expects a reformulated instance, got {instance.variant.value}")
    return relax_bilinear(instance, bounds)


def fix_flows(instance: ProblemInstance, m_values: dict[int, float]) -> ProblemInstance:
    """Pin mass flows and linearize every bilinear term at those flows.

    m_values maps a flow column index to its pinned value; every bilinear
    term whose flow factor is pinned becomes the linear equality
    product = coeff * m* * tau.
    """
    lb = instance.lb.copy()
    ub = instance.ub.copy()
    ex = _Rows(instance.n)
    for j, v in m_values.items():
        v = min(max(v, instance.lb[j]), instance.ub[j])
        lb[j] = ub[j] = v
    remaining = []
    for tm in instance.bilinear_terms:
        if tm.m_var in m_values:
            mv = lb[tm.m_var]
            ex.add({tm.product: 1.0, tm.tau_var: -tm.coeff * mv}, 0.0,
                   f"fixed_flow_product[{tm.pipe_id},t{tm.hour}]")
        else:
            remaining.append(tm)
    A_ex, b_ex, ex_labels = ex.matrix()
    return replace(
        instance,
        A_eq=sp.vstack([instance.A_eq, A_ex]).tocsr(),
        b_eq=np.concatenate([instance.b_eq, b_ex]),
        eq_labels=instance.eq_labels + ex_labels,
        lb=lb, ub=ub,
        bilinear_terms=tuple(remaining),
        relaxed_terms=instance.audit_terms(),
    )


def objective_value(instance: ProblemInstance, x: np.ndarray) -> float:
    """Evaluate c0 + q'x + x'Qx/2 at a point; no feasibility check."""
    x = np.asarray(x, dtype=float)
    if x.shape != (instance.n,):
        raise DimensionMismatch(
            f"point has shape {x.shape}, expected ({instance.n},)")
    return float(instance.c0 + instance.q @ x + 0.5 * x @ (instance.Q @ x))


def to_lp_text(instance: ProblemInstance) -> str:
    """Human-readable LP-format export for external cross-checks."""
    vm = instance.varmap

    def vname(j):
        kind, ent, hour = vm.key(j)
        return f"{kind}({ent},t{hour})".replace(" ", "")

    def lin(coeffs):
        parts = []
        for j, v in coeffs:
            if v == 0:
                continue
            sign = "+" if v >= 0 else "-"
            parts.append(f"{sign} {abs(v):.12g} {vname(j)}")
        return " ".join(parts) if parts else "0"

    out = io.StringIO()
    out.write(f"\\ variant={instance.variant.value} hours={list(instance.hours)}\n")
    out.write("Minimize\n obj: ")
    out.write(lin([(j, instance.q[j]) for j in range(instance.n) if instance.q[j]]))
    Qc = instance.Q.tocoo()
    if Qc.nnz:
        quad = " + ".join(
            f"{v:.12g} {vname(i)} * {vname(j)}"
            for i, j, v in zip(Qc.row, Qc.col, Qc.data) if i <= j)
        out.write(f" + [ {quad} ] / 2")
    out.write("\nSubject To\n")
    A = instance.A_eq.tocsr()
    for r, label in enumerate(instance.eq_labels):
        row = A.getrow(r)
        out.write(f" {label}: {lin(zip(row.indices, row.data))} = "
                  f"{instance.b_eq[r]:.12g}\n")
    A = instance.A_in.tocsr()
    for r, label in enumerate(instance.in_labels):
        row = A.getrow(r)
        out.write(f" {label}: {lin(zip(row.indices, row.data))} <= "
                  f"{instance.b_in[r]:.12g}\n")
    for tm in instance.bilinear_terms:
        out.write(f" bilinear[{tm.pipe_id},t{tm.hour}]: {vname(tm.product)} = "
                  f"{tm.coeff:.12g} {vname(tm.m_var)} * {vname(tm.tau_var)}\n")
    out.write("Bounds\n")
    for j in range(instance.n):
        lo, hi = instance.lb[j], instance.ub[j]
        lo_s = "-inf" if lo == -np.inf else f"{lo:.12g}"
        hi_s = "+inf" if hi == np.inf else f"{hi:.12g}"
        out.write(f" {lo_s} <= {vname(j)} <= {hi_s}\n")
    out.write("End\n")
    return out.getvalue()
