"""Problem assembly: variable maps, constraint rows, bounds, envelopes."""

import numpy as np
import pytest

from heatgrid import formulation as fm
from heatgrid.errors import UnsupportedVariant


def nrows(instance, prefix):
    return sum(1 for lbl in instance.eq_labels if lbl.startswith(prefix)), \
        sum(1 for lbl in instance.in_labels if lbl.startswith(prefix))


def test_varmap_is_sorted_and_bijective(micro):
    inst = fm.build(micro, fm.Variant.REFORMULATED, (1, 2))
    keys = inst.varmap.keys
    assert keys == tuple(sorted(keys))
    for i, key in enumerate(keys):
        assert inst.varmap.index(*key) == i
    assert inst.varmap.key(0) == keys[0]


def test_build_is_deterministic(small):
    a = fm.build(small, fm.Variant.MCCORMICK, (1, 3))
    b = fm.build(small, fm.Variant.MCCORMICK, (1, 3))
    assert a.varmap.keys == b.varmap.keys
    assert a.eq_labels == b.eq_labels and a.in_labels == b.in_labels
    assert (a.A_eq != b.A_eq).nnz == 0
    assert (a.A_in != b.A_in).nnz == 0
    assert np.array_equal(a.q, b.q) and np.array_equal(a.b_eq, b.b_eq)


def test_row_families_present(micro):
    inst = fm.build(micro, fm.Variant.REFORMULATED, (1,))
    eq = "\n".join(inst.eq_labels)
    ineq = "\n".join(inst.in_labels)
    for fam in ("heat_balance", "heat_loss", "source_temp", "power_balance",
                "angle_reference", "mass_balance"):
        assert fam in eq, fam
    for fam in ("delivery_window", "injection_window", "line_limit"):
        assert fam in ineq, fam


def test_source_temperature_pinned(micro):
    inst = fm.build(micro, fm.Variant.REFORMULATED, (1,))
    j = inst.varmap.index(fm.TAU_NODE, "src", 1)
    assert inst.lb[j] == inst.ub[j] == 80.0  # tau_source - tau_ambient
    # constant-flow keeps the full window: temperature becomes the control
    cf = fm.build(micro, fm.Variant.CONSTANT_FLOW, (1,))
    jc = cf.varmap.index(fm.TAU_NODE, "src", 1)
    assert cf.lb[jc] == 60.0 and cf.ub[jc] == 85.0


def test_constant_flow_pins_mass_flow(micro):
    cf = fm.build(micro, fm.Variant.CONSTANT_FLOW, (1,))
    for pid in ("p1", "p2"):
        j = cf.varmap.index(fm.M_PIPE, pid, 1)
        assert cf.lb[j] == cf.ub[j] == 0.7
    assert nrows(cf, "fixed_flow_injection")[0] == 2
    assert nrows(cf, "source_temp")[0] == 0


def test_base_has_extra_pipe_temperature_variable(micro):
    base = fm.build(micro, fm.Variant.BASE, (1,))
    ref = fm.build(micro, fm.Variant.REFORMULATED, (1,))
    assert (fm.TAU_PIPE, "p1", 1) in base.varmap
    assert (fm.TAU_PIPE, "p1", 1) not in ref.varmap
    assert len(base.bilinear_terms) == 2 * len(ref.bilinear_terms)


def test_term_bookkeeping_by_variant(micro):
    for variant in fm.Variant:
        inst = fm.build(micro, variant, (1,))
        if variant in (fm.Variant.BASE, fm.Variant.REFORMULATED):
            assert inst.bilinear_terms and not inst.relaxed_terms
        else:
            assert inst.relaxed_terms and not inst.bilinear_terms
        assert inst.audit_terms()


def test_mass_balance_only_at_junctions(small):
    inst = fm.build(small, fm.Variant.REFORMULATED, (1,))
    labels = [lbl for lbl in inst.eq_labels if lbl.startswith("mass_balance")]
    assert len(labels) == 2  # n3 and n4
    assert any("n3" in lbl for lbl in labels)
    assert any("n4" in lbl for lbl in labels)


def test_mccormick_exact_on_degenerate_box(micro):
    """A point box forces H = c*m*tau exactly through the four planes."""
    ref = fm.build(micro, fm.Variant.REFORMULATED, (1,))
    boxes = []
    for tm in ref.bilinear_terms:
        boxes.append((0.9, 0.9, float(ref.lb[tm.tau_var]) or 50.0,
                      float(ref.ub[tm.tau_var])))
    relaxed = fm.relax_bilinear(ref, boxes)
    # collect the four planes of the first term and check they pin the
    # product at the corner m=0.9, tau=tau_lo
    tm = relaxed.relaxed_terms[0]
    m, tau = 0.9, boxes[0][2]
    prod = tm.coeff * m * tau
    A = relaxed.A_in.tocsr()
    labels = relaxed.in_labels
    hvals = []
    x = np.zeros(relaxed.lb.shape[0])
    x[tm.m_var] = m
    x[tm.tau_var] = tau
    for i, lbl in enumerate(labels):
        if "mccormick" in lbl and f"[{tm.pipe_id}," in lbl:
            row = A[i].toarray().ravel()
            coef_h = row[tm.product]
            rest = row @ x - coef_h * x[tm.product]
            # row: rest + coef_h * H <= b  ->  bound on H
            bound = (relaxed.b_in[i] - rest) / coef_h
            hvals.append((coef_h > 0, bound))
    ub = min(b for pos, b in hvals if pos)
    lb = max(b for pos, b in hvals if not pos)
    assert ub == pytest.approx(prod, abs=1e-12)
    assert lb == pytest.approx(prod, abs=1e-12)


def test_relax_requires_reformulated(micro):
    base = fm.build(micro, fm.Variant.BASE, (1,))
    with pytest.raises(UnsupportedVariant):
        fm.apply_mccormick(base)


def test_fix_flows_adds_product_rows(micro):
    ref = fm.build(micro, fm.Variant.REFORMULATED, (1,))
    m_values = {ref.varmap.index(fm.M_PIPE, p, 1): 0.8 for p in ("p1", "p2")}
    pinned = fm.fix_flows(ref, m_values)
    for j in m_values:
        assert pinned.lb[j] == pinned.ub[j] == 0.8
    assert nrows(pinned, "fixed_flow_product")[0] == 2
    assert not pinned.bilinear_terms


def test_objective_value_matches_manual(micro):
    inst = fm.build(micro, fm.Variant.REMOVE_BILINEAR, (1,))
    rng = np.random.default_rng(7)
    x = rng.normal(size=inst.lb.shape[0])
    manual = inst.c0 + inst.q @ x + 0.5 * x @ (inst.Q @ x)
    assert fm.objective_value(inst, x) == pytest.approx(manual, rel=1e-14)


def test_default_term_boxes_match_bounds(micro):
    ref = fm.build(micro, fm.Variant.REFORMULATED, (1,))
    boxes = fm.default_term_boxes(ref)
    for tm, (mlo, mhi, tlo, thi) in zip(ref.bilinear_terms, boxes):
        assert (mlo, mhi) == (ref.lb[tm.m_var], ref.ub[tm.m_var])
        assert (tlo, thi) == (ref.lb[tm.tau_var], ref.ub[tm.tau_var])


def test_lp_text_contains_rows_and_bounds(micro):
    inst = fm.build(micro, fm.Variant.MCCORMICK, (1,))
    lp = fm.to_lp_text(inst)
    assert "Minimize" in lp and "Subject To" in lp and "Bounds" in lp
    assert "mccormick" in lp and "heat_balance" in lp


def test_hours_subset(micro):
    inst = fm.build(micro, fm.Variant.REMOVE_BILINEAR, (2, 4))
    assert inst.hours == (2, 4)
    assert (fm.M_PIPE, "p1", 2) in inst.varmap
    assert (fm.M_PIPE, "p1", 3) not in inst.varmap
