"""Spatial branch-and-bound: bounding, branching, incumbents, decomposition."""

import numpy as np
import pytest

from heatgrid import formulation as fm
from heatgrid.errors import NoFeasibleIncumbent
from heatgrid.globalsolve import (
    BnbConfig,
    BnbNode,
    branch,
    solve_global,
    term_violations,
    write_node_log,
)


def test_term_violations_math():
    terms = [fm.BilinearTerm(product=0, m_var=1, tau_var=2, coeff=2.0,
                             pipe_id="p", hour=1)]
    x = np.array([10.0, 2.0, 3.0])  # H=10 vs 2*2*3=12
    assert term_violations(x, terms)[0] == pytest.approx(0.2)
    x = np.array([0.0, 1.0, 1e-7])  # tiny product, floored denominator
    assert term_violations(x, terms)[0] == pytest.approx(2e-7 / 1e-6)


def test_branch_picks_most_violated_and_wider_box():
    terms = [
        fm.BilinearTerm(product=0, m_var=1, tau_var=2, coeff=1.0,
                        pipe_id="a", hour=1),
        fm.BilinearTerm(product=3, m_var=4, tau_var=5, coeff=1.0,
                        pipe_id="b", hour=1),
    ]
    boxes = {1: (0.0, 1.0), 2: (0.0, 10.0), 4: (0.0, 2.0), 5: (0.0, 2.0)}
    widths = {j: hi - lo for j, (lo, hi) in boxes.items()}
    node = BnbNode(boxes=boxes, bound=-np.inf, depth=0, parent=-1, node_id=0)
    # term b violated (1 vs 1*2*2=4), term a exact (0.5*4=2)
    x = np.array([2.0, 0.5, 4.0, 1.0, 2.0, 2.0])
    a, b = branch(node, x, terms, widths, next_id=1)
    changed = [j for j in boxes if a.boxes[j] != boxes[j]]
    assert changed == [4]  # flow var of term b (tie on width -> m first)
    lo, hi = boxes[4]
    # iterate sits at the upper edge; split must be clamped inside
    assert a.boxes[4] == (lo, lo + 0.9 * (hi - lo))
    assert b.boxes[4] == (lo + 0.9 * (hi - lo), hi)
    assert a.depth == b.depth == 1 and {a.node_id, b.node_id} == {1, 2}


def test_branch_prefers_wider_normalized_box():
    terms = [fm.BilinearTerm(product=0, m_var=1, tau_var=2, coeff=1.0,
                             pipe_id="a", hour=1)]
    boxes = {1: (0.45, 0.55), 2: (0.0, 10.0)}
    widths = {1: 1.0, 2: 10.0}  # m box already shrunk to 10%, tau still full
    node = BnbNode(boxes=boxes, bound=-np.inf, depth=0, parent=-1, node_id=0)
    x = np.array([3.0, 0.5, 5.0])
    a, _ = branch(node, x, terms, widths, next_id=1)
    assert a.boxes[1] == boxes[1]      # untouched
    assert a.boxes[2] != boxes[2]      # tau split instead


def test_micro_global_matches_between_variants(micro):
    ref = solve_global(fm.build(micro, fm.Variant.REFORMULATED, (1,)))
    base = solve_global(fm.build(micro, fm.Variant.BASE, (1,)))
    assert ref.gap <= 1e-4 and base.gap <= 1e-4
    assert base.upper_bound == pytest.approx(ref.upper_bound, rel=1e-4)
    # the incumbent satisfies the true bilinear rows
    inst = fm.build(micro, fm.Variant.REFORMULATED, (1,))
    assert term_violations(ref.x, inst.bilinear_terms).max() <= 1e-6


def test_bounds_are_ordered(micro):
    res = solve_global(fm.build(micro, fm.Variant.REFORMULATED, (2,)))
    assert res.lower_bound <= res.upper_bound + 1e-9
    assert res.node_count >= 1
    assert not res.hit_limit


def test_relaxation_below_global(micro):
    from heatgrid.qpsolver import QpProblem, solve_qp

    mc = fm.build(micro, fm.Variant.MCCORMICK, (1,))
    rel = solve_qp(QpProblem.from_instance(mc))
    glob = solve_global(fm.build(micro, fm.Variant.REFORMULATED, (1,)))
    assert rel.objective <= glob.upper_bound + 1e-9


def test_hour_decomposition_consistency(micro):
    joint = solve_global(fm.build(micro, fm.Variant.REFORMULATED, (1, 2)))
    monolithic = solve_global(
        fm.build(micro, fm.Variant.REFORMULATED, (1, 2)),
        BnbConfig(decompose_hours=False))
    assert joint.upper_bound == pytest.approx(monolithic.upper_bound, rel=1e-4)
    per_hour = sum(
        solve_global(fm.build(micro, fm.Variant.REFORMULATED, (t,))).upper_bound
        for t in (1, 2))
    assert joint.upper_bound == pytest.approx(per_hour, rel=1e-10)


def test_zero_terms_single_convex_solve(micro):
    inst = fm.build(micro, fm.Variant.MCCORMICK, (1,))
    res = solve_global(inst)
    assert res.node_count == 1 and res.gap == 0.0


def test_node_limit_flag(micro):
    res = solve_global(fm.build(micro, fm.Variant.REFORMULATED, (1,)),
                       BnbConfig(node_limit=1, gap_tol=1e-12))
    assert res.hit_limit


def test_unbounded_box_rejected(micro):
    inst = fm.build(micro, fm.Variant.REFORMULATED, (1,))
    inst.ub[inst.bilinear_terms[0].m_var] = np.inf
    with pytest.raises(NoFeasibleIncumbent):
        solve_global(inst, BnbConfig(decompose_hours=False))


def test_node_log_csv(tmp_path, micro):
    res = solve_global(fm.build(micro, fm.Variant.REFORMULATED, (1,)))
    path = tmp_path / "nodes.csv"
    write_node_log(path, res)
    lines = path.read_text(encoding="utf-8").strip().splitlines()
    assert lines[0] == "node_id,depth,lower_bound,upper_bound,action"
    assert len(lines) >= 2
