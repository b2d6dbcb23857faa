"""The embedded interior-point solver: known solutions, certificates, duals."""

import numpy as np
import pytest
import scipy.sparse as sp

from heatgrid import formulation as fm
from heatgrid.errors import NotOptimal
from heatgrid.qpsolver import (
    QpProblem,
    SolveStatus,
    SolverConfig,
    extract_duals,
    solve_qp,
)


def dense_problem(Q, q, A_eq=None, b_eq=None, A_in=None, b_in=None,
                  lb=None, ub=None, c0=0.0):
    n = len(q)
    A_eq = np.zeros((0, n)) if A_eq is None else np.atleast_2d(A_eq)
    A_in = np.zeros((0, n)) if A_in is None else np.atleast_2d(A_in)
    return QpProblem(
        Q=sp.csr_matrix(np.atleast_2d(Q)),
        q=np.asarray(q, float),
        c0=c0,
        A_eq=sp.csr_matrix(A_eq),
        b_eq=np.zeros(0) if b_eq is None else np.asarray(b_eq, float),
        A_in=sp.csr_matrix(A_in),
        b_in=np.zeros(0) if b_in is None else np.asarray(b_in, float),
        lb=np.full(n, -np.inf) if lb is None else np.asarray(lb, float),
        ub=np.full(n, np.inf) if ub is None else np.asarray(ub, float),
    )


def test_projection_with_equality():
    # min (x-1)^2 + (y-1)^2  s.t. x + y = 0  ->  x = y = 0, y_eq = -2
    prob = dense_problem(Q=2 * np.eye(2), q=[-2.0, -2.0],
                         A_eq=[[1.0, 1.0]], b_eq=[0.0], c0=2.0)
    sol = solve_qp(prob)
    assert sol.status == SolveStatus.OPTIMAL
    assert sol.x == pytest.approx([0.0, 0.0], abs=1e-8)
    assert sol.objective == pytest.approx(2.0, abs=1e-8)
    assert sol.y_eq[0] == pytest.approx(-2.0, abs=1e-7)


def test_box_constrained_lp():
    # min -x - 2y  s.t. x + y <= 1.5, 0 <= x,y <= 1  ->  (0.5, 1)
    prob = dense_problem(Q=np.zeros((2, 2)), q=[-1.0, -2.0],
                         A_in=[[1.0, 1.0]], b_in=[1.5],
                         lb=[0.0, 0.0], ub=[1.0, 1.0])
    sol = solve_qp(prob)
    assert sol.status == SolveStatus.OPTIMAL
    assert sol.x == pytest.approx([0.5, 1.0], abs=1e-7)
    assert sol.z_in[0] == pytest.approx(1.0, abs=1e-6)   # row multiplier
    assert sol.z_hi[1] == pytest.approx(1.0, abs=1e-6)   # active upper bound


def test_fixed_variable_presolve():
    # pinning x via lb == ub must agree with substituting it out
    prob = dense_problem(Q=2 * np.eye(2), q=[0.0, -4.0],
                         A_in=[[1.0, 1.0]], b_in=[4.0],
                         lb=[1.0, -np.inf], ub=[1.0, np.inf])
    sol = solve_qp(prob)
    assert sol.status == SolveStatus.OPTIMAL
    assert sol.x == pytest.approx([1.0, 2.0], abs=1e-8)


def test_pure_equality_path():
    prob = dense_problem(Q=2 * np.eye(2), q=[0.0, 0.0],
                         A_eq=[[1.0, -1.0]], b_eq=[2.0])
    sol = solve_qp(prob)
    assert sol.status == SolveStatus.OPTIMAL
    assert sol.x == pytest.approx([1.0, -1.0], abs=1e-9)


def test_contradictory_bounds():
    prob = dense_problem(Q=np.eye(1), q=[0.0], lb=[2.0], ub=[1.0])
    sol = solve_qp(prob)
    assert sol.status == SolveStatus.PRIMAL_INFEASIBLE
    assert sol.certificate is not None


def test_infeasible_rows():
    # x >= 2 and x <= 1 expressed as inequality rows
    prob = dense_problem(Q=np.zeros((1, 1)), q=[1.0],
                         A_in=[[-1.0], [1.0]], b_in=[-2.0, 1.0])
    sol = solve_qp(prob)
    assert sol.status == SolveStatus.PRIMAL_INFEASIBLE


def test_unbounded_direction():
    prob = dense_problem(Q=np.zeros((1, 1)), q=[-1.0],
                         A_in=[[-1.0]], b_in=[0.0])  # x >= 0, min -x
    sol = solve_qp(prob)
    assert sol.status in (SolveStatus.DUAL_INFEASIBLE,
                          SolveStatus.NUMERICAL_FAILURE,
                          SolveStatus.ITER_LIMIT)
    assert sol.status == SolveStatus.DUAL_INFEASIBLE


def random_feasible_qp(rng, n):
    m = rng.integers(n // 2, n + 1)
    p = rng.integers(0, max(n // 4, 1) + 1)
    M = rng.normal(size=(n, n)) / np.sqrt(n)
    Q = M.T @ M + 1e-3 * np.eye(n)
    x0 = rng.normal(size=n)
    A_in = rng.normal(size=(m, n))
    b_in = A_in @ x0 + rng.uniform(0.1, 1.0, size=m)
    A_eq = rng.normal(size=(p, n))
    b_eq = A_eq @ x0
    lb = x0 - rng.uniform(0.5, 3.0, size=n)
    ub = x0 + rng.uniform(0.5, 3.0, size=n)
    q = rng.normal(size=n)
    return dense_problem(Q=Q, q=q, A_eq=A_eq, b_eq=b_eq,
                         A_in=A_in, b_in=b_in, lb=lb, ub=ub)


def kkt_residuals(prob, sol):
    scale_q = 1.0 + np.abs(prob.q).max()
    scale_b = 1.0 + max(np.abs(prob.b_eq).max(initial=0.0),
                        np.abs(prob.b_in).max(initial=0.0),
                        np.abs(prob.lb[np.isfinite(prob.lb)]).max(initial=0.0),
                        np.abs(prob.ub[np.isfinite(prob.ub)]).max(initial=0.0))
    return sol.primal_res / scale_b, sol.dual_res / scale_q, sol.rel_gap


def test_random_qps_reach_kkt():
    rng = np.random.default_rng(42)
    for _ in range(10):
        n = int(rng.integers(5, 60))
        prob = random_feasible_qp(rng, n)
        sol = solve_qp(prob)
        assert sol.status == SolveStatus.OPTIMAL
        rp, rd, gap = kkt_residuals(prob, sol)
        assert rp <= 1e-8 and rd <= 1e-8 and gap <= 1e-8


def test_objective_scaling_equivariance():
    rng = np.random.default_rng(3)
    prob = random_feasible_qp(rng, 20)
    sigma = 13.7
    scaled = QpProblem(Q=prob.Q * sigma, q=prob.q * sigma, c0=prob.c0 * sigma,
                       A_eq=prob.A_eq, b_eq=prob.b_eq,
                       A_in=prob.A_in, b_in=prob.b_in,
                       lb=prob.lb, ub=prob.ub)
    cfg = SolverConfig(tol=1e-11)
    a = solve_qp(prob, cfg)
    b = solve_qp(scaled, cfg)
    assert b.x == pytest.approx(a.x, abs=1e-6)
    assert b.objective == pytest.approx(sigma * a.objective, rel=1e-8)
    assert b.y_eq == pytest.approx(sigma * a.y_eq, abs=1e-5)


def test_psd_validation():
    good = dense_problem(Q=np.eye(2), q=[0.0, 0.0])
    good.validate_psd()
    bad = dense_problem(Q=np.diag([1.0, -1.0]), q=[0.0, 0.0])
    with pytest.raises(Exception):
        bad.validate_psd()


def test_extract_duals_prices(micro):
    inst = fm.build(micro, fm.Variant.REMOVE_BILINEAR, (1,))
    sol = solve_qp(QpProblem.from_instance(inst))
    prices = extract_duals(sol, inst)
    # cheap source boiler is marginal for heat everywhere on the chain
    for node in ("src", "jct", "lod"):
        assert prices["heat"][(node, 1)] == pytest.approx(30.0, abs=1e-5)
    # single marginal generator: price = c1 + 2*c2*p at p = 1 MW
    assert prices["power"][("b1", 1)] == pytest.approx(20.1, abs=1e-5)
    assert prices["power"][("b2", 1)] == pytest.approx(20.1, abs=1e-5)


def test_extract_duals_requires_optimal(micro):
    inst = fm.build(micro, fm.Variant.REMOVE_BILINEAR, (1,))
    prob = QpProblem.from_instance(inst)
    sol = solve_qp(prob, SolverConfig(max_iter=1))
    with pytest.raises(NotOptimal):
        extract_duals(sol, inst)


def test_tolerance_config_respected(micro):
    inst = fm.build(micro, fm.Variant.MCCORMICK, (1,))
    prob = QpProblem.from_instance(inst)
    loose = solve_qp(prob, SolverConfig(tol=1e-6))
    tight = solve_qp(prob, SolverConfig(tol=1e-11))
    assert loose.status == tight.status == SolveStatus.OPTIMAL
    assert tight.iterations >= loose.iterations
    assert tight.comp_gap <= 1e-9
