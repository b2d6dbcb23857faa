"""Primal-dual interior-point solver for convex QPs.

Handles problems of the form

    min  c0 + q'x + x'Qx/2
    s.t. A_eq x = b_eq,  A_in x <= b_in,  lb <= x <= ub

with a Mehrotra predictor-corrector iteration on the slack/dual pair of
the stacked inequality system. The KKT step equations are solved through
a sparse LU factorization of the statically regularized quasi-definite
matrix [[Q + G'WG + d*I, A'], [A, -d*I]].

Sign conventions for reported duals: equality duals y satisfy
stationarity Qx + q - A_eq'y + G'z = 0, so y is the marginal objective
cost of raising the corresponding right-hand side (shadow price).
Inequality and bound duals are nonnegative.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import NumericalFailure
from .formulation import ProblemInstance


class SolveStatus(enum.Enum):
    OPTIMAL = "optimal"
    PRIMAL_INFEASIBLE = "primal_infeasible"
    DUAL_INFEASIBLE = "dual_infeasible"
    ITER_LIMIT = "iter_limit"
    NUMERICAL_FAILURE = "numerical_failure"


@dataclass
class SolverConfig:
    tol: float = 1e-8
    max_iter: int = 200
    reg: float = 1e-9
    infeas_tol: float = 1e-10
    step_frac: float = 0.995


@dataclass(frozen=True)
class QpProblem:
    Q: sp.csr_matrix
    q: np.ndarray
    c0: float
    A_eq: sp.csr_matrix
    b_eq: np.ndarray
    A_in: sp.csr_matrix
    b_in: np.ndarray
    lb: np.ndarray
    ub: np.ndarray

    @staticmethod
    def from_instance(instance: ProblemInstance) -> "QpProblem":
        return QpProblem(
            Q=instance.Q, q=instance.q, c0=instance.c0,
            A_eq=instance.A_eq, b_eq=instance.b_eq,
            A_in=instance.A_in, b_in=instance.b_in,
            lb=instance.lb, ub=instance.ub,
        )

    @property
    def n(self):
        return self.q.shape[0]

    def validate_psd(self, tol: float = 1e-10) -> None:
        """LDL' factorization check: all diagonal pivots >= -tol."""
        Qd = np.asarray(self.Q.todense())
        Qd = 0.5 * (Qd + Qd.T)
        if Qd.shape[0] == 0:
            return
        _, d, _ = scipy.linalg.ldl(Qd)
        eigs = np.linalg.eigvalsh(d)
        if eigs.min() < -tol * max(1.0, abs(eigs).max()):
            raise NumericalFailure(
                f"objective matrix is not PSD (pivot {eigs.min():.3e})")


@dataclass
class QpSolution:
    status: SolveStatus
    x: np.ndarray
    y_eq: np.ndarray
    z_in: np.ndarray
    z_lo: np.ndarray
    z_hi: np.ndarray
    objective: float
    primal_res: float
    dual_res: float
    comp_gap: float
    rel_gap: float
    iterations: int
    certificate: np.ndarray | None = None
    message: str = ""


def _empty_solution(problem, status, message="", certificate=None):
    n = problem.n
    return QpSolution(
        status=status, x=np.zeros(n), y_eq=np.zeros(problem.b_eq.shape[0]),
        z_in=np.zeros(problem.b_in.shape[0]), z_lo=np.zeros(n), z_hi=np.zeros(n),
        objective=np.nan, primal_res=np.inf, dual_res=np.inf,
        comp_gap=np.inf, rel_gap=np.inf, iterations=0,
        certificate=certificate, message=message,
    )


def solve_qp(problem: QpProblem, config: SolverConfig | None = None) -> QpSolution:
    """Solve a convex QP; deterministic for identical inputs."""
    config = config or SolverConfig()
    n = problem.n
    lb = np.asarray(problem.lb, dtype=float)
    ub = np.asarray(problem.ub, dtype=float)

    if np.any(lb > ub + 1e-12):
        j = int(np.argmax(lb - ub))
        cert = np.zeros(n)
        cert[j] = 1.0
        return _empty_solution(
            problem, SolveStatus.PRIMAL_INFEASIBLE,
            message=f"contradictory bounds on variable {j}: "
                    f"[{lb[j]}, {ub[j]}]",
            certificate=cert)

    # presolve: substitute out variables pinned by equal bounds
    fixed = (lb == ub)
    free = ~fixed
    x_fix = np.zeros(n)
    x_fix[fixed] = lb[fixed]

    if fixed.any():
        sol = _solve_reduced(problem, config, free, x_fix)
    else:
        sol = _ipm(problem, config)
    return sol


def _solve_reduced(problem, config, free, x_fix):
    idx = np.where(free)[0]
    Q = problem.Q.tocsr()
    Qff = Q[idx][:, idx]
    q_f = problem.q[idx] + np.asarray(Q[idx][:, ~free] @ x_fix[~free]).ravel()

    A_eq = problem.A_eq.tocsr()
    A_in = problem.A_in.tocsr()
    b_eq = problem.b_eq - np.asarray(A_eq[:, ~free] @ x_fix[~free]).ravel()
    b_in = problem.b_in - np.asarray(A_in[:, ~free] @ x_fix[~free]).ravel()
    A_eq_f = A_eq[:, idx]
    A_in_f = A_in[:, idx]

    # rows now empty of variables must be consistent on their own
    eq_nnz = np.diff(A_eq_f.indptr)
    bad_eq = (eq_nnz == 0) & (np.abs(b_eq) > 1e-9)
    if bad_eq.any():
        r = int(np.argmax(bad_eq))
        cert = np.zeros(problem.b_eq.shape[0])
        cert[r] = -np.sign(b_eq[r])
        sol = _empty_solution(
            problem, SolveStatus.PRIMAL_INFEASIBLE,
            message=f"equality row {r} unsatisfiable after fixing variables "
                    f"(residual {b_eq[r]:.3e})",
            certificate=cert)
        return sol
    in_nnz = np.diff(A_in_f.indptr)
    bad_in = (in_nnz == 0) & (b_in < -1e-9)
    if bad_in.any():
        r = int(np.argmax(bad_in))
        cert = np.zeros(problem.b_in.shape[0])
        cert[r] = 1.0
        return _empty_solution(
            problem, SolveStatus.PRIMAL_INFEASIBLE,
            message=f"inequality row {r} unsatisfiable after fixing variables "
                    f"(slack {b_in[r]:.3e})",
            certificate=cert)

    offset = (0.5 * x_fix @ (problem.Q @ x_fix) + problem.q @ x_fix)
    reduced = QpProblem(
        Q=Qff.tocsr(), q=q_f, c0=problem.c0 + float(offset),
        A_eq=A_eq_f.tocsr(), b_eq=b_eq, A_in=A_in_f.tocsr(), b_in=b_in,
        lb=problem.lb[idx], ub=problem.ub[idx],
    )
    inner = _ipm(reduced, config)

    n = problem.n
    x = x_fix.copy()
    x[idx] = inner.x
    z_lo = np.zeros(n)
    z_hi = np.zeros(n)
    z_lo[idx] = inner.z_lo
    z_hi[idx] = inner.z_hi
    if inner.status == SolveStatus.OPTIMAL:
        # bound duals of pinned variables from stationarity
        grad = np.asarray(problem.Q @ x).ravel() + problem.q \
            - problem.A_eq.T @ inner.y_eq + problem.A_in.T @ inner.z_in
        resid = grad[~free]
        z_lo[~free] = np.maximum(resid, 0.0)
        z_hi[~free] = np.maximum(-resid, 0.0)
    obj = inner.objective
    if inner.status == SolveStatus.OPTIMAL:
        obj = float(problem.c0 + problem.q @ x + 0.5 * x @ (problem.Q @ x))
    return QpSolution(
        status=inner.status, x=x, y_eq=inner.y_eq, z_in=inner.z_in,
        z_lo=z_lo, z_hi=z_hi, objective=obj,
        primal_res=inner.primal_res, dual_res=inner.dual_res,
        comp_gap=inner.comp_gap, rel_gap=inner.rel_gap,
        iterations=inner.iterations, certificate=inner.certificate,
        message=inner.message,
    )


def _stack_inequalities(problem):
    """G x <= h stacking A_in rows plus finite bound rows."""
    n = problem.n
    lo_idx = np.where(np.isfinite(problem.lb))[0]
    hi_idx = np.where(np.isfinite(problem.ub))[0]
    blocks = [problem.A_in]
    h = [problem.b_in]
    if lo_idx.size:
        blocks.append(sp.coo_matrix(
            (-np.ones(lo_idx.size), (np.arange(lo_idx.size), lo_idx)),
            shape=(lo_idx.size, n)))
        h.append(-problem.lb[lo_idx])
    if hi_idx.size:
        blocks.append(sp.coo_matrix(
            (np.ones(hi_idx.size), (np.arange(hi_idx.size), hi_idx)),
            shape=(hi_idx.size, n)))
        h.append(problem.ub[hi_idx])
    G = sp.vstack(blocks).tocsr() if blocks else sp.csr_matrix((0, n))
    return G, np.concatenate(h) if h else np.zeros(0), lo_idx, hi_idx


def _ipm(problem: QpProblem, config: SolverConfig) -> QpSolution:
    n = problem.n
    Q = problem.Q.tocsr()
    A = problem.A_eq.tocsr()
    b = np.asarray(problem.b_eq, dtype=float)
    q = np.asarray(problem.q, dtype=float)
    p = b.shape[0]
    m_in = problem.b_in.shape[0]

    G, h, lo_idx, hi_idx = _stack_inequalities(problem)
    m = h.shape[0]

    def pack(x, y, z, s, status, iters, message="", certificate=None):
        rd = np.asarray(Q @ x).ravel() + q + A.T @ y + G.T @ z
        rp = (A @ x - b) if p else np.zeros(0)
        rg = (G @ x + s - h) if m else np.zeros(0)
        obj = float(problem.c0 + q @ x + 0.5 * x @ (Q @ x))
        comp = float(s @ z) if m else 0.0
        z_in = z[:m_in] if m else np.zeros(0)
        z_lo = np.zeros(n)
        z_hi = np.zeros(n)
        if m:
            z_lo[lo_idx] = z[m_in:m_in + lo_idx.size]
            z_hi[hi_idx] = z[m_in + lo_idx.size:]
        return QpSolution(
            status=status, x=x, y_eq=-y, z_in=z_in, z_lo=z_lo, z_hi=z_hi,
            objective=obj,
            primal_res=float(max(
                np.abs(rp).max() if p else 0.0,
                np.maximum(rg, 0.0).max() if m else 0.0,
                np.abs(rg).max() if m else 0.0)),
            dual_res=float(np.abs(rd).max()) if n else 0.0,
            comp_gap=comp,
            rel_gap=comp / (1.0 + abs(obj)),
            iterations=iters, message=message, certificate=certificate,
        )

    if n == 0:
        return pack(np.zeros(0), np.zeros(p), np.zeros(m), np.zeros(m),
                    SolveStatus.OPTIMAL, 0)

    # starting point: centered in finite boxes, unit slacks/duals
    x = np.zeros(n)
    both = np.isfinite(problem.lb) & np.isfinite(problem.ub)
    x[both] = 0.5 * (problem.lb[both] + problem.ub[both])
    only_lo = np.isfinite(problem.lb) & ~both
    only_hi = np.isfinite(problem.ub) & ~both
    x[only_lo] = problem.lb[only_lo] + 1.0
    x[only_hi] = problem.ub[only_hi] - 1.0
    y = np.zeros(p)
    if m:
        s = np.maximum(h - G @ x, 1.0)
        z = np.ones(m)
    else:
        s = np.zeros(0)
        z = np.zeros(0)

    scale_b = 1.0 + (np.abs(b).max() if p else 0.0) \
        + (np.abs(h[np.isfinite(h)]).max() if m else 0.0)
    scale_q = 1.0 + np.abs(q).max() if n else 1.0

    if m == 0:
        x, y, status, msg = _solve_eq_kkt(Q, q, A, b, config)
        return pack(x, y, z, s, status, 1, message=msg)

    delta = config.reg
    last_factor = None
    stalls = 0

    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        return _ipm_loop(problem, config, pack, Q, A, b, q, G, h,
                         x, y, z, s, scale_b, scale_q, delta, last_factor,
                         stalls, n, p, m)


def _ipm_loop(problem, config, pack, Q, A, b, q, G, h,
              x, y, z, s, scale_b, scale_q, delta, last_factor,
              stalls, n, p, m):
    for it in range(1, config.max_iter + 1):
        rd = np.asarray(Q @ x).ravel() + q + A.T @ y + G.T @ z
        rp = A @ x - b if p else np.zeros(0)
        rg = G @ x + s - h
        mu = (s @ z) / m
        obj = float(problem.c0 + q @ x + 0.5 * x @ (Q @ x))

        if (np.abs(rd).max() <= config.tol * scale_q
                and (np.abs(rp).max() if p else 0.0) <= config.tol * scale_b
                and np.abs(rg).max() <= config.tol * scale_b
                and (s @ z) / (1.0 + abs(obj)) <= config.tol):
            return pack(x, y, z, s, SolveStatus.OPTIMAL, it)

        # Farkas-style certificate checks once multipliers grow large
        dual_norm = max(np.abs(y).max() if p else 0.0, z.max(initial=0.0))
        if dual_norm > 1e4:
            ray_y = y / dual_norm
            ray_z = z / dual_norm
            lhs = np.abs(A.T @ ray_y + G.T @ ray_z).max()
            val = (b @ ray_y if p else 0.0) + h @ ray_z
            # loosen acceptance as the iterates diverge: a nearly-exact ray
            # with clearly negative value is conclusive long before the
            # multipliers overflow
            cert_tol = 1e-8 if dual_norm < 1e8 else 1e-6
            if lhs <= cert_tol and val < -cert_tol:
                return pack(x, y, z, s, SolveStatus.PRIMAL_INFEASIBLE, it,
                            message="Farkas certificate: A'y + G'z ~ 0, "
                                    f"b'y + h'z = {val * dual_norm:.3e} < 0",
                            certificate=np.concatenate([ray_y, ray_z]))
        if dual_norm > 1e13:
            return pack(x, y, z, s, SolveStatus.NUMERICAL_FAILURE, it,
                        message="dual iterates diverged without a "
                                "conclusive infeasibility certificate")
        xnorm = np.abs(x).max()
        if xnorm > 1e10:
            d = x / xnorm
            if (np.abs(Q @ d).max() <= 1e-8 and (np.abs(A @ d).max() if p else 0) <= 1e-8
                    and (G @ d).max() <= 1e-8 and q @ d < -1e-8):
                return pack(x, y, z, s, SolveStatus.DUAL_INFEASIBLE, it,
                            message="unbounded ray detected", certificate=d)

        W = z / np.maximum(s, 1e-300)
        GtW = G.T.multiply(W)
        H = (Q + GtW @ G).tocsc()
        K = sp.bmat(
            [[H + delta * sp.eye(n), A.T if p else None],
             [A if p else None, -delta * sp.eye(p) if p else None]],
            format="csc") if p else (H + delta * sp.eye(n)).tocsc()
        factor = None
        local_delta = delta
        while factor is None:
            try:
                factor = spla.splu(K)
            except RuntimeError:
                local_delta *= 100
                if local_delta > 1e-2:
                    if last_factor is None:
                        return pack(x, y, z, s, SolveStatus.NUMERICAL_FAILURE, it,
                                    message="KKT factorization failed despite "
                                            "regularization")
                    return pack(x, y, z, s, SolveStatus.NUMERICAL_FAILURE, it,
                                message="KKT factorization breakdown")
                K = sp.bmat(
                    [[H + local_delta * sp.eye(n), A.T],
                     [A, -local_delta * sp.eye(p)]],
                    format="csc") if p else (H + local_delta * sp.eye(n)).tocsc()
        last_factor = factor

        def solve_kkt(r1, r2):
            rhs = np.concatenate([r1, r2]) if p else r1
            sol = factor.solve(rhs)
            return (sol[:n], sol[n:]) if p else (sol, np.zeros(0))

        # predictor
        w_aff = -s * z
        rhs1 = -rd - G.T @ (w_aff / s) - GtW @ rg
        dx, dy = solve_kkt(rhs1, -rp if p else np.zeros(0))
        ds = -rg - G @ dx
        dz = w_aff / s - W * ds

        a_p = _max_step(s, ds)
        a_d = _max_step(z, dz)
        mu_aff = ((s + a_p * ds) @ (z + a_d * dz)) / m
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0

        # corrector
        w = -s * z - ds * dz + sigma * mu
        rhs1 = -rd - G.T @ (w / s) - GtW @ rg
        dx, dy = solve_kkt(rhs1, -rp if p else np.zeros(0))
        ds = -rg - G @ dx
        dz = w / s - W * ds

        alpha = config.step_frac * min(_max_step(s, ds), _max_step(z, dz))
        alpha = min(alpha, 1.0)
        if not np.isfinite(alpha) or not np.isfinite(dx).all():
            return pack(x, y, z, s, SolveStatus.NUMERICAL_FAILURE, it,
                        message="search direction lost finiteness")
        if alpha < 1e-10:
            stalls += 1
            if stalls >= 3:
                return pack(x, y, z, s, SolveStatus.NUMERICAL_FAILURE, it,
                            message="step length collapsed; iterates stalled")
        else:
            stalls = 0
        x = x + alpha * dx
        y = y + alpha * dy
        s = np.maximum(s + alpha * ds, 1e-300)
        z = np.maximum(z + alpha * dz, 1e-300)

    return pack(x, y, z, s, SolveStatus.ITER_LIMIT, config.max_iter,
                message="iteration limit reached")


def _max_step(v, dv):
    neg = dv < 0
    if not neg.any():
        return 1.0
    return min(1.0, float(np.min(-v[neg] / dv[neg])))


def _solve_eq_kkt(Q, q, A, b, config):
    """Directly solve the equality-constrained KKT system."""
    n = q.shape[0]
    p = b.shape[0]
    delta = config.reg
    if p:
        K = sp.bmat([[Q + delta * sp.eye(n), A.T],
                     [A, -delta * sp.eye(p)]], format="csc")
        rhs = np.concatenate([-q, b])
    else:
        K = (Q + delta * sp.eye(n)).tocsc()
        rhs = -q
    try:
        factor = spla.splu(K)
    except RuntimeError:
        return np.zeros(n), np.zeros(p), SolveStatus.NUMERICAL_FAILURE, \
            "equality KKT factorization failed"
    sol = factor.solve(rhs)
    # one round of iterative refinement against the unregularized system
    for _ in range(3):
        if p:
            res = np.concatenate([
                np.asarray(Q @ sol[:n]).ravel() + q + A.T @ sol[n:],
                A @ sol[:n] - b])
        else:
            res = np.asarray(Q @ sol[:n]).ravel() + q
        corr = factor.solve(-res)
        sol = sol + corr
        if np.abs(res).max() < 1e-14:
            break
    x, y = sol[:n], sol[n:]
    rd = np.abs(np.asarray(Q @ x).ravel() + q + (A.T @ y if p else 0)).max() if n else 0
    rp = np.abs(A @ x - b).max() if p else 0
    status = SolveStatus.OPTIMAL if max(rd, rp) <= config.tol * 1e2 else \
        SolveStatus.NUMERICAL_FAILURE
    return x, y, status, ""


def extract_duals(solution: QpSolution, instance: ProblemInstance) -> dict:
    """Shadow prices of the balance rows, in $/MWh.

    Heat prices come from nodal heat-balance duals; electricity prices
    from bus power-balance duals rescaled off the per-unit base. Positive
    price means positive marginal cost of serving one more MW of load.
    """
    from .errors import NotOptimal

    if solution.status != SolveStatus.OPTIMAL:
        raise NotOptimal(f"solution status is {solution.status.value}")
    heat: dict[tuple[str, int], float] = {}
    power: dict[tuple[str, int], float] = {}
    for r, label in enumerate(instance.eq_labels):
        if label.startswith("heat_balance["):
            body = label[len("heat_balance["):-1]
            ent, hour = body.rsplit(",t", 1)
            heat[(ent, int(hour))] = float(solution.y_eq[r])
        elif label.startswith("power_balance["):
            body = label[len("power_balance["):-1]
            ent, hour = body.rsplit(",t", 1)
            power[(ent, int(hour))] = float(solution.y_eq[r]) / instance.model.base_power
    return {"heat": heat, "power": power}
