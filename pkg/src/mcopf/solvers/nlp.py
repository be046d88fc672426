"""Primal-dual interior-point method for small dense nonconvex QCQPs.

Problem form (objective linear, constraints quadratic)::

    minimize    g'x
    subject to  c_E(x) = 0,   c_I(x) + s = 0,   s >= 0

Each iteration factors the regularised KKT matrix with a symmetric
indefinite (Bunch-Kaufman) LDL', corrects its inertia by diagonal shifts,
picks the barrier parameter with a Mehrotra-style predictor, and
globalises with a backtracking line search on an l1 exact-penalty merit.
"""

from __future__ import annotations

import logging

import numpy as np
import scipy.linalg as sla
from scipy.optimize import least_squares

from mcopf.formulations import NLP_KINDS, ProblemInstance, residuals
from mcopf.errors import ContractError
from mcopf.solvers.common import SolveResult, SolverOptions, Status

log = logging.getLogger(__name__)

CLUSTER_RADIUS = 1e-4
# smallest violation a restoration run must leave before we call the data infeasible
INFEASIBLE_VIOLATION = 1e-5
# a start whose KKT error has not dropped tenfold over this many iterations is abandoned
STALL_WINDOW = 60


class _LDL:
    """Bunch-Kaufman factorisation with inertia and a solve method."""

    def __init__(self, K: np.ndarray):
        lu, d, perm = sla.ldl(K, lower=True)
        self.lt = lu[perm]
        self.d = d
        self.perm = perm
        eig = np.linalg.eigvalsh(d)
        self.n_pos = int(np.sum(eig > 0))
        self.n_neg = int(np.sum(eig < 0))
        self.n_zero = len(eig) - self.n_pos - self.n_neg

    def solve(self, b: np.ndarray) -> np.ndarray:
        w = sla.solve_triangular(self.lt, b[self.perm], lower=True, unit_diagonal=True)
        v = np.linalg.solve(self.d, w)
        u = sla.solve_triangular(self.lt.T, v, lower=False, unit_diagonal=True)
        x = np.empty_like(u)
        x[self.perm] = u
        return x


def _fraction_to_boundary(v: np.ndarray, dv: np.ndarray, tau: float) -> float:
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-tau * v[neg] / dv[neg])))


def _interior_point(inst: ProblemInstance, g: np.ndarray, x0: np.ndarray, opts: SolverOptions) -> dict:
    E, I = inst.dense_eq, inst.dense_ineq
    n, mE, mI = inst.n, E.m, I.m
    x = x0.astype(float).copy()
    s = np.maximum(-I.values(x), 0.1)
    mu = 0.1
    z = mu / s if mI else np.zeros(0)
    y = np.zeros(mE)
    nu = 1.0
    delta_w_last = 0.0
    needs_delta_c = False
    status = Status.MAX_ITER
    it = 0
    line_failures = 0
    feas_hist: list[float] = []
    kkt_hist: list[float] = []

    for it in range(opts.max_iter + 1):
        cE, JE = E.values(x), E.jacobian(x)
        cI, JI = I.values(x), I.jacobian(x)
        rd = g + JE.T @ y + JI.T @ z
        feas = max(np.max(np.abs(cE), initial=0.0), np.max(cI, initial=0.0))
        feas_hist.append(feas)
        sd = max(100.0, (np.sum(np.abs(y)) + np.sum(np.abs(z))) / max(1, mE + mI)) / 100.0
        dual = np.max(np.abs(rd), initial=0.0) / sd
        comp = np.max(s * z, initial=0.0) / sd
        if feas <= opts.feas_tol and dual <= opts.opt_tol and comp <= opts.opt_tol:
            status = Status.OPTIMAL
            break
        kkt_hist.append(max(feas, dual, comp))
        if it == opts.max_iter:
            break
        if it >= STALL_WINDOW and min(kkt_hist[-STALL_WINDOW:]) > 0.1 * min(kkt_hist[:-STALL_WINDOW]):
            break
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            status = Status.NUMERICAL
            break

        H = E.hessian(y) + I.hessian(z)
        sigma_s = z / s if mI else np.zeros(0)
        Hs = H + JI.T @ (sigma_s[:, None] * JI)

        # inertia correction; delta_c shrinks with mu so it cannot cap the attainable accuracy
        delta_w = 0.0
        delta_c = 1e-8 * max(mu, 1e-16) ** 0.25 if needs_delta_c else 0.0
        fact = None
        for _ in range(60):
            K = np.zeros((n + mE, n + mE))
            K[:n, :n] = Hs + delta_w * np.eye(n)
            K[:n, n:] = JE.T
            K[n:, :n] = JE
            K[n:, n:] = -delta_c * np.eye(mE)
            fact = _LDL(K)
            if fact.n_pos == n and fact.n_neg == mE:
                break
            if fact.n_neg < mE and delta_c < 1e-4:
                # rank-deficient constraint Jacobian
                needs_delta_c = True
                delta_c = 1e-8 * max(mu, 1e-16) ** 0.25 if delta_c == 0.0 else 10.0 * delta_c
                continue
            if delta_w == 0.0:
                delta_w = 1e-4 if delta_w_last == 0.0 else max(1e-20, delta_w_last / 3.0)
            else:
                delta_w *= 8.0 if delta_w_last else 100.0
            if delta_w > 1e20:
                fact = None
                break
        if fact is None:
            status = Status.NUMERICAL
            break
        delta_w_last = delta_w
        K0 = K.copy()
        K0[n:, n:] = 0.0

        def direction(mu_t: float):
            rx = -rd - JI.T @ (mu_t / s - z + sigma_s * (cI + s)) if mI else -rd
            rhs = np.concatenate([rx, -cE])
            sol = fact.solve(rhs)
            if delta_c:
                # refine towards the unregularised (consistent) system
                for _ in range(2):
                    sol = sol + fact.solve(rhs - K0 @ sol)
            dx, dy = sol[:n], sol[n:]
            if mI:
                ds = -(cI + s) - JI @ dx
                dz = mu_t / s - z - sigma_s * ds
            else:
                ds = dz = np.zeros(0)
            return dx, dy, ds, dz

        if mI:
            mu_cur = float(s @ z) / mI
            dx, dy, ds, dz = direction(0.0)
            ap = _fraction_to_boundary(s, ds, 1.0)
            ad = _fraction_to_boundary(z, dz, 1.0)
            mu_aff = float((s + ap * ds) @ (z + ad * dz)) / mI
            centering = min(1.0, (mu_aff / mu_cur) ** 3) if mu_cur > 0 else 0.0
            mu = max(centering * mu_cur, 1e-2 * min(opts.feas_tol, opts.opt_tol), 1e-3 * min(feas, mu_cur))
        else:
            mu = 0.0
        dx, dy, ds, dz = direction(mu)

        tau = max(0.99, 1.0 - mu)
        a_max = _fraction_to_boundary(s, ds, tau) if mI else 1.0
        a_dual = _fraction_to_boundary(z, dz, tau) if mI else 1.0

        def merit(xx, ss, weight):
            barrier = -mu * np.sum(np.log(ss)) if mI else 0.0
            viol = np.sum(np.abs(E.values(xx))) + (np.sum(np.abs(I.values(xx) + ss)) if mI else 0.0)
            return float(g @ xx + barrier + weight * viol)

        theta_c = np.sum(np.abs(cE)) + (np.sum(np.abs(cI + s)) if mI else 0.0)
        grad_dir = float(g @ dx - (mu * np.sum(ds / s) if mI else 0.0))
        if theta_c > 0:
            curv = float(dx @ (H + delta_w * np.eye(n)) @ dx + (ds @ (sigma_s * ds) if mI else 0.0))
            need = (grad_dir + 0.5 * max(curv, 0.0)) / (0.9 * theta_c)
            if nu < need:
                nu = need + 1.0
        slope = grad_dir - nu * theta_c
        phi0 = merit(x, s, nu)
        alpha = a_max
        accepted = False
        for _ in range(40):
            xt, st = x + alpha * dx, s + alpha * ds
            # Armijo with room for round-off in phi
            if (not mI or np.all(st > 0)) and merit(xt, st, nu) <= phi0 + 1e-4 * alpha * min(slope, 0.0) + 1e-14 * abs(phi0):
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            line_failures += 1
            alpha = a_max if line_failures % 3 == 0 else max(alpha, 1e-3 * a_max)
            if line_failures > 25:
                status = Status.NUMERICAL
                break
        else:
            line_failures = max(0, line_failures - 1)

        x = x + alpha * dx
        y = y + alpha * dy
        if mI:
            s = np.maximum(s + alpha * ds, 1e-300)
            z = z + a_dual * dz
            if mu > 0:
                z = np.clip(z, mu / (1e10 * s), 1e10 * mu / s)

    if status == Status.OPTIMAL and mE:
        # with redundant equalities y is not unique; report the least-squares multipliers
        JE = E.jacobian(x)
        rest = g + I.jacobian(x).T @ z
        y_ls = np.linalg.lstsq(JE.T, -rest, rcond=None)[0]
        if np.max(np.abs(rest + JE.T @ y_ls)) <= np.max(np.abs(rest + JE.T @ y)):
            y = y_ls
    return {"status": status, "x": x, "y": y, "z": z, "iterations": it, "s": s}


def _restoration(inst: ProblemInstance, x0: np.ndarray) -> tuple[float, np.ndarray]:
    """Minimise the squared constraint violation from ``x0``.

    Returns the violation norm at the local minimiser and the point.
    """
    E, I = inst.dense_eq, inst.dense_ineq

    def fun(x):
        return np.concatenate([E.values(x), np.maximum(I.values(x), 0.0)])

    def jac(x):
        cI = I.values(x)
        return np.vstack([E.jacobian(x), I.jacobian(x) * (cI > 0)[:, None]])

    sol = least_squares(fun, x0, jac=jac, method="lm" if E.m + I.m >= inst.n else "trf",
                        xtol=1e-15, ftol=1e-15, gtol=1e-12, max_nfev=2000)
    return float(np.linalg.norm(sol.fun)), sol.x


def initial_point(inst: ProblemInstance, opts: SolverOptions) -> np.ndarray:
    """Flat start: non-source voltages copied from the source, all else zero."""
    x = np.zeros(inst.n)
    if opts.init == "zero":
        return x
    fixed = dict(inst.fixed_voltages)
    src = next(iter(fixed.values())) if fixed else ()
    for k, v in enumerate(inst.registry):
        if v.symbol == "U" and v.index[0] < len(src):
            z = complex(src[v.index[0]])
            x[k] = z.real if v.part == "re" else z.imag
    return x


def _cluster(points: list[tuple[float, np.ndarray, dict]]) -> list[dict]:
    out: list[dict] = []
    for obj, x, disp in sorted(points, key=lambda t: t[0]):
        for c in out:
            if np.max(np.abs(c["x"] - x)) <= CLUSTER_RADIUS:
                c["count"] += 1
                break
        else:
            out.append({"objective": obj, "x": x, "dispatch": disp, "count": 1})
    return out


def solve_nlp(
    inst: ProblemInstance,
    theta: float = 0.0,
    opts: SolverOptions | None = None,
    *,
    starts: list[np.ndarray] | None = None,
) -> SolveResult:
    """Multistart interior-point solve of an IVR/SVR-1/SVR-2 instance.

    Start 0 is the flat point; the others add Gaussian noise of scale
    ``opts.perturbation`` to every coordinate. The best optimal start is
    returned and the distinct local solutions found are listed in
    ``metadata["local_solutions"]``.
    """
    opts = opts or SolverOptions()
    if inst.kind not in NLP_KINDS:
        raise ContractError(f"solve_nlp does not handle {inst.kind.label}")
    g = inst.objective_vector(theta)
    if starts is None:
        rng = np.random.default_rng(opts.seed)
        base = initial_point(inst, opts)
        starts = [base] + [base + opts.perturbation * rng.standard_normal(inst.n) for _ in range(opts.multistart - 1)]

    runs = []
    for k, x0 in enumerate(starts):
        r = _interior_point(inst, g, x0, opts)
        r["start"] = k
        runs.append(r)
        log.debug("start %d: %s after %d iterations", k, r["status"], r["iterations"])

    good = [r for r in runs if r["status"] == Status.OPTIMAL]
    diagnostics = [
        {"start": r["start"], "status": str(r["status"]), "iterations": r["iterations"], "objective": float(g @ r["x"])}
        for r in runs
    ]
    if good:
        best = min(good, key=lambda r: float(g @ r["x"]))
        status = Status.OPTIMAL
    else:
        # every start failed: ask whether the constraints can be met at all
        best = runs[0]
        restored = [_restoration(inst, r["x"]) for r in runs]
        violations = [v for v, _ in restored]
        for d, v in zip(diagnostics, violations):
            d["restoration_violation"] = v
        k = int(np.argmin(violations))
        if violations[k] <= INFEASIBLE_VIOLATION:
            retry = _interior_point(inst, g, restored[k][1], opts)
            retry["start"] = "restoration"
            diagnostics.append({"start": "restoration", "status": str(retry["status"]),
                                "iterations": retry["iterations"], "objective": float(g @ retry["x"])})
            runs.append(retry)
            if retry["status"] == Status.OPTIMAL:
                good = [retry]
        if good:
            best, status = good[0], Status.OPTIMAL
        elif violations[k] > INFEASIBLE_VIOLATION:
            status = Status.INFEASIBLE
        elif all(r["status"] == Status.MAX_ITER for r in runs):
            status = Status.MAX_ITER
        else:
            status = Status.NUMERICAL
    x = best["x"]
    local = _cluster([(float(g @ r["x"]), r["x"], inst.dispatch(r["x"])) for r in good])
    return SolveResult(
        status=status,
        x=x,
        objective=float(g @ x),
        dispatch=inst.dispatch(x),
        iterations=int(sum(r["iterations"] for r in runs)),
        report=residuals(inst, x),
        theta=theta,
        y=best["y"],
        z=best["z"],
        metadata={"local_solutions": local, "starts": diagnostics},
    )


def stationarity(inst: ProblemInstance, res: SolveResult) -> np.ndarray:
    """Lagrangian gradient ``g + J_E'y + J_I'z`` at a result."""
    g = inst.objective_vector(res.theta)
    return g + inst.dense_eq.jacobian(res.x).T @ res.y + inst.dense_ineq.jacobian(res.x).T @ res.z
