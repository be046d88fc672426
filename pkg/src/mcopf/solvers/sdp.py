"""Primal-dual interior-point method for small dense semidefinite programs.

Standard form::

    minimize    c'x
    subject to  A x = b,   G x + s = h,   s in K

with K a product of a nonnegative orthant and PSD cones (stored in
``svec`` form, off-diagonals scaled by sqrt(2)). The solver runs on the
homogeneous self-dual embedding, so infeasible problems end with a
certificate instead of diverging, and uses Nesterov-Todd scaling with a
Mehrotra predictor-corrector.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.linalg as sla

from mcopf.errors import ContractError
from mcopf.formulations import SDP_KINDS, ProblemInstance, residuals
from mcopf.solvers.common import SolveResult, SolverOptions, Status

log = logging.getLogger(__name__)

SQRT2 = np.sqrt(2.0)
STEP = 0.99
STALL_ITERATIONS = 15
REFINE_STEPS = 1  # iterative refinement of each Newton solve


# ---------------------------------------------------------------------------
# svec helpers
# ---------------------------------------------------------------------------


def svec_len(side: int) -> int:
    return side * (side + 1) // 2


@lru_cache(maxsize=None)
def _svec_maps(side: int) -> tuple[tuple[np.ndarray, np.ndarray], np.ndarray, np.ndarray, np.ndarray]:
    """Triangle indices, their scale, and the svec<-vec / vec<-svec matrices."""
    iu = np.triu_indices(side)
    scale = np.where(iu[0] == iu[1], 1.0, SQRT2)
    size = svec_len(side)
    to_svec = np.zeros((size, side * side))
    to_vec = np.zeros((side * side, size))
    for k, (r, c) in enumerate(zip(*iu)):
        if r == c:
            to_svec[k, r * side + c] = 1.0
            to_vec[r * side + c, k] = 1.0
        else:
            to_svec[k, r * side + c] = to_svec[k, c * side + r] = SQRT2 / 2.0
            to_vec[r * side + c, k] = to_vec[c * side + r, k] = 1.0 / SQRT2
    return iu, scale, to_svec, to_vec


def svec(m: np.ndarray) -> np.ndarray:
    iu, scale, _, _ = _svec_maps(m.shape[0])
    return m[iu] * scale


def smat(v: np.ndarray, side: int) -> np.ndarray:
    iu, scale, _, _ = _svec_maps(side)
    m = np.zeros((side, side))
    m[iu] = v / scale
    return m + np.triu(m, 1).T


def congruence_matrix(M: np.ndarray) -> np.ndarray:
    """Matrix of ``U -> M U M'`` acting on svec coordinates."""
    _, _, to_svec, to_vec = _svec_maps(M.shape[0])
    return to_svec @ np.kron(M, M) @ to_vec


# ---------------------------------------------------------------------------
# cone data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConeProblem:
    """Dense conic data; ``sides`` lists the PSD block orders after ``n_lin`` orthant rows."""

    c: np.ndarray
    A: np.ndarray
    b: np.ndarray
    G: np.ndarray
    h: np.ndarray
    n_lin: int
    sides: tuple[int, ...]

    @property
    def degree(self) -> int:
        return self.n_lin + sum(self.sides)

    def blocks(self, v: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        lin = v[: self.n_lin]
        mats, k = [], self.n_lin
        for side in self.sides:
            size = svec_len(side)
            mats.append(smat(v[k : k + size], side))
            k += size
        return lin, mats

    def join(self, lin: np.ndarray, mats: list[np.ndarray]) -> np.ndarray:
        return np.concatenate([lin] + [svec(m) for m in mats])

    def identity(self) -> np.ndarray:
        return self.join(np.ones(self.n_lin), [np.eye(s) for s in self.sides])


def to_cone(inst: ProblemInstance, theta: float = 0.0) -> ConeProblem:
    """Map an SWR instance onto standard conic form."""
    eq, ineq = inst.dense_eq, inst.dense_ineq
    if not (eq.is_linear and ineq.is_linear):
        raise ContractError(f"{inst.kind.label} instance has quadratic rows; not a conic program")
    n = inst.n
    g_rows, h_rows = [ineq.A], [-ineq.b]
    for blk in inst.psd_blocks:
        f0, f = blk.coefficient_matrices(n)
        g_rows.append(-np.stack([svec(f[k]) for k in range(n)], axis=1))
        h_rows.append(svec(f0))
    return ConeProblem(
        c=inst.objective_vector(theta),
        A=eq.A.copy(),
        b=-eq.b,
        G=np.vstack(g_rows),
        h=np.concatenate(h_rows),
        n_lin=ineq.m,
        sides=tuple(blk.side for blk in inst.psd_blocks),
    )


def independent_rows(A: np.ndarray, b: np.ndarray, tol: float = 1e-10) -> tuple[np.ndarray, float]:
    """Indices of a maximal independent row subset and the consistency residual."""
    if A.shape[0] == 0:
        return np.arange(0), 0.0
    _, r, piv = sla.qr(A.T, mode="economic", pivoting=True)
    d = np.abs(np.diag(r))
    rank = int(np.sum(d > tol * max(1.0, d[0]))) if d.size else 0
    keep = np.sort(piv[:rank])
    x, *_ = np.linalg.lstsq(A[keep], b[keep], rcond=None)
    return keep, float(np.max(np.abs(A @ x - b), initial=0.0))


# ---------------------------------------------------------------------------
# Nesterov-Todd scaling
# ---------------------------------------------------------------------------


class _Scaling:
    def __init__(self, cone: ConeProblem, s: np.ndarray, z: np.ndarray):
        self.cone = cone
        s_lin, s_mats = cone.blocks(s)
        z_lin, z_mats = cone.blocks(z)
        self.d = np.sqrt(s_lin / z_lin)
        self.lam_lin = np.sqrt(s_lin * z_lin)
        self.R: list[np.ndarray] = []
        self.Rinv: list[np.ndarray] = []
        self.lam_psd: list[np.ndarray] = []
        for S, Z in zip(s_mats, z_mats):
            ls = np.linalg.cholesky(S)
            lz = np.linalg.cholesky(Z)
            u, sv, vt = np.linalg.svd(lz.T @ ls)
            R = ls @ vt.T / np.sqrt(sv)
            self.R.append(R)
            self.Rinv.append(np.linalg.inv(R))
            self.lam_psd.append(sv)

    @staticmethod
    def _operator(mats: list[np.ndarray], d: np.ndarray) -> np.ndarray:
        """svec matrix of ``U -> M U M'`` per block (diag(d) on the orthant)."""
        return sla.block_diag(np.diag(d), *[congruence_matrix(M) for M in mats])

    def matrices(self) -> tuple[np.ndarray, np.ndarray]:
        """Matrices of W' and of its inverse W^{-T} in svec coordinates."""
        return self._operator(self.R, self.d), self._operator(self.Rinv, 1.0 / self.d)

    # Jordan algebra in the scaled space (lambda is diagonal) -------------
    def lam_sq(self) -> tuple[np.ndarray, list[np.ndarray]]:
        return self.lam_lin**2, [np.diag(l**2) for l in self.lam_psd]

    def lam_div(self, lin: np.ndarray, mats: list[np.ndarray]) -> tuple[np.ndarray, list[np.ndarray]]:
        return lin / self.lam_lin, [2.0 * M / np.add.outer(l, l) for l, M in zip(self.lam_psd, mats)]


def _circ(a, b):
    """Jordan product of two (lin, mats) pairs."""
    return a[0] * b[0], [(x @ y + y @ x) / 2.0 for x, y in zip(a[1], b[1])]


def _max_step(cone: ConeProblem, v: np.ndarray, dv: np.ndarray) -> float:
    """Largest alpha with v + alpha dv in the cone (inf if unbounded)."""
    lin, mats = cone.blocks(v)
    dlin, dmats = cone.blocks(dv)
    alpha = np.inf
    neg = dlin < 0
    if np.any(neg):
        alpha = min(alpha, float(np.min(-lin[neg] / dlin[neg])))
    for M, D in zip(mats, dmats):
        L = np.linalg.cholesky(M)
        Li = sla.solve_triangular(L, np.eye(L.shape[0]), lower=True)
        ev = np.linalg.eigvalsh(Li @ D @ Li.T)
        if ev[0] < 0:
            alpha = min(alpha, -1.0 / ev[0])
    return alpha


def _in_cone_shift(cone: ConeProblem, v: np.ndarray) -> np.ndarray:
    """Shift ``v`` along the identity so it lies strictly inside the cone."""
    lin, mats = cone.blocks(v)
    mins = [float(np.min(lin))] if lin.size else []
    mins += [float(np.linalg.eigvalsh(M)[0]) for M in mats]
    worst = min(mins) if mins else 1.0
    if worst >= 1e-8:
        return v
    return v + (1.0 - worst) * cone.identity()


# ---------------------------------------------------------------------------
# main loop
# ---------------------------------------------------------------------------


def _normalised_optimal(A, b, G, h, c, x, y, z, s, opts: SolverOptions) -> bool:
    """Residuals scaled by the iterate norms, as common conic solvers do.

    The duality gap here is the primal-dual cost difference. This accepts
    optimal faces whose dual optimum is not attained, where the dual iterates
    grow without bound, absolute dual residuals stall and ``s'z`` lags the
    cost difference.
    """
    nx, ny, nz, ns = (float(np.linalg.norm(v)) for v in (x, y, z, s))
    pres = max(
        np.linalg.norm(A @ x - b) / max(1.0, np.linalg.norm(b) + nx),
        np.linalg.norm(G @ x + s - h) / max(1.0, np.linalg.norm(h) + nx + ns),
    )
    dres = np.linalg.norm(A.T @ y + G.T @ z + c) / max(1.0, np.linalg.norm(c) + nx + ny + nz)
    pcost, dcost = float(c @ x), float(-(b @ y) - h @ z)
    scale = max(1.0, min(abs(pcost), abs(dcost)))
    return (
        pres <= opts.feas_tol
        and dres <= opts.feas_tol
        and abs(pcost - dcost) <= opts.opt_tol * scale
    )


def solve_cone(cp: ConeProblem, opts: SolverOptions) -> dict:
    """Run the embedded IPM on ``cp``; returns status, primal/dual iterates and certificates."""
    n = cp.c.size
    keep, inconsistency = independent_rows(cp.A, cp.b)
    if inconsistency > 1e-9:
        # no x satisfies A x = b: y = residual direction certifies it
        x_ls, *_ = np.linalg.lstsq(cp.A, cp.b, rcond=None)
        r = cp.A @ x_ls - cp.b
        return {"status": Status.INFEASIBLE, "x": x_ls, "y": r, "z": np.zeros(cp.h.size),
                "s": np.zeros(cp.h.size), "iterations": 0, "certificate": "primal", "gap": np.nan}
    A, b = cp.A[keep], cp.b[keep]
    G, h, c = cp.G, cp.h, cp.c
    p, m = A.shape[0], G.shape[0]
    N = n + p + m + 1

    A_pinv = np.linalg.pinv(A) if p else np.zeros((n, 0))

    def certify(xh: np.ndarray, yh: np.ndarray, zh: np.ndarray) -> np.ndarray | None:
        """Project onto A x = b and return the point if it passes every tolerance."""
        xp = xh - A_pinv @ (A @ xh - b) if p else xh
        lin, mats = cp.blocks(h - G @ xp)
        worst = min([float(np.min(lin, initial=np.inf))] + [float(np.linalg.eigvalsh(M)[0]) for M in mats])
        if worst < -opts.feas_tol:
            return None
        if np.max(np.abs(A.T @ yh + G.T @ zh + c), initial=0.0) > opts.feas_tol:
            return None
        pc, dc = c @ xp, -(b @ yh) - h @ zh
        scale = max(1.0, abs(pc), abs(dc))
        comp = (h - G @ xp) @ zh
        if max(abs(pc - dc), abs(comp)) > opts.opt_tol * scale:
            return None
        return xp

    resx0 = max(1.0, np.linalg.norm(c))
    resy0 = max(1.0, np.linalg.norm(b))
    resz0 = max(1.0, np.linalg.norm(h))

    def kkt(Gs: np.ndarray, hs: np.ndarray, kappa_tau: float) -> np.ndarray:
        K = np.zeros((N, N))
        ix, iy, iz, it = slice(0, n), slice(n, n + p), slice(n + p, n + p + m), n + p + m
        K[ix, iy] = A.T
        K[ix, iz] = Gs.T
        K[ix, it] = c
        K[iy, ix] = A
        K[iy, it] = -b
        K[iz, ix] = Gs
        K[iz, iz] = -np.eye(m)
        K[iz, it] = -hs
        K[it, ix] = c
        K[it, iy] = b
        K[it, iz] = hs
        K[it, it] = -kappa_tau
        return K

    # initial point from two least-squares problems with identity scaling
    K0 = kkt(G, h, 0.0)[: n + p + m, : n + p + m]
    try:
        lu0 = sla.lu_factor(K0)
    except (ValueError, np.linalg.LinAlgError):
        lu0 = None
    if lu0 is None or not np.all(np.isfinite(lu0[0])) or np.min(np.abs(np.diag(lu0[0]))) < 1e-13:
        return {"status": Status.NUMERICAL, "x": np.zeros(n), "y": np.zeros(cp.A.shape[0]), "z": np.zeros(m),
                "s": np.zeros(m), "iterations": 0, "certificate": None, "gap": np.nan}
    sol = sla.lu_solve(lu0, np.concatenate([np.zeros(n), b, h]))
    x = sol[:n]
    s = _in_cone_shift(cp, -sol[n + p :])
    sol = sla.lu_solve(lu0, np.concatenate([-c, np.zeros(p), np.zeros(m)]))
    y = sol[n : n + p]
    z = _in_cone_shift(cp, sol[n + p :])
    tau = kappa = 1.0

    status = Status.MAX_ITER
    certificate = None
    gap = np.nan
    it = 0
    best = (np.inf, 0, (x, y, z, s, tau), gap)
    for it in range(opts.max_iter + 1):
        # residuals of the embedding
        rx = -(A.T @ y + G.T @ z + c * tau)
        ry = A @ x - b * tau
        rz = s + G @ x - h * tau
        rt = kappa + c @ x + b @ y + h @ z
        mu = (s @ z + tau * kappa) / (cp.degree + 1)

        xh, yh, zh, sh = x / tau, y / tau, z / tau, s / tau
        pres = max(np.linalg.norm(A @ xh - b) / resy0, np.linalg.norm(G @ xh + sh - h) / resz0)
        dres = np.linalg.norm(A.T @ yh + G.T @ zh + c) / resx0
        pcost, dcost = c @ xh, -(b @ yh) - h @ zh
        gap = float(sh @ zh)
        relgap = gap / max(abs(pcost), abs(dcost), 1.0)
        log.debug("it %d pres %.2e dres %.2e gap %.2e pd %.2e tau %.2e kappa %.2e", it, pres, dres, gap, pcost - dcost, tau, kappa)
        if pres <= opts.feas_tol and dres <= opts.feas_tol and (gap <= opts.opt_tol or relgap <= opts.opt_tol):
            status = Status.OPTIMAL
            break
        if _normalised_optimal(A, b, G, h, c, xh, yh, zh, sh, opts):
            status = Status.OPTIMAL
            break
        if dres <= opts.feas_tol and relgap <= opts.opt_tol:
            xp = certify(xh, yh, zh)
            if xp is not None:
                x, status = xp * tau, Status.OPTIMAL
                break
        merit = max(pres, dres, min(abs(gap), abs(relgap)))
        if merit < best[0]:
            best = (merit, it, (x, y, z, s, tau), gap)
        elif it - best[1] > STALL_ITERATIONS:
            # residuals stopped improving (typically tau and kappa both vanishing)
            status = Status.NUMERICAL
            break
        hz_by = -(h @ z + b @ y)
        if hz_by > 0 and np.linalg.norm(A.T @ y + G.T @ z) / (resx0 * hz_by) <= opts.feas_tol:
            status, certificate = Status.INFEASIBLE, "primal"
            break
        cx = -(c @ x)
        if cx > 0 and max(np.linalg.norm(A @ x) / resy0, np.linalg.norm(G @ x + s) / resz0) / cx <= opts.feas_tol:
            status, certificate = Status.INFEASIBLE, "dual"
            break
        if it == opts.max_iter:
            break

        # Newton system in NT-scaled coordinates: dz~ = W dz, G~ = W^{-T} G
        try:
            scal = _Scaling(cp, s, z)
            T, Tinv = scal.matrices()
            Gs, hs = Tinv @ G, Tinv @ h
            K = kkt(Gs, hs, kappa / tau)
            lu = sla.lu_factor(K)
        except (np.linalg.LinAlgError, ValueError, FloatingPointError):
            status = Status.NUMERICAL
            break

        def direction(eta: float, comp, rt_comp: float):
            ldc = cp.join(*scal.lam_div(*comp))
            rhs = np.concatenate([
                (1.0 - eta) * rx,
                -(1.0 - eta) * ry,
                -(1.0 - eta) * (Tinv @ rz) - ldc,
                [-(1.0 - eta) * rt - rt_comp / tau],
            ])
            d = sla.lu_solve(lu, rhs)
            for _ in range(REFINE_STEPS):
                d += sla.lu_solve(lu, rhs - K @ d)
            dx, dy, dzs, dtau = d[:n], d[n : n + p], d[n + p : n + p + m], d[-1]
            dz = Tinv.T @ dzs
            ds = T @ (ldc - dzs)
            dkappa = (rt_comp - kappa * dtau) / tau
            return dx, dy, dz, dtau, ds, dkappa, ldc - dzs, dzs

        def step_to_boundary(dz, dtau, ds, dkappa) -> float:
            a = min(_max_step(cp, s, ds), _max_step(cp, z, dz))
            if dtau < 0:
                a = min(a, -tau / dtau)
            if dkappa < 0:
                a = min(a, -kappa / dkappa)
            return a

        lsq = scal.lam_sq()
        comp_aff = (-lsq[0], [-M for M in lsq[1]])
        dx, dy, dz, dtau, ds, dkappa, ds_s, dz_s = direction(0.0, comp_aff, -tau * kappa)
        alpha_aff = min(1.0, step_to_boundary(dz, dtau, ds, dkappa))
        sigma = (1.0 - alpha_aff) ** 3

        # second-order correction with the affine step in scaled coordinates
        corr = _circ(cp.blocks(ds_s), cp.blocks(dz_s))
        e_lin, e_mats = np.ones(cp.n_lin), [np.eye(k) for k in cp.sides]
        comp = (
            -lsq[0] - corr[0] + sigma * mu * e_lin,
            [-L - C + sigma * mu * E for L, C, E in zip(lsq[1], corr[1], e_mats)],
        )
        rt_comp = -tau * kappa - dtau * dkappa + sigma * mu
        dx, dy, dz, dtau, ds, dkappa, _, _ = direction(sigma, comp, rt_comp)
        alpha = min(1.0, STEP * step_to_boundary(dz, dtau, ds, dkappa))
        if not np.isfinite(alpha) or alpha <= 0:
            status = Status.NUMERICAL
            break

        x, y, z, s = x + alpha * dx, y + alpha * dy, z + alpha * dz, s + alpha * ds
        tau, kappa = tau + alpha * dtau, kappa + alpha * dkappa

    y_full = np.zeros(cp.A.shape[0])
    if status in (Status.MAX_ITER, Status.NUMERICAL):
        x, y, z, s, tau = best[2]
        gap = best[3]
    if certificate is None:
        y_full[keep] = y / tau
        return {"status": status, "x": x / tau, "y": y_full, "z": z / tau, "s": s / tau,
                "iterations": it, "certificate": None, "gap": gap}
    y_full[keep] = y
    return {"status": status, "x": x, "y": y_full, "z": z, "s": s,
            "iterations": it, "certificate": certificate, "gap": np.nan}


def solve_sdp(inst: ProblemInstance, theta: float = 0.0, opts: SolverOptions | None = None) -> SolveResult:
    """Solve an SWR-1/SWR-2 instance at objective angle ``theta``.

    On infeasibility the result's ``metadata["certificate"]`` names the
    side certified infeasible and ``y``/``z`` (or ``x``) carry the ray.
    """
    opts = opts or SolverOptions()
    if inst.kind not in SDP_KINDS:
        raise ContractError(f"solve_sdp does not handle {inst.kind.label}")
    cp = to_cone(inst, theta)
    out = solve_cone(cp, opts)
    _, z_mats = cp.blocks(out["z"])
    x = out["x"]
    return SolveResult(
        status=out["status"],
        x=x,
        objective=float(cp.c @ x),
        dispatch=inst.dispatch(x),
        iterations=out["iterations"],
        report=residuals(inst, x),
        theta=theta,
        y=out["y"],
        z=out["z"][: cp.n_lin],
        psd_duals=z_mats,
        metadata={"certificate": out["certificate"], "duality_gap": out["gap"]},
    )


def dual_residual(inst: ProblemInstance, res: SolveResult) -> np.ndarray:
    """``c + A'y + G'z`` at a result (zero at a dual-feasible point)."""
    cp = to_cone(inst, res.theta)
    z = np.concatenate([res.z] + [svec(Z) for Z in res.psd_duals])
    return cp.c + cp.A.T @ res.y + cp.G.T @ z
