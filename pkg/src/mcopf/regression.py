"""Reference-case regression checks for the bundled two-bus case.

Each check returns a :class:`Check` holding one or more measured items; a
check passes when all of its items do. :func:`run_all` runs them in order.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from mcopf import analysis
from mcopf.formulations import (
    NLP_KINDS,
    FormulationKind,
    ProblemInstance,
    build_formulation,
    embed,
    phase_to_neutral,
    point_from_solution,
    residuals,
)
from mcopf.netmodel import Network, bundled_case, kron_reduce
from mcopf.solvers import SolverOptions, solve, solve_nlp, solve_power_flow_newton, solve_sdp

log = logging.getLogger(__name__)

K = FormulationKind

# reference values of the two-bus case
U_J = (0.937066 + 0.002500j, 0.062934 - 0.002500j)
U_J_MAG = (0.937069, 0.062983)
PTN_IVR = 0.874146
S_IVR = 1.147226 + 0.565434j
Z_KRON = 0.052622 + 0.033902j
S_SVR2 = 1.076921 + 0.549558j
UA_SVR2 = 0.924730
GAP_SVR2 = 6.1282
S_SVR1 = 1.071996 + 0.552133j
U_J_MAG_SVR1 = (0.926333, 0.018483)
PTN_SVR1 = 0.933764
GAP_SVR1 = 6.5575


@dataclass(frozen=True)
class Item:
    label: str
    observed: float
    expected: float | None
    tol: float
    relation: str = "~"  # "~": |obs - exp| <= tol, "<=": obs <= tol, ">": obs > tol, "bool": obs is 1

    @property
    def passed(self) -> bool:
        if not np.isfinite(self.observed):
            return False
        if self.relation == "~":
            return abs(self.observed - self.expected) <= self.tol
        if self.relation == "<=":
            return self.observed <= self.tol
        if self.relation == ">":
            return self.observed > self.tol
        return bool(self.observed)

    def describe(self) -> tuple[str, str, str]:
        if self.relation == "~":
            return f"{self.expected:.6f}", f"{self.observed:.6f}", f"{self.tol:g}"
        if self.relation == "bool":
            return "true", str(bool(self.observed)).lower(), "-"
        return f"{self.relation} {self.tol:g}", f"{self.observed:.3g}", f"{self.tol:g}"


@dataclass
class Check:
    number: int
    title: str
    items: list[Item] = field(default_factory=list)
    seconds: float = 0.0
    error: str | None = None

    @property
    def passed(self) -> bool:
        return self.error is None and bool(self.items) and all(i.passed for i in self.items)

    def close(self, label: str, observed: float, expected: float, tol: float) -> None:
        self.items.append(Item(label, float(observed), float(expected), tol))

    def at_most(self, label: str, observed: float, bound: float) -> None:
        self.items.append(Item(label, float(observed), None, bound, "<="))

    def above(self, label: str, observed: float, bound: float) -> None:
        self.items.append(Item(label, float(observed), None, bound, ">"))

    def holds(self, label: str, ok: bool) -> None:
        self.items.append(Item(label, float(bool(ok)), None, 0.0, "bool"))


class Context:
    """Shared, lazily computed solves so each check can be run alone."""

    def __init__(self, net: Network, opts: SolverOptions):
        self.net = net
        self.opts = opts
        self._cache: dict = {}

    def _memo(self, key, fn: Callable):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    def inst(self, kind: FormulationKind, **flags) -> ProblemInstance:
        return self._memo(("inst", kind, tuple(sorted(flags.items()))),
                          lambda: build_formulation(self.net, kind, **flags))

    def result(self, kind: FormulationKind, **flags):
        return self._memo(("res", kind, tuple(sorted(flags.items()))),
                          lambda: solve(self.inst(kind, **flags), 0.0, self.opts))

    def newton(self):
        return self._memo("newton", lambda: solve_power_flow_newton(self.net))

    def p_ivr(self) -> float:
        return self.newton().dispatch(self.net)[self.net.generators[0].id].real

    def sweep(self, kind: FormulationKind):
        return self._memo(("sweep", kind), lambda: analysis.sweep_objective(self.net, kind, 64, self.opts))

    def spurious(self):
        """SVR-2 local solution with a zero neutral voltage at the load bus, or None."""
        inst = self.inst(K.SVR2)
        res = self.result(K.SVR2)
        d = self.net.loads[0]
        for sol in res.metadata.get("local_solutions", []):
            p = point_from_solution(inst, sol["x"], self.net)
            if abs(p.voltages[d.bus][d.terminals[1]]) < 1e-6:
                return p, sol
        return None


def _mags(p, bus: str) -> np.ndarray:
    return np.abs(p.voltages[bus])


def check_newton(ctx: Context) -> Check:
    c = Check(1, "Newton/IVR exactness")
    net, p = ctx.net, ctx.newton()
    d = net.loads[0]
    u = p.voltages[d.bus]
    for k in range(2):
        c.close(f"re U_j[{k}]", u[k].real, U_J[k].real, 1e-4)
        c.close(f"im U_j[{k}]", u[k].imag, U_J[k].imag, 1e-4)
        c.close(f"|U_j[{k}]|", abs(u[k]), U_J_MAG[k], 1e-4)
    c.close("phase-to-neutral", abs(p.load_voltage(net, d.id)), PTN_IVR, 1e-4)
    s = p.dispatch(net)[net.generators[0].id]
    c.close("P_g", s.real, S_IVR.real, 1e-4)
    c.close("Q_g", s.imag, S_IVR.imag, 1e-4)
    return c


def check_kron(ctx: Context) -> Check:
    c = Check(2, "Kron-reduced impedance")
    zk = complex(kron_reduce(ctx.net.branches[0].z, [1])[0, 0])
    c.close("re z_kron", zk.real, Z_KRON.real, 1e-5)
    c.close("im z_kron", zk.imag, Z_KRON.imag, 1e-5)
    return c


def check_svr2(ctx: Context) -> Check:
    c = Check(3, "SVR-2 spurious local solution")
    found = ctx.spurious()
    c.holds("zero-neutral local solution found", found is not None)
    if found is None:
        return c
    p, sol = found
    net = ctx.net
    d = net.loads[0]
    s = ctx.inst(K.SVR2).dispatch(sol["x"])[net.generators[0].id]
    c.at_most("|U_j,n|", abs(p.voltages[d.bus][d.terminals[1]]), 1e-6)
    c.close("|U_j,a|", abs(p.voltages[d.bus][d.terminals[0]]), UA_SVR2, 1e-3)
    c.close("P_g", s.real, S_SVR2.real, 1e-3)
    c.close("Q_g", s.imag, S_SVR2.imag, 1e-3)
    c.close("gap %", analysis.relaxation_gap(ctx.p_ivr(), s.real), GAP_SVR2, 0.01)
    return c


def check_svr1(ctx: Context) -> Check:
    c = Check(4, "SVR-1 minimum active power")
    net, inst, res = ctx.net, ctx.inst(K.SVR1), ctx.result(K.SVR1)
    c.holds("solve optimal", res.ok)
    s = res.total_dispatch
    p = point_from_solution(inst, res.x, net)
    d = net.loads[0]
    c.close("P_g", s.real, S_SVR1.real, 1e-3)
    c.close("Q_g", s.imag, S_SVR1.imag, 1e-3)
    for k in range(2):
        c.close(f"|U_j[{k}]|", _mags(p, d.bus)[k], U_J_MAG_SVR1[k], 1e-3)
    c.close("phase-to-neutral", phase_to_neutral(p.voltages, net)[d.id], PTN_SVR1, 1e-3)
    c.close("gap %", analysis.relaxation_gap(ctx.p_ivr(), s.real), GAP_SVR1, 0.01)
    return c


def check_swr2(ctx: Context) -> Check:
    c = Check(5, "SWR-2 zero gap")
    res = ctx.result(K.SWR2)
    c.holds("solve optimal", res.ok)
    c.at_most("relative error vs 1.147226", abs(res.total_dispatch.real - S_IVR.real) / S_IVR.real, 1e-3)
    found = ctx.spurious()
    c.holds("spurious point available", found is not None)
    if found is not None:
        inst = ctx.inst(K.SWR2)
        feasible = residuals(inst, embed(inst, found[0], ctx.net)).feasible(1e-6)
        c.holds("spurious point infeasible for SWR-2", not feasible)
    return c


def check_swr1(ctx: Context) -> Check:
    c = Check(6, "SWR-1 matches SVR-1")
    r1, r2 = ctx.result(K.SWR1), ctx.result(K.SVR1)
    c.holds("both optimal", r1.ok and r2.ok)
    c.close("P_g SWR-1 vs SVR-1", r1.total_dispatch.real, r2.total_dispatch.real, 1e-3)
    return c


def check_geometry(ctx: Context) -> Check:
    c = Check(7, "Sweep geometry")
    swr2 = ctx.sweep(K.SWR2).pq()
    c.above("SWR-2 optimal samples", len(swr2), 1)
    if len(swr2) >= 2:
        dist, _ = analysis.line_distance(swr2)
        c.at_most("SWR-2 max distance to line", dist, 1e-4)
        k = int(np.argmin(swr2[:, 0]))
        c.at_most("SWR-2 min-P end vs IVR point", abs(complex(*swr2[k]) - S_IVR), 1e-4)
    c.above("SVR-1 hull area", analysis.hull_area(ctx.sweep(K.SVR1).pq()), 1e-4)
    c.above("SWR-1 hull area", analysis.hull_area(ctx.sweep(K.SWR1).pq()), 1e-4)
    ivr = ctx.sweep(K.IVR)
    c.holds("IVR sweep all optimal", len(ivr.optimal()) == len(ivr))
    spread = np.max(np.abs(ivr.pq() - [S_IVR.real, S_IVR.imag])) if len(ivr.pq()) else np.inf
    c.at_most("IVR sweep spread", spread, 1e-4)
    return c


def check_ablation(ctx: Context) -> Check:
    c = Check(8, "Ablation of SWR-1 constraint families")
    p_ivr = ctx.p_ivr()
    for label, flags in (("matrix KCL only", {"matrix_kcl": True}), ("row sums only", {"row_sums": True})):
        res = ctx.result(K.SWR1, **flags)
        c.holds(f"{label} optimal", res.ok)
        c.above(f"{label} gap %", analysis.relaxation_gap(p_ivr, res.total_dispatch.real), 1.0)
    return c


def projected_points(inst: ProblemInstance, groups: set[str], count: int, rng: np.random.Generator):
    """Random vectors projected onto the linear rows of ``inst`` in ``groups``."""
    rows = [c for c in inst.equalities if c.group in groups]
    if any(c.is_quadratic for c in rows):
        raise ValueError("projection rows must be linear")
    A = np.zeros((len(rows), inst.n))
    b = np.zeros(len(rows))
    for r, c in enumerate(rows):
        for k, v in c.lin:
            A[r, k] += v
        b[r] = c.const
    pinv = np.linalg.pinv(A)
    for _ in range(count):
        x = rng.normal(size=inst.n)
        yield x - pinv @ (A @ x + b)


def fd_stationarity(inst: ProblemInstance, res, h: float = 1e-6) -> float:
    """Lagrangian gradient norm with constraint Jacobians from central differences."""
    g = inst.objective_vector(res.theta)
    x = res.x
    grad = g.copy()
    for rows, mult in ((inst.dense_eq, res.y), (inst.dense_ineq, res.z)):
        if rows.m == 0:
            continue
        jac = np.empty((rows.m, inst.n))
        for k in range(inst.n):
            e = np.zeros(inst.n)
            e[k] = h
            jac[:, k] = (rows.values(x + e) - rows.values(x - e)) / (2 * h)
        grad += jac.T @ mult
    return float(np.max(np.abs(grad)))


def check_invariants(ctx: Context) -> Check:
    c = Check(9, "Invariant suites")
    net = ctx.net
    exact = ctx.newton()
    fm = analysis.feasibility_matrix({"ivr": exact}, net, tuple(K), 1e-6)
    c.holds("exact point feasible for all kinds", all(v is True for v in fm.row("ivr").values()))

    rng = np.random.default_rng(ctx.opts.seed)
    ivr = ctx.inst(K.IVR)
    swr2 = ctx.inst(K.SWR2)
    worst_kcl = 0.0
    for x in projected_points(ivr, {"kcl"}, 100, rng):
        p = point_from_solution(ivr, x, net)
        rep = residuals(swr2, embed(swr2, p, net))
        worst_kcl = max(worst_kcl, max(map(abs, rep.by_name("kcl_matrix").values())))
    c.at_most("lifted KCL on KCL-projected points", worst_kcl, 1e-10)
    worst_rows = 0.0
    for x in projected_points(ivr, {"kcl", "load_current", "gen_current"}, 100, rng):
        p = point_from_solution(ivr, x, net)
        rep = residuals(swr2, embed(swr2, p, net))
        worst_rows = max(worst_rows, max(map(abs, rep.by_name("row_sum").values())))
    c.at_most("row sums on conserved-current points", worst_rows, 1e-12)

    worst_kkt = 0.0
    for kind in NLP_KINDS:
        res = ctx.result(kind)
        if res.ok:
            worst_kkt = max(worst_kkt, fd_stationarity(ctx.inst(kind), res))
        else:
            worst_kkt = np.inf
    c.at_most("NLP stationarity (finite differences)", worst_kkt, 1e-4)

    worst_comp = 0.0
    for kind in (K.SWR1, K.SWR2):
        res = ctx.result(kind)
        inst = ctx.inst(kind)
        if not res.ok:
            worst_comp = np.inf
            continue
        for blk, zmat in zip(inst.psd_blocks, res.psd_duals):
            worst_comp = max(worst_comp, abs(float(np.trace(blk.matrix(res.x) @ zmat))))
    c.at_most("SDP complementarity trace", worst_comp, 1e-6)
    return c


def check_oracles(ctx: Context) -> Check:
    c = Check(10, "Oracle equivalence")
    net = ctx.net
    cloud = analysis.brute_force_set(net, analysis.slack_grid(), "svr1-circuit")
    inst = ctx.inst(K.SWR1)
    valid = cloud.valid()
    c.above("in-bounds cloud points", len(valid), 0)
    bad = sum(not residuals(inst, embed(inst, p.point, net)).feasible(1e-5) for p in valid)
    c.at_most("cloud points infeasible for SWR-1", bad, 0)
    res = ctx.result(K.IVR)
    c.holds("IVR solve optimal", res.ok)
    p = point_from_solution(ctx.inst(K.IVR), res.x, net)
    diff = max(np.max(np.abs(p.voltages[b] - ctx.newton().voltages[b])) for b in p.voltages)
    c.at_most("Newton vs NLP-IVR voltages", diff, 1e-5)
    return c


CHECKS: tuple[Callable[[Context], Check], ...] = (
    check_newton,
    check_kron,
    check_svr2,
    check_svr1,
    check_swr2,
    check_swr1,
    check_geometry,
    check_ablation,
    check_invariants,
    check_oracles,
)


def make_context(perturb_z: float = 0.0, seed: int = 42, net: Network | None = None) -> Context:
    net = net or bundled_case()
    if perturb_z:
        net = net.with_scaled_impedance(1.0 + perturb_z)
    return Context(net, SolverOptions(seed=seed))


def run_check(fn: Callable[[Context], Check], ctx: Context) -> Check:
    t0 = time.perf_counter()
    try:
        c = fn(ctx)
    except Exception as e:  # a crashing check is a failing check
        log.exception("check %s crashed", fn.__name__)
        c = Check(CHECKS.index(fn) + 1, fn.__name__, error=f"{type(e).__name__}: {e}")
    c.seconds = time.perf_counter() - t0
    return c


def run_all(perturb_z: float = 0.0, seed: int = 42) -> list[Check]:
    ctx = make_context(perturb_z, seed)
    return [run_check(fn, ctx) for fn in CHECKS]


def format_table(checks: list[Check]) -> str:
    lines = [f"{'#':>2}  {'check':<44} {'expected':>12} {'observed':>12} {'tol':>8}  result"]
    for c in checks:
        mark = "PASS" if c.passed else "FAIL"
        lines.append(f"{c.number:>2}  {c.title:<44} {'':>12} {'':>12} {'':>8}  {mark} ({c.seconds:.1f}s)")
        if c.error:
            lines.append(f"    ** error: {c.error}")
        for i in c.items:
            exp, obs, tol = i.describe()
            flag = "" if i.passed else "  <== FAIL"
            lines.append(f"    {i.label:<44} {exp:>12} {obs:>12} {tol:>8}{flag}")
    return "\n".join(lines)
