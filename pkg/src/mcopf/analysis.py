"""Objective sweeps, relaxation gaps, feasibility cross-checks and circuit oracles."""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.optimize import fsolve
from scipy.spatial import ConvexHull, QhullError

from mcopf.errors import ContractError, McopfError, NoSolutionError
from mcopf.formulations import (
    FormulationKind,
    IvrPoint,
    LiftedPoint,
    build_formulation,
    embed,
    residuals,
)
from mcopf.netmodel import Network, kron_reduce
from mcopf.solvers import solve
from mcopf.solvers.common import SolverOptions, Status
from mcopf.solvers.newton import solve_power_flow_newton

MIN_SAMPLES = 4
BOUNDARY_DIRECTIONS = 360
BOUNDARY_TOL = 1e-4
# default oracle window; the SVR-1 minimum needs a neutral slack near 1.06 pu
SLACK_EXTENT = 1.5
SLACK_POINTS = 41


def _fmt(v: float) -> str:
    return f"{v:.9g}"


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepSample:
    theta: float
    status: Status
    P: float
    Q: float
    x: np.ndarray


@dataclass(frozen=True)
class SweepReport:
    kind: FormulationKind
    samples: tuple[SweepSample, ...]
    metadata: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    def optimal(self) -> list[SweepSample]:
        return [s for s in self.samples if s.status == Status.OPTIMAL]

    def pq(self, only_optimal: bool = True) -> np.ndarray:
        rows = self.optimal() if only_optimal else self.samples
        return np.array([[s.P, s.Q] for s in rows]).reshape(-1, 2)

    def min_p(self) -> float:
        pq = self.pq()
        return float(pq[:, 0].min()) if len(pq) else math.nan

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["theta", "status", "P", "Q"])
        for s in self.samples:
            w.writerow([_fmt(s.theta), s.status.value, _fmt(s.P), _fmt(s.Q)])
        return buf.getvalue()


def sweep_objective(
    net: Network,
    kind: FormulationKind | str,
    samples: int = 64,
    opts: SolverOptions | None = None,
    *,
    workers: int = 1,
    matrix_kcl: bool = False,
    row_sums: bool = False,
) -> SweepReport:
    """Solve the ``kind`` problem at ``theta = 2*pi*k/samples`` for every k.

    Failed samples stay in the report with their status. With ``workers > 1``
    samples run on a thread pool; results are still ordered by theta.
    """
    if samples < MIN_SAMPLES:
        raise ContractError(f"a sweep needs at least {MIN_SAMPLES} samples, got {samples}")
    kind = FormulationKind.parse(kind)
    inst = build_formulation(net, kind, matrix_kcl=matrix_kcl, row_sums=row_sums)
    thetas = [2.0 * math.pi * k / samples for k in range(samples)]

    def run(theta: float) -> SweepSample:
        res = solve(inst, theta, opts)
        d = res.total_dispatch
        return SweepSample(theta, res.status, d.real, d.imag, res.x)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(run, thetas))
    else:
        out = [run(t) for t in thetas]
    meta = {"samples": samples, "flags": inst.flags, "network": net.name}
    return SweepReport(kind, tuple(out), meta)


# ---------------------------------------------------------------------------
# gap and feasibility
# ---------------------------------------------------------------------------


def relaxation_gap(p_exact: float, p_relaxed: float) -> float:
    """Relative active-power gap in percent."""
    if not p_exact > 0:
        raise ContractError(f"exact dispatch must be positive, got {p_exact}")
    return 100.0 * (p_exact - p_relaxed) / p_exact


@dataclass(frozen=True)
class FeasibilityMatrix:
    """``entries[(name, kind)]`` is a bool, or a string when embedding failed."""

    names: tuple[str, ...]
    kinds: tuple[FormulationKind, ...]
    tol: float
    entries: dict[tuple[str, FormulationKind], bool | str]

    def __getitem__(self, key: tuple[str, FormulationKind | str]) -> bool | str:
        name, kind = key
        return self.entries[(name, FormulationKind.parse(kind))]

    def row(self, name: str) -> dict[str, bool | str]:
        return {k.value: self.entries[(name, k)] for k in self.kinds}

    def format(self) -> str:
        width = max(len(n) for n in self.names) if self.names else 0
        lines = []
        for name in self.names:
            cells = []
            for k in self.kinds:
                v = self.entries[(name, k)]
                cells.append(f"{k.value}:{str(v).lower() if isinstance(v, bool) else 'error'}")
            lines.append(f"{name:<{width}}  " + " ".join(cells))
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {"tol": self.tol, "points": {n: self.row(n) for n in self.names}}


def feasibility_matrix(
    points: Mapping[str, IvrPoint | LiftedPoint] | Sequence[tuple[str, IvrPoint | LiftedPoint]],
    net: Network,
    kinds: Iterable[FormulationKind | str] = tuple(FormulationKind),
    tol: float = 1e-6,
) -> FeasibilityMatrix:
    if not tol > 0:
        raise ContractError("tolerance must be positive")
    items = list(points.items()) if isinstance(points, Mapping) else list(points)
    kinds = tuple(FormulationKind.parse(k) for k in kinds)
    insts = {k: build_formulation(net, k) for k in kinds}
    entries: dict[tuple[str, FormulationKind], bool | str] = {}
    for name, p in items:
        for k in kinds:
            try:
                x = embed(insts[k], p, net)
                entries[(name, k)] = residuals(insts[k], x).feasible(tol)
            except McopfError as e:
                entries[(name, k)] = f"error: {e}"
    return FeasibilityMatrix(tuple(n for n, _ in items), kinds, tol, entries)


# ---------------------------------------------------------------------------
# circuit oracles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SlackSourceSpec:
    """Fixed current injected into KCL at ``(bus, conductor)``."""

    bus: str
    conductor: int
    value: complex


def slack_grid(
    bus: str = "j",
    conductor: int = 1,
    extent: float = SLACK_EXTENT,
    points: int = SLACK_POINTS,
) -> list[SlackSourceSpec]:
    """Square grid of injections, real part outer, imaginary part inner."""
    axis = np.linspace(-extent, extent, points)
    return [SlackSourceSpec(bus, conductor, complex(a, b)) for a in axis for b in axis]


@dataclass(frozen=True)
class CloudPoint:
    slack: complex
    P: float
    Q: float
    un_mag: float
    status: str  # ok | out-of-bounds | failed
    point: IvrPoint | None = None


@dataclass(frozen=True)
class PointCloud:
    mode: str
    points: tuple[CloudPoint, ...]

    def valid(self) -> list[CloudPoint]:
        return [p for p in self.points if p.status == "ok"]

    def pq(self) -> np.ndarray:
        return np.array([[p.P, p.Q] for p in self.valid()]).reshape(-1, 2)

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for p in self.points:
            out[p.status] = out.get(p.status, 0) + 1
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["re_slack", "im_slack", "P", "Q", "Un_mag"])
        for p in self.valid():
            w.writerow([_fmt(p.slack.real), _fmt(p.slack.imag), _fmt(p.P), _fmt(p.Q), _fmt(p.un_mag)])
        return buf.getvalue()


def _within_bounds(net: Network, p: IvrPoint, tol: float = 1e-9) -> bool:
    for b in net.buses:
        mag = np.abs(p.voltages[b.id])
        if np.any(mag < np.array(b.u_min) - tol) or np.any(mag > np.array(b.u_max) + tol):
            return False
    return True


def _cloud_point(net: Network, p: IvrPoint, slack: complex, neutral: tuple[str, int]) -> CloudPoint:
    s = complex(sum(p.dispatch(net).values()))
    un = float(abs(p.voltages[neutral[0]][neutral[1]]))
    status = "ok" if _within_bounds(net, p) else "out-of-bounds"
    return CloudPoint(slack, s.real, s.imag, un, status, p)


def grounded_neutral_point(net: Network) -> IvrPoint:
    """Circuit with the load's return conductor grounded at the load bus.

    Supports one branch from the source bus to a bus with one two-terminal
    load. The return conductor is Kron-eliminated, the scalar equation
    ``V = E - z conj(S / V)`` is solved from ``V = E``, and the currents are
    rebuilt: branch ``(I_a, -Z_nn^-1 Z_na I_a)``, load and generator
    ``(I_a, -I_a)``.
    """
    if len(net.branches) != 1 or len(net.loads) != 1 or len(net.generators) != 1:
        raise ContractError("grounded-neutral circuit needs one branch, one load and one generator")
    br, d, g = net.branches[0], net.loads[0], net.generators[0]
    if d.bus != br.to_bus or not net.bus(br.from_bus).is_slack:
        raise ContractError("load must sit at the far end of the branch from the source")
    a, n = d.terminals
    src = np.array(net.bus(br.from_bus).fixed_voltage, dtype=complex)
    if abs(src[n]) > 1e-12:
        raise ContractError("source return conductor must be at zero voltage")
    z = br.z
    keep = [c for c in range(br.n_conductors) if c != n]
    if keep != [a]:
        raise ContractError("grounded-neutral circuit needs a two-conductor branch")
    zk = complex(kron_reduce(z, [n])[0, 0])
    e = complex(src[a])
    s = complex(d.s_ref)

    def f(v):
        u = complex(v[0], v[1])
        if abs(u) < 1e-9:
            return [1e9, 1e9]
        r = u - e + zk * np.conj(s / u)
        return [r.real, r.imag]

    sol, info, ier, msg = fsolve(f, [e.real, e.imag], xtol=1e-14, full_output=True)
    v = complex(sol[0], sol[1])
    if ier != 1 or abs(complex(*f(sol))) > 1e-10:
        raise NoSolutionError(f"grounded-neutral circuit did not converge: {msg}")
    ia = np.conj(s / v)
    i_branch = np.zeros(br.n_conductors, dtype=complex)
    i_branch[a] = ia
    i_branch[n] = -z[n, a] * ia / z[n, n]
    u_to = np.zeros(br.n_conductors, dtype=complex)
    u_to[a] = v
    dev = np.array([ia, -ia])
    return IvrPoint(
        voltages={br.from_bus: src, br.to_bus: u_to},
        branch_currents={br.id: i_branch},
        load_currents={d.id: dev},
        gen_currents={g.id: dev.copy() if len(g.conductors) == 2 else np.array([ia])},
    )


def brute_force_set(
    net: Network,
    slack: Iterable[SlackSourceSpec] | None = None,
    mode: str = "svr1-circuit",
) -> PointCloud:
    """Enumerate relaxed-circuit solutions.

    ``svr1-circuit`` solves the circuit once per injection in ``slack``
    (default :func:`slack_grid`). Points breaking a voltage bound are kept
    with status ``out-of-bounds``, Newton failures with status ``failed``.
    ``svr2-circuit`` ignores ``slack`` and returns the single grounded-neutral
    circuit point.
    """
    if mode == "svr2-circuit":
        d = net.loads[0]
        p = grounded_neutral_point(net)
        return PointCloud(mode, (_cloud_point(net, p, 0j, (d.bus, d.terminals[1])),))
    if mode != "svr1-circuit":
        raise ContractError(f"unknown oracle mode {mode!r}")
    specs = list(slack) if slack is not None else slack_grid()
    out = []
    for spec in specs:
        if not (math.isfinite(spec.value.real) and math.isfinite(spec.value.imag)):
            raise ContractError("slack grid must be finite")
        try:
            p = solve_power_flow_newton(net, injections={(spec.bus, spec.conductor): spec.value})
        except NoSolutionError:
            out.append(CloudPoint(spec.value, math.nan, math.nan, math.nan, "failed"))
            continue
        out.append(_cloud_point(net, p, spec.value, (spec.bus, spec.conductor)))
    return PointCloud(mode, tuple(out))


# ---------------------------------------------------------------------------
# geometry of (P, Q) sets
# ---------------------------------------------------------------------------


def line_distance(pq: np.ndarray) -> tuple[float, np.ndarray]:
    """Max distance of the points to their principal line, and its unit direction."""
    pq = np.asarray(pq, dtype=float)
    if len(pq) < 2:
        return 0.0, np.array([1.0, 0.0])
    centred = pq - pq.mean(axis=0)
    _, _, vt = np.linalg.svd(centred, full_matrices=False)
    normal = vt[-1] if vt.shape[0] > 1 else np.array([-vt[0, 1], vt[0, 0]])
    return float(np.max(np.abs(centred @ normal))), vt[0]


def hull_area(pq: np.ndarray) -> float:
    """Area of the convex hull; zero for fewer than three or collinear points."""
    pq = np.asarray(pq, dtype=float)
    if len(pq) < 3:
        return 0.0
    try:
        return float(ConvexHull(pq).volume)
    except QhullError:
        return 0.0


def on_boundary(
    point: Sequence[float],
    cloud: np.ndarray,
    directions: int = BOUNDARY_DIRECTIONS,
    tol: float = BOUNDARY_TOL,
) -> bool:
    """True when some sampled direction has ``point`` as a minimiser over ``cloud`` (within ``tol``)."""
    ang = 2.0 * np.pi * np.arange(directions) / directions
    dirs = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    proj = np.asarray(cloud, dtype=float) @ dirs.T
    p = dirs @ np.asarray(point, dtype=float)
    return bool(np.any(p <= proj.min(axis=0) + tol))
