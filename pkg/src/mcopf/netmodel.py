"""Multiconductor network data model, JSON I/O, validation and impedance helpers.

All quantities are per-unit. Complex numbers are encoded in JSON as
two-element ``[re, im]`` arrays. Conductors of a bus are addressed by their
zero-based index; by convention index 0 is the phase and the last index the
neutral in the two-wire case.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from mcopf.errors import (
    NetworkParseError,
    NetworkReferenceError,
    SchemaError,
    SingularMatrixError,
)

PD_PIVOT_TOL = 1e-10


# ---------------------------------------------------------------------------
# matrix predicates
# ---------------------------------------------------------------------------


def is_symmetric(m: np.ndarray, tol: float = 1e-12) -> bool:
    m = np.asarray(m)
    return m.shape[0] == m.shape[1] and bool(np.all(np.abs(m - m.T) <= tol))


def is_hermitian(m: np.ndarray, tol: float = 1e-12) -> bool:
    m = np.asarray(m)
    return m.shape[0] == m.shape[1] and bool(np.all(np.abs(m - m.conj().T) <= tol))


def is_positive_definite(m: np.ndarray, tol: float = PD_PIVOT_TOL) -> bool:
    """Cholesky test on the Hermitian part; fails if any pivot is <= tol."""
    m = np.asarray(m)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        return False
    a = 0.5 * (m + m.conj().T)
    a = a.astype(complex)
    n = a.shape[0]
    low = np.zeros_like(a)
    for k in range(n):
        pivot = a[k, k].real - np.sum(np.abs(low[k, :k]) ** 2)
        if pivot <= tol:
            return False
        low[k, k] = np.sqrt(pivot)
        for i in range(k + 1, n):
            low[i, k] = (a[i, k] - np.dot(low[i, :k], low[k, :k].conj())) / low[k, k]
    return True


def kron_reduce(z: np.ndarray, eliminate: Iterable[int]) -> np.ndarray:
    """Schur complement of ``z`` that eliminates the conductors in ``eliminate``.

    Returns ``Z_kk - Z_ke Z_ee^-1 Z_ek``; valid when the eliminated conductors
    are held at zero voltage at both ends.
    """
    z = np.asarray(z, dtype=complex)
    if z.ndim != 2 or z.shape[0] != z.shape[1]:
        raise ValueError("kron_reduce needs a square matrix")
    n = z.shape[0]
    elim = sorted(set(int(e) for e in eliminate))
    if any(e < 0 or e >= n for e in elim):
        raise IndexError(f"eliminate indices {elim} out of range for side {n}")
    keep = [k for k in range(n) if k not in elim]
    if not elim:
        return z.copy()
    z_ee = z[np.ix_(elim, elim)]
    if np.linalg.cond(z_ee) > 1e12:
        raise SingularMatrixError("eliminated block is singular")
    z_ke = z[np.ix_(keep, elim)]
    z_ek = z[np.ix_(elim, keep)]
    return z[np.ix_(keep, keep)] - z_ke @ np.linalg.solve(z_ee, z_ek)


# ---------------------------------------------------------------------------
# data model
# ---------------------------------------------------------------------------

Matrix = tuple[tuple[float, ...], ...]


@dataclass(frozen=True)
class Bus:
    id: str
    n_conductors: int
    u_min: tuple[float, ...]
    u_max: tuple[float, ...]
    fixed_voltage: tuple[complex, ...] | None = None

    @property
    def is_slack(self) -> bool:
        return self.fixed_voltage is not None


@dataclass(frozen=True)
class Branch:
    id: str
    from_bus: str
    to_bus: str
    R: Matrix
    X: Matrix

    @property
    def z(self) -> np.ndarray:
        return np.array(self.R, dtype=float) + 1j * np.array(self.X, dtype=float)

    @property
    def y(self) -> np.ndarray:
        return np.linalg.inv(self.z)

    @property
    def n_conductors(self) -> int:
        return len(self.R)


@dataclass(frozen=True)
class Load:
    """Two-terminal constant-power load; current enters ``terminals[0]``."""

    id: str
    bus: str
    terminals: tuple[int, int]
    s_ref: complex


@dataclass(frozen=True)
class Generator:
    id: str
    bus: str
    conductors: tuple[int, ...]
    in_objective: bool = True


@dataclass(frozen=True)
class Network:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...] = ()
    loads: tuple[Load, ...] = ()
    generators: tuple[Generator, ...] = ()
    name: str = ""
    base: dict[str, Any] | None = field(default=None, compare=False, hash=False)

    def bus(self, bus_id: str) -> Bus:
        for b in self.buses:
            if b.id == bus_id:
                return b
        raise KeyError(bus_id)

    def branch(self, branch_id: str) -> Branch:
        for br in self.branches:
            if br.id == branch_id:
                return br
        raise KeyError(branch_id)

    @property
    def slack_buses(self) -> tuple[Bus, ...]:
        return tuple(b for b in self.buses if b.is_slack)

    def loads_at(self, bus_id: str) -> list[Load]:
        return [d for d in self.loads if d.bus == bus_id]

    def generators_at(self, bus_id: str) -> list[Generator]:
        return [g for g in self.generators if g.bus == bus_id]

    def with_scaled_impedance(self, factor: float) -> "Network":
        """Copy of the network with every branch R and X multiplied by ``factor``."""
        branches = tuple(
            Branch(
                br.id,
                br.from_bus,
                br.to_bus,
                _as_matrix(np.array(br.R) * factor),
                _as_matrix(np.array(br.X) * factor),
            )
            for br in self.branches
        )
        return Network(self.buses, branches, self.loads, self.generators, self.name, self.base)

    def with_bus_bounds(self, bus_id: str, u_min=None, u_max=None) -> "Network":
        buses = []
        for b in self.buses:
            if b.id == bus_id:
                b = Bus(
                    b.id,
                    b.n_conductors,
                    tuple(float(v) for v in (b.u_min if u_min is None else u_min)),
                    tuple(float(v) for v in (b.u_max if u_max is None else u_max)),
                    b.fixed_voltage,
                )
            buses.append(b)
        return Network(tuple(buses), self.branches, self.loads, self.generators, self.name, self.base)

    def with_load_setpoint(self, load_id: str, s_ref: complex) -> "Network":
        loads = tuple(
            Load(d.id, d.bus, d.terminals, complex(s_ref)) if d.id == load_id else d
            for d in self.loads
        )
        return Network(self.buses, self.branches, loads, self.generators, self.name, self.base)


def _as_matrix(a: Any) -> Matrix:
    return tuple(tuple(float(v) for v in row) for row in np.asarray(a, dtype=float))


# ---------------------------------------------------------------------------
# JSON decoding
# ---------------------------------------------------------------------------


def _require(obj: dict, key: str, where: str) -> Any:
    if not isinstance(obj, dict):
        raise SchemaError(where, "expected an object")
    if key not in obj:
        raise SchemaError(f"{where}.{key}")
    return obj[key]


def _complex(v: Any, where: str) -> complex:
    if not (isinstance(v, (list, tuple)) and len(v) == 2):
        raise SchemaError(where, "complex numbers are encoded as [re, im]")
    try:
        return complex(float(v[0]), float(v[1]))
    except (TypeError, ValueError) as exc:
        raise SchemaError(where, f"non-numeric complex component ({exc})") from None


def _float_list(v: Any, where: str) -> tuple[float, ...]:
    if not isinstance(v, (list, tuple)):
        raise SchemaError(where, "expected an array of numbers")
    try:
        return tuple(float(x) for x in v)
    except (TypeError, ValueError):
        raise SchemaError(where, "expected an array of numbers") from None


def _real_matrix(v: Any, where: str) -> Matrix:
    if not isinstance(v, (list, tuple)) or not v:
        raise SchemaError(where, "expected a non-empty array of rows")
    rows = tuple(_float_list(r, f"{where}[{k}]") for k, r in enumerate(v))
    if any(len(r) != len(rows[0]) for r in rows):
        raise SchemaError(where, "ragged matrix")
    return rows


def parse_network(data: str | bytes) -> Network:
    """Decode network JSON; only structural checks and reference resolution are done."""
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    try:
        raw = json.loads(data)
    except json.JSONDecodeError as exc:
        raise NetworkParseError(exc.msg, exc.lineno, exc.colno) from None
    if not isinstance(raw, dict):
        raise SchemaError("<root>", "expected a JSON object")

    buses = []
    for k, b in enumerate(_require(raw, "buses", "<root>")):
        where = f"buses[{k}]"
        fixed = b.get("fixed_voltage") if isinstance(b, dict) else None
        buses.append(
            Bus(
                id=str(_require(b, "id", where)),
                n_conductors=int(_require(b, "n_conductors", where)),
                u_min=_float_list(_require(b, "u_min", where), f"{where}.u_min"),
                u_max=_float_list(_require(b, "u_max", where), f"{where}.u_max"),
                fixed_voltage=None
                if fixed is None
                else tuple(_complex(v, f"{where}.fixed_voltage") for v in fixed),
            )
        )
    bus_ids = {b.id for b in buses}

    def check_ref(bus_id: str, where: str) -> str:
        if bus_id not in bus_ids:
            raise NetworkReferenceError(f"{where} references unknown bus {bus_id!r}")
        return bus_id

    branches = []
    for k, br in enumerate(raw.get("branches", [])):
        where = f"branches[{k}]"
        branches.append(
            Branch(
                id=str(_require(br, "id", where)),
                from_bus=check_ref(str(_require(br, "from", where)), where),
                to_bus=check_ref(str(_require(br, "to", where)), where),
                R=_real_matrix(_require(br, "R", where), f"{where}.R"),
                X=_real_matrix(_require(br, "X", where), f"{where}.X"),
            )
        )

    loads = []
    for k, d in enumerate(raw.get("loads", [])):
        where = f"loads[{k}]"
        terms = _require(d, "terminals", where)
        if not (isinstance(terms, list) and len(terms) == 2):
            raise SchemaError(f"{where}.terminals", "expected [entry, return]")
        loads.append(
            Load(
                id=str(_require(d, "id", where)),
                bus=check_ref(str(_require(d, "bus", where)), where),
                terminals=(int(terms[0]), int(terms[1])),
                s_ref=_complex(_require(d, "s_ref", where), f"{where}.s_ref"),
            )
        )

    gens = []
    for k, g in enumerate(raw.get("generators", [])):
        where = f"generators[{k}]"
        gens.append(
            Generator(
                id=str(_require(g, "id", where)),
                bus=check_ref(str(_require(g, "bus", where)), where),
                conductors=tuple(int(c) for c in _require(g, "conductors", where)),
                in_objective=bool(g.get("in_objective", True)),
            )
        )

    return Network(
        buses=tuple(buses),
        branches=tuple(branches),
        loads=tuple(loads),
        generators=tuple(gens),
        name=str(raw.get("name", "")),
        base=raw.get("base"),
    )


def _cjson(z: complex) -> list[float]:
    return [float(z.real), float(z.imag)]


def network_to_dict(net: Network) -> dict[str, Any]:
    out: dict[str, Any] = {}
    if net.name:
        out["name"] = net.name
    if net.base is not None:
        out["base"] = net.base
    out["buses"] = [
        {
            "id": b.id,
            "n_conductors": b.n_conductors,
            "u_min": list(b.u_min),
            "u_max": list(b.u_max),
            "fixed_voltage": None
            if b.fixed_voltage is None
            else [_cjson(v) for v in b.fixed_voltage],
        }
        for b in net.buses
    ]
    out["branches"] = [
        {
            "id": br.id,
            "from": br.from_bus,
            "to": br.to_bus,
            "R": [list(r) for r in br.R],
            "X": [list(r) for r in br.X],
        }
        for br in net.branches
    ]
    out["loads"] = [
        {"id": d.id, "bus": d.bus, "terminals": list(d.terminals), "s_ref": _cjson(d.s_ref)}
        for d in net.loads
    ]
    out["generators"] = [
        {"id": g.id, "bus": g.bus, "conductors": list(g.conductors), "in_objective": g.in_objective}
        for g in net.generators
    ]
    return out


def network_to_json(net: Network, indent: int | None = 2) -> str:
    return json.dumps(network_to_dict(net), indent=indent)


def load_network(path: str | Path) -> Network:
    return parse_network(Path(path).read_bytes())


def bundled_case(name: str = "two_bus_two_wire") -> Network:
    text = resources.files("mcopf").joinpath("cases", f"{name}.json").read_bytes()
    return parse_network(text)


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Finding:
    code: str
    element: str
    message: str

    def __str__(self) -> str:
        return f"[{self.code}] {self.element}: {self.message}"


@dataclass(frozen=True)
class ValidationReport:
    findings: tuple[Finding, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.findings

    def codes(self) -> list[str]:
        return [f.code for f in self.findings]

    def __len__(self) -> int:
        return len(self.findings)

    def __iter__(self):
        return iter(self.findings)


def _valid_conductors(idx: Sequence[int], n: int) -> bool:
    return all(0 <= c < n for c in idx)


def validate_network(net: Network, sym_tol: float = 1e-12) -> ValidationReport:
    """Collect every violated network invariant; an empty report means valid."""
    out: list[Finding] = []
    add = lambda code, el, msg: out.append(Finding(code, el, msg))  # noqa: E731
    buses = {}
    for b in net.buses:
        el = f"bus {b.id}"
        if b.id in buses:
            add("duplicate-id", el, "bus id used twice")
        buses[b.id] = b
        if b.n_conductors < 1:
            add("conductor-count", el, "n_conductors must be positive")
        if len(b.u_min) != b.n_conductors or len(b.u_max) != b.n_conductors:
            add("bound-length", el, "u_min/u_max length differs from n_conductors")
            continue
        for c, (lo, hi) in enumerate(zip(b.u_min, b.u_max)):
            if lo < 0:
                add("bound-negative", el, f"u_min[{c}] = {lo} < 0")
            if lo > hi:
                add("bound-order", el, f"u_min[{c}] = {lo} > u_max[{c}] = {hi}")
        if b.fixed_voltage is not None and len(b.fixed_voltage) != b.n_conductors:
            add("fixed-voltage-length", el, "fixed_voltage length differs from n_conductors")

    n_slack = len(net.slack_buses)
    if n_slack != 1:
        add("slack-count", "network", f"expected exactly one voltage source bus, found {n_slack}")

    for br in net.branches:
        el = f"branch {br.id}"
        if br.from_bus not in buses or br.to_bus not in buses:
            add("reference", el, "unknown terminal bus")
            continue
        if br.from_bus == br.to_bus:
            add("self-loop", el, "from and to bus coincide")
        nf, nt = buses[br.from_bus].n_conductors, buses[br.to_bus].n_conductors
        if nf != nt:
            add("conductor-mismatch", el, f"terminal buses have {nf} and {nt} conductors")
        r, x = np.array(br.R, dtype=float), np.array(br.X, dtype=float)
        if r.shape != (nf, nf) or x.shape != (nf, nf):
            add("impedance-shape", el, f"R and X must be {nf}x{nf}")
            continue
        for label, m in (("R", r), ("X", x)):
            if not is_symmetric(m, sym_tol):
                add("asymmetric", el, f"{label} is not symmetric")
            if not is_positive_definite(m):
                add("not-positive-definite", el, f"{label} is not positive definite")
        z = r + 1j * x
        if np.linalg.cond(z) > 1e12:
            add("singular-impedance", el, "Z = R + jX is singular")
        else:
            resid = np.max(np.abs(z @ np.linalg.inv(z) - np.eye(nf)))
            if resid >= 1e-12:
                add("inverse-accuracy", el, f"|Z Y - I| = {resid:.2e}")

    for d in net.loads:
        el = f"load {d.id}"
        if d.bus not in buses:
            add("reference", el, "unknown bus")
            continue
        if d.terminals[0] == d.terminals[1]:
            add("terminals", el, "terminals must be distinct")
        if not _valid_conductors(d.terminals, buses[d.bus].n_conductors):
            add("terminals", el, "terminal index out of range")

    for g in net.generators:
        el = f"generator {g.id}"
        if g.bus not in buses:
            add("reference", el, "unknown bus")
            continue
        if len(set(g.conductors)) != len(g.conductors) or not g.conductors:
            add("conductors", el, "conductors must be distinct and non-empty")
        if not _valid_conductors(g.conductors, buses[g.bus].n_conductors):
            add("conductors", el, "conductor index out of range")

    return ValidationReport(tuple(out))
