"""Compile a :class:`~mcopf.netmodel.Network` into real-valued OPF problems.

Five variants are supported (see :class:`FormulationKind`). Every complex
equality is split into real/imaginary rows, Hermitian matrix variables store
only their upper triangle, and the lifted PSD condition on the branch block
matrix is kept as the real symmetric embedding ``[[Re M, -Im M], [Im M, Re M]]``.

Conventions used throughout:

* branch current ``I_lij`` flows from the ``from`` bus into the branch;
  the reverse-end current is ``-I_lij``;
* load currents flow from the bus into the load, generator currents from the
  generator into the bus;
* the voltage-source bus has its voltages substituted as constants
  (and ``W = U U^H`` in the lifted kinds), and carries no voltage bounds.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping, Sequence

import numpy as np

from mcopf.errors import ContractError, EmbeddingError, ModelError, SchemaError
from mcopf.expr import EQ, LE, CExpr, Constraint, RPoly, csum, realify
from mcopf.netmodel import Network, validate_network


class FormulationKind(enum.Enum):
    IVR = "ivr"
    SVR1 = "svr1"
    SVR2 = "svr2"
    SWR1 = "swr1"
    SWR2 = "swr2"

    @classmethod
    def parse(cls, text: str | "FormulationKind") -> "FormulationKind":
        if isinstance(text, cls):
            return text
        key = str(text).strip().lower().replace("-", "")
        for k in cls:
            if k.value == key:
                return k
        raise ValueError(f"unknown formulation {text!r}; expected one of ivr, svr1, svr2, swr1, swr2")

    @property
    def is_lifted(self) -> bool:
        return self in (FormulationKind.SWR1, FormulationKind.SWR2)

    @property
    def label(self) -> str:
        return {"ivr": "IVR", "svr1": "SVR-1", "svr2": "SVR-2", "swr1": "SWR-1", "swr2": "SWR-2"}[self.value]


NLP_KINDS = (FormulationKind.IVR, FormulationKind.SVR1, FormulationKind.SVR2)
SDP_KINDS = (FormulationKind.SWR1, FormulationKind.SWR2)


# ---------------------------------------------------------------------------
# registry
# ---------------------------------------------------------------------------

VECTOR, HERMITIAN, MATRIX = "vector", "hermitian", "matrix"


@dataclass(frozen=True)
class Variable:
    name: str
    owner: str
    symbol: str
    index: tuple[int, ...]
    part: str  # "re" | "im"
    lb: float | None = None
    ub: float | None = None


@dataclass(frozen=True)
class Block:
    """Shape record of one complex symbol stored in the registry."""

    symbol: str
    owner: str
    structure: str
    shape: tuple[int, ...]


class VariableRegistry:
    """Ordered real scalars, grouped into complex vectors/matrices by symbol."""

    def __init__(self, variables: Sequence[Variable] = (), blocks: Sequence[Block] = ()):
        self.variables: list[Variable] = list(variables)
        self.blocks: list[Block] = list(blocks)

    def __len__(self) -> int:
        return len(self.variables)

    def __iter__(self):
        return iter(self.variables)

    def __getitem__(self, k: int) -> Variable:
        return self.variables[k]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, VariableRegistry)
            and self.variables == other.variables
            and self.blocks == other.blocks
        )

    def _new(self, owner: str, symbol: str, index: tuple[int, ...], part: str) -> int:
        k = len(self.variables)
        coord = ",".join(str(i) for i in index)
        self.variables.append(Variable(f"{symbol}[{owner}][{coord}].{part}", owner, symbol, index, part))
        return k

    def add_vector(self, symbol: str, owner: str, n: int) -> list[CExpr]:
        self.blocks.append(Block(symbol, owner, VECTOR, (n,)))
        out = []
        for c in range(n):
            re = self._new(owner, symbol, (c,), "re")
            im = self._new(owner, symbol, (c,), "im")
            out.append(CExpr.var(re, im))
        return out

    def add_matrix(self, symbol: str, owner: str, n: int, m: int | None = None) -> list[list[CExpr]]:
        m = n if m is None else m
        self.blocks.append(Block(symbol, owner, MATRIX, (n, m)))
        out = [[CExpr() for _ in range(m)] for _ in range(n)]
        for r in range(n):
            for c in range(m):
                re = self._new(owner, symbol, (r, c), "re")
                im = self._new(owner, symbol, (r, c), "im")
                out[r][c] = CExpr.var(re, im)
        return out

    def add_hermitian(self, symbol: str, owner: str, n: int) -> list[list[CExpr]]:
        self.blocks.append(Block(symbol, owner, HERMITIAN, (n, n)))
        out = [[CExpr() for _ in range(n)] for _ in range(n)]
        for r in range(n):
            for c in range(r, n):
                re = self._new(owner, symbol, (r, c), "re")
                if r == c:
                    out[r][c] = CExpr.var(re, None)
                else:
                    im = self._new(owner, symbol, (r, c), "im")
                    out[r][c] = CExpr.var(re, im)
                    out[c][r] = out[r][c].conj()
        return out

    def has(self, symbol: str, owner: str) -> bool:
        return any(b.symbol == symbol and b.owner == owner for b in self.blocks)

    def symbols(self) -> set[str]:
        return {b.symbol for b in self.blocks}

    def block(self, symbol: str, owner: str) -> Block:
        for b in self.blocks:
            if b.symbol == symbol and b.owner == owner:
                return b
        raise KeyError((symbol, owner))

    @cached_property
    def _lookup(self) -> dict[tuple[str, str, tuple[int, ...], str], int]:
        return {(v.symbol, v.owner, v.index, v.part): k for k, v in enumerate(self.variables)}

    def index_of(self, symbol: str, owner: str, index: tuple[int, ...], part: str) -> int:
        return self._lookup[(symbol, owner, tuple(index), part)]

    def values(self, x: np.ndarray) -> dict[tuple[str, str], np.ndarray]:
        """Reassemble complex arrays (Hermitian blocks filled both ways) from ``x``."""
        out: dict[tuple[str, str], np.ndarray] = {}
        for b in self.blocks:
            out[(b.symbol, b.owner)] = np.zeros(b.shape, dtype=complex)
        for k, v in enumerate(self.variables):
            arr = out[(v.symbol, v.owner)]
            if v.part == "re":
                arr[v.index] += x[k]
            else:
                arr[v.index] += 1j * x[k]
        for b in self.blocks:
            if b.structure == HERMITIAN:
                arr = out[(b.symbol, b.owner)]
                upper = np.triu(arr)
                out[(b.symbol, b.owner)] = upper + np.triu(arr, 1).conj().T
        return out

    def pack(self, values: Mapping[tuple[str, str], np.ndarray]) -> np.ndarray:
        """Inverse of :meth:`values`; raises :class:`EmbeddingError` on missing symbols."""
        x = np.zeros(len(self.variables))
        for k, v in enumerate(self.variables):
            key = (v.symbol, v.owner)
            if key not in values or values[key] is None:
                raise EmbeddingError(f"no value for {v.symbol} of {v.owner!r}")
            z = complex(np.asarray(values[key])[v.index])
            x[k] = z.real if v.part == "re" else z.imag
        return x


# ---------------------------------------------------------------------------
# PSD blocks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PsdBlock:
    """Affine symmetric matrix ``const + sum coef * x[var] * E_{row,col}`` required PSD.

    ``terms`` lists every (row, col) entry explicitly, both triangles.
    """

    name: str
    side: int
    const: tuple[tuple[float, ...], ...]
    terms: tuple[tuple[int, int, int, float], ...]  # (var, row, col, coef)

    def matrix(self, x: np.ndarray) -> np.ndarray:
        m = np.array(self.const, dtype=float)
        for var, r, c, coef in self.terms:
            m[r, c] += coef * x[var]
        return m

    def variables(self) -> set[int]:
        return {t[0] for t in self.terms}

    def coefficient_matrices(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(F0, F)`` with ``F[k]`` the coefficient matrix of variable ``k``."""
        f0 = np.array(self.const, dtype=float)
        f = np.zeros((n, self.side, self.side))
        for var, r, c, coef in self.terms:
            f[var, r, c] += coef
        return f0, f


def _psd_from_complex(name: str, m: list[list[CExpr]]) -> PsdBlock:
    """Real embedding of an affine Hermitian matrix of expressions."""
    n = len(m)
    side = 2 * n
    const = np.zeros((side, side))
    terms: dict[tuple[int, int, int], float] = {}

    def put(poly: RPoly, r: int, c: int, sign: float) -> None:
        if poly.quad:
            raise ContractError("PSD block entries must be affine")
        const[r, c] += sign * poly.const
        for var, coef in poly.lin.items():
            key = (var, r, c)
            terms[key] = terms.get(key, 0.0) + sign * coef

    for r in range(n):
        for c in range(n):
            e = m[r][c]
            put(e.re, r, c, 1.0)
            put(e.re, r + n, c + n, 1.0)
            put(e.im, r, c + n, -1.0)
            put(e.im, r + n, c, 1.0)
    return PsdBlock(
        name=name,
        side=side,
        const=tuple(tuple(float(v) for v in row) for row in const),
        terms=tuple((v, r, c, coef) for (v, r, c), coef in sorted(terms.items()) if coef != 0.0),
    )


# ---------------------------------------------------------------------------
# problem instance
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DenseRows:
    """Stacked dense representation ``c_k(x) = x'Q_k x + a_k'x + b_k``."""

    Q: np.ndarray  # (m, n, n), symmetric
    A: np.ndarray  # (m, n)
    b: np.ndarray  # (m,)

    @property
    def m(self) -> int:
        return self.b.shape[0]

    def values(self, x: np.ndarray) -> np.ndarray:
        if self.m == 0:
            return np.zeros(0)
        return np.einsum("i,kij,j->k", x, self.Q, x) + self.A @ x + self.b

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        if self.m == 0:
            return np.zeros((0, self.A.shape[1]))
        return 2.0 * np.einsum("kij,j->ki", self.Q, x) + self.A

    def hessian(self, weights: np.ndarray) -> np.ndarray:
        n = self.A.shape[1]
        if self.m == 0:
            return np.zeros((n, n))
        return 2.0 * np.einsum("k,kij->ij", weights, self.Q)

    @property
    def is_linear(self) -> bool:
        return not np.any(self.Q)


def _dense_rows(rows: Sequence[Constraint], n: int) -> DenseRows:
    m = len(rows)
    Q = np.zeros((m, n, n))
    A = np.zeros((m, n))
    b = np.zeros(m)
    for k, row in enumerate(rows):
        b[k] = row.const
        for i, v in row.lin:
            A[k, i] += v
        for i, j, v in row.quad:
            if i == j:
                Q[k, i, i] += v
            else:
                Q[k, i, j] += 0.5 * v
                Q[k, j, i] += 0.5 * v
    return DenseRows(Q, A, b)


@dataclass(frozen=True)
class ProblemInstance:
    kind: FormulationKind
    registry: VariableRegistry
    constraints: tuple[Constraint, ...]
    psd_blocks: tuple[PsdBlock, ...]
    objective_p: tuple[tuple[int, float], ...]
    objective_q: tuple[tuple[int, float], ...]
    fixed_voltages: tuple[tuple[str, tuple[complex, ...]], ...] = ()
    flags: tuple[str, ...] = ()
    network_name: str = ""

    @property
    def n(self) -> int:
        return len(self.registry)

    @property
    def equalities(self) -> list[Constraint]:
        return [c for c in self.constraints if c.sense == EQ]

    @property
    def inequalities(self) -> list[Constraint]:
        return [c for c in self.constraints if c.sense == LE]

    @property
    def linear_constraints(self) -> list[Constraint]:
        return [c for c in self.constraints if not c.is_quadratic]

    @property
    def quadratic_constraints(self) -> list[Constraint]:
        return [c for c in self.constraints if c.is_quadratic]

    def objective_vector(self, theta: float) -> np.ndarray:
        g = np.zeros(self.n)
        for k, v in self.objective_p:
            g[k] += np.cos(theta) * v
        for k, v in self.objective_q:
            g[k] += np.sin(theta) * v
        return g

    def objective_pq(self, x: np.ndarray) -> tuple[float, float]:
        p = sum(v * x[k] for k, v in self.objective_p)
        q = sum(v * x[k] for k, v in self.objective_q)
        return float(p), float(q)

    @cached_property
    def dense_eq(self) -> DenseRows:
        return _dense_rows(self.equalities, self.n)

    @cached_property
    def dense_ineq(self) -> DenseRows:
        return _dense_rows(self.inequalities, self.n)

    def values(self, x: np.ndarray) -> dict[tuple[str, str], np.ndarray]:
        out = self.registry.values(x)
        for bus, u in self.fixed_voltages:
            u = np.array(u, dtype=complex)
            out.setdefault(("U", bus), u)
            if self.kind.is_lifted:
                out.setdefault(("W", bus), np.outer(u, u.conj()))
        return out

    def dispatch(self, x: np.ndarray) -> dict[str, complex]:
        vals = self.registry.values(x)
        return {
            b.owner: complex(vals[(b.symbol, b.owner)][0])
            for b in self.registry.blocks
            if b.symbol == "S_disp"
        }


# ---------------------------------------------------------------------------
# builder
# ---------------------------------------------------------------------------


def _mat(a: np.ndarray) -> list[list[complex]]:
    return [[complex(v) for v in row] for row in a]


def _mm(a, b) -> list[list[CExpr]]:
    """Product of two matrices whose entries are numbers or :class:`CExpr`."""
    n, k, m = len(a), len(b), len(b[0])
    return [[csum(a[r][t] * b[t][c] for t in range(k)) for c in range(m)] for r in range(n)]


def _H(a) -> list[list]:
    return [[(a[r][c].conj() if isinstance(a[r][c], CExpr) else complex(a[r][c]).conjugate())
             for r in range(len(a))] for c in range(len(a[0]))]


def _lift_const(v) -> CExpr:
    return v if isinstance(v, CExpr) else CExpr.const(v)


class _Builder:
    def __init__(self, net: Network, kind: FormulationKind, matrix_kcl: bool, row_sums: bool):
        self.net = net
        self.kind = kind
        self.matrix_kcl = matrix_kcl
        self.row_sums = row_sums
        self.reg = VariableRegistry()
        self.rows: list[Constraint] = []
        self.psd: list[PsdBlock] = []
        self.U: dict[str, list[CExpr]] = {}
        self.W: dict[str, list[list[CExpr]]] = {}

    # -- emit helpers ------------------------------------------------------
    def eq(self, name: str, lhs: CExpr, rhs=0.0, group: str = "") -> None:
        self.rows.extend(realify(name, _lift_const(lhs), rhs, group))

    def eq_real(self, name: str, poly: RPoly, group: str = "") -> None:
        self.rows.append(Constraint.from_poly(name, poly, EQ, group))

    def le(self, name: str, poly: RPoly, group: str = "") -> None:
        self.rows.append(Constraint.from_poly(name, poly, LE, group))

    def eq_hermitian(self, name: str, m: list[list[CExpr]], group: str = "") -> None:
        """Upper triangle of a Hermitian-valued equality; diagonal imaginary parts vanish."""
        n = len(m)
        for r in range(n):
            self.eq_real(f"{name}[{r},{r}].re", _lift_const(m[r][r]).re, group)
            for c in range(r + 1, n):
                self.eq(f"{name}[{r},{c}]", m[r][c], 0.0, group)

    def eq_matrix(self, name: str, m: list[list[CExpr]], group: str = "") -> None:
        for r in range(len(m)):
            for c in range(len(m[0])):
                self.eq(f"{name}[{r},{c}]", m[r][c], 0.0, group)

    # -- variables ---------------------------------------------------------
    def voltages(self) -> None:
        for b in self.net.buses:
            if b.is_slack:
                u = [CExpr.const(v) for v in b.fixed_voltage]
                self.U[b.id] = u
                if self.kind.is_lifted:
                    uu = np.array(b.fixed_voltage, dtype=complex)
                    self.W[b.id] = [[CExpr.const(v) for v in row] for row in np.outer(uu, uu.conj())]
            elif self.kind.is_lifted:
                self.W[b.id] = self.reg.add_hermitian("W", b.id, b.n_conductors)
            else:
                self.U[b.id] = self.reg.add_vector("U", b.id, b.n_conductors)

    def bounds(self) -> None:
        for b in self.net.buses:
            if b.is_slack:
                continue
            for c in range(b.n_conductors):
                if self.kind.is_lifted:
                    mag2 = self.W[b.id][c][c].re
                else:
                    u = self.U[b.id][c]
                    mag2 = u.re * u.re + u.im * u.im
                self.le(f"vmax[{b.id}][{c}]", mag2 - b.u_max[c] ** 2, "bounds")
                # u_min = 0 is identically satisfied; emitting it would only add a
                # barrier term that pushes iterates away from the 0 V solutions.
                if b.u_min[c] > 0:
                    self.le(f"vmin[{b.id}][{c}]", b.u_min[c] ** 2 - mag2, "bounds")

    def objective(self, disp: dict[str, CExpr]) -> tuple[tuple, tuple]:
        p: dict[int, float] = {}
        q: dict[int, float] = {}
        for g in self.net.generators:
            if not g.in_objective:
                continue
            e = disp[g.id]
            (kp, vp), = e.re.lin.items()
            (kq, vq), = e.im.lin.items()
            p[kp] = p.get(kp, 0.0) + vp
            q[kq] = q.get(kq, 0.0) + vq
        return tuple(sorted(p.items())), tuple(sorted(q.items()))

    # -- recipes -----------------------------------------------------------
    def build(self) -> ProblemInstance:
        self.voltages()
        if self.kind.is_lifted:
            disp = self._lifted()
        else:
            disp = self._nlp()
        self.bounds()
        p, q = self.objective(disp)
        rows = tuple(r for r in self.rows if not r.removable)
        flags = []
        if self.kind == FormulationKind.SWR1:
            if self.matrix_kcl:
                flags.append("matrix_kcl")
            if self.row_sums:
                flags.append("row_sums")
        fixed = tuple((b.id, tuple(complex(v) for v in b.fixed_voltage)) for b in self.net.slack_buses)
        return ProblemInstance(
            kind=self.kind,
            registry=self.reg,
            constraints=rows,
            psd_blocks=tuple(self.psd),
            objective_p=p,
            objective_q=q,
            fixed_voltages=fixed,
            flags=tuple(flags),
            network_name=self.net.name,
        )

    def _nlp(self) -> dict[str, CExpr]:
        net, reg, kind = self.net, self.reg, self.kind
        K = FormulationKind
        with_currents = kind in (K.IVR, K.SVR2)
        with_branch_power = kind in (K.SVR1, K.SVR2)

        I_br: dict[str, list[CExpr]] = {}
        S_from: dict[str, list[CExpr]] = {}
        S_to: dict[str, list[CExpr]] = {}
        for br in net.branches:
            n = br.n_conductors
            if kind == K.IVR:
                I_br[br.id] = reg.add_vector("I_lij", br.id, n)
            else:
                S_from[br.id] = reg.add_vector("S_lij", br.id, n)
                S_to[br.id] = reg.add_vector("S_lji", br.id, n)

        I_d: dict[str, list[CExpr]] = {}
        S_d: dict[str, list[CExpr]] = {}
        for d in net.loads:
            if with_currents:
                I_d[d.id] = reg.add_vector("I_d", d.id, 2)
            S_d[d.id] = reg.add_vector("S_d", d.id, 2)
        I_g: dict[str, list[CExpr]] = {}
        S_g: dict[str, list[CExpr]] = {}
        disp: dict[str, CExpr] = {}
        for g in net.generators:
            if with_currents:
                I_g[g.id] = reg.add_vector("I_g", g.id, len(g.conductors))
            S_g[g.id] = reg.add_vector("S_g", g.id, len(g.conductors))
            disp[g.id] = reg.add_vector("S_disp", g.id, 1)[0]

        # bus KCL, current form (IVR) or lifted element-wise power form (SVR)
        for b in net.buses:
            for c in range(b.n_conductors):
                terms: list[CExpr] = []
                for br in net.branches:
                    if br.from_bus == b.id:
                        terms.append(I_br[br.id][c] if kind == K.IVR else S_from[br.id][c])
                    elif br.to_bus == b.id:
                        terms.append(-I_br[br.id][c] if kind == K.IVR else S_to[br.id][c])
                for d in net.loads_at(b.id):
                    for t, cond in enumerate(d.terminals):
                        if cond == c:
                            terms.append(I_d[d.id][t] if kind == K.IVR else S_d[d.id][t])
                for g in net.generators_at(b.id):
                    for t, cond in enumerate(g.conductors):
                        if cond == c:
                            terms.append(-(I_g[g.id][t] if kind == K.IVR else S_g[g.id][t]))
                self.eq(f"kcl[{b.id}][{c}]", csum(terms), 0.0, "kcl")

        # Ohm's law
        for br in net.branches:
            ui, uj = self.U[br.from_bus], self.U[br.to_bus]
            n = br.n_conductors
            if kind == K.IVR:
                z = br.z
                for c in range(n):
                    drop = csum(z[c, k] * I_br[br.id][k] for k in range(n))
                    self.eq(f"ohm[{br.id}][{c}]", uj[c] - ui[c] + drop, 0.0, "ohm")
            else:
                y = br.y
                for c in range(n):
                    i_ij = csum(y[c, k] * (ui[k] - uj[k]) for k in range(n))
                    self.eq(f"ohm_from[{br.id}][{c}]", S_from[br.id][c] - ui[c] * i_ij.conj(), 0.0, "ohm")
                    self.eq(f"ohm_to[{br.id}][{c}]", S_to[br.id][c] - uj[c] * (-i_ij).conj(), 0.0, "ohm")

        for d in net.loads:
            u = self.U[d.bus]
            a, nn = d.terminals
            if kind == K.IVR:
                # set point over the load voltage drop
                self.eq(f"setpoint[{d.id}]", (u[a] - u[nn]) * I_d[d.id][0].conj(), d.s_ref, "setpoint")
            else:
                self.eq(f"setpoint[{d.id}]", csum(S_d[d.id]), d.s_ref, "setpoint")
            if with_currents:
                for t, cond in enumerate(d.terminals):
                    self.eq(f"load_power[{d.id}][{t}]", S_d[d.id][t] - u[cond] * I_d[d.id][t].conj(), 0.0, "load_power")
                self.eq(f"load_current[{d.id}]", csum(I_d[d.id]), 0.0, "load_current")

        for g in net.generators:
            u = self.U[g.bus]
            if with_currents:
                for t, cond in enumerate(g.conductors):
                    self.eq(f"gen_power[{g.id}][{t}]", S_g[g.id][t] - u[cond] * I_g[g.id][t].conj(), 0.0, "gen_power")
                self.eq(f"gen_current[{g.id}]", csum(I_g[g.id]), 0.0, "gen_current")
            self.eq(f"dispatch[{g.id}]", disp[g.id] - csum(S_g[g.id]), 0.0, "dispatch")

        return disp

    def _lifted(self) -> dict[str, CExpr]:
        net, reg = self.net, self.reg
        matrix_kcl = self.kind == FormulationKind.SWR2 or self.matrix_kcl
        row_sums = self.kind == FormulationKind.SWR2 or self.row_sums
        with_bar_devices = matrix_kcl or row_sums

        L: dict[str, list[list[CExpr]]] = {}
        Sb_from: dict[str, list[list[CExpr]]] = {}
        Sb_to: dict[str, list[list[CExpr]]] = {}
        for br in net.branches:
            n = br.n_conductors
            L[br.id] = reg.add_hermitian("L", br.id, n)
            Sb_from[br.id] = reg.add_matrix("Sbar_lij", br.id, n)
            Sb_to[br.id] = reg.add_matrix("Sbar_lji", br.id, n)

        Sb_d: dict[str, list[list[CExpr]]] = {}
        S_d: dict[str, list[CExpr]] = {}
        for d in net.loads:
            if with_bar_devices:
                Sb_d[d.id] = reg.add_matrix("Sbar_d", d.id, 2)
            S_d[d.id] = reg.add_vector("S_d", d.id, 2)
        Sb_g: dict[str, list[list[CExpr]]] = {}
        S_g: dict[str, list[CExpr]] = {}
        disp: dict[str, CExpr] = {}
        for g in net.generators:
            k = len(g.conductors)
            if with_bar_devices:
                Sb_g[g.id] = reg.add_matrix("Sbar_g", g.id, k)
            S_g[g.id] = reg.add_vector("S_g", g.id, k)
            disp[g.id] = reg.add_vector("S_disp", g.id, 1)[0]

        # bus KCL: matrix form or diagonal form
        for b in net.buses:
            nb = b.n_conductors
            acc = [[CExpr() for _ in range(nb)] for _ in range(nb)]
            for br in net.branches:
                src = Sb_from if br.from_bus == b.id else Sb_to if br.to_bus == b.id else None
                if src is None:
                    continue
                for r in range(nb):
                    for c in range(nb):
                        acc[r][c] = acc[r][c] + src[br.id][r][c]
            if matrix_kcl:
                for d in net.loads_at(b.id):
                    for t1, c1 in enumerate(d.terminals):
                        for t2, c2 in enumerate(d.terminals):
                            acc[c1][c2] = acc[c1][c2] + Sb_d[d.id][t1][t2]
                for g in net.generators_at(b.id):
                    for t1, c1 in enumerate(g.conductors):
                        for t2, c2 in enumerate(g.conductors):
                            acc[c1][c2] = acc[c1][c2] - Sb_g[g.id][t1][t2]
                self.eq_matrix(f"kcl_matrix[{b.id}]", acc, "kcl")
            else:
                for c in range(nb):
                    terms = [acc[c][c]]
                    for d in net.loads_at(b.id):
                        terms += [S_d[d.id][t] for t, cond in enumerate(d.terminals) if cond == c]
                    for g in net.generators_at(b.id):
                        terms += [-S_g[g.id][t] for t, cond in enumerate(g.conductors) if cond == c]
                    self.eq(f"kcl[{b.id}][{c}]", csum(terms), 0.0, "kcl")

        for br in net.branches:
            z = _mat(br.z)
            zh = _mat(br.z.conj().T)
            wi, wj = self.W[br.from_bus], self.W[br.to_bus]
            sb, lb = Sb_from[br.id], L[br.id]
            n = br.n_conductors
            s_zh = _mm(sb, zh)
            z_sh = _mm(z, _H(sb))
            z_l_zh = _mm(_mm(z, lb), zh)
            ohm = [[wj[r][c] - wi[r][c] + s_zh[r][c] + z_sh[r][c] - z_l_zh[r][c] for c in range(n)] for r in range(n)]
            self.eq_hermitian(f"ohm[{br.id}]", ohm, "ohm")
            zl = _mm(z, lb)
            loss = [[sb[r][c] + Sb_to[br.id][r][c] - zl[r][c] for c in range(n)] for r in range(n)]
            self.eq_matrix(f"flow_loss[{br.id}]", loss, "flow_loss")
            m = [[_lift_const(wi[r][c]) for c in range(n)] + [sb[r][c] for c in range(n)] for r in range(n)]
            sbh = _H(sb)
            m += [[sbh[r][c] for c in range(n)] + [lb[r][c] for c in range(n)] for r in range(n)]
            self.psd.append(_psd_from_complex(f"M[{br.id}]", m))

        for d in net.loads:
            self.eq(f"setpoint[{d.id}]", csum(S_d[d.id]), d.s_ref, "setpoint")
            if with_bar_devices:
                for t in range(2):
                    self.eq(f"diag_link[{d.id}][{t}]", Sb_d[d.id][t][t] - S_d[d.id][t], 0.0, "diag_link")
            if row_sums:
                for t in range(2):
                    self.eq(f"row_sum[{d.id}][{t}]", csum(Sb_d[d.id][t]), 0.0, "row_sum")
        for g in net.generators:
            k = len(g.conductors)
            if with_bar_devices:
                for t in range(k):
                    self.eq(f"diag_link[{g.id}][{t}]", Sb_g[g.id][t][t] - S_g[g.id][t], 0.0, "diag_link")
            if row_sums:
                for t in range(k):
                    self.eq(f"row_sum[{g.id}][{t}]", csum(Sb_g[g.id][t]), 0.0, "row_sum")
            self.eq(f"dispatch[{g.id}]", disp[g.id] - csum(S_g[g.id]), 0.0, "dispatch")
        return disp


def build_formulation(
    net: Network,
    kind: FormulationKind | str,
    *,
    matrix_kcl: bool = False,
    row_sums: bool = False,
) -> ProblemInstance:
    """Compile ``net`` into the real QCQP/SDP for ``kind``.

    ``matrix_kcl`` and ``row_sums`` add the corresponding SWR-2 ingredients to
    an SWR-1 build (ablation variants); they are ignored for other kinds.
    """
    kind = FormulationKind.parse(kind)
    report = validate_network(net)
    if not report.ok:
        raise ContractError("network failed validation: " + "; ".join(str(f) for f in report))
    if not any(g.in_objective for g in net.generators):
        raise ModelError("no generator participates in the objective")
    if kind != FormulationKind.SWR1:
        matrix_kcl = row_sums = False
    return _Builder(net, kind, matrix_kcl, row_sums).build()


# ---------------------------------------------------------------------------
# points and embeddings
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class IvrPoint:
    """Complex circuit operating point.

    ``load_currents`` / ``gen_currents`` may be ``None`` when unknown (for
    instance a point recovered from an SVR-1 solution).
    """

    voltages: dict[str, np.ndarray]
    branch_currents: dict[str, np.ndarray]
    load_currents: dict[str, np.ndarray] | None = None
    gen_currents: dict[str, np.ndarray] | None = None

    def __post_init__(self):
        self.voltages = {k: np.asarray(v, dtype=complex) for k, v in self.voltages.items()}
        self.branch_currents = {k: np.asarray(v, dtype=complex) for k, v in self.branch_currents.items()}
        if self.load_currents is not None:
            self.load_currents = {k: np.asarray(v, dtype=complex) for k, v in self.load_currents.items()}
        if self.gen_currents is not None:
            self.gen_currents = {k: np.asarray(v, dtype=complex) for k, v in self.gen_currents.items()}

    def check(self, net: Network) -> None:
        for b in net.buses:
            if b.id not in self.voltages or self.voltages[b.id].shape != (b.n_conductors,):
                raise ContractError(f"voltage of bus {b.id!r} missing or mis-sized")
        for br in net.branches:
            if br.id not in self.branch_currents or self.branch_currents[br.id].shape != (br.n_conductors,):
                raise ContractError(f"current of branch {br.id!r} missing or mis-sized")
        if self.load_currents is not None:
            for d in net.loads:
                if self.load_currents.get(d.id, np.zeros(0)).shape != (2,):
                    raise ContractError(f"current of load {d.id!r} missing or mis-sized")
        if self.gen_currents is not None:
            for g in net.generators:
                if self.gen_currents.get(g.id, np.zeros(0)).shape != (len(g.conductors),):
                    raise ContractError(f"current of generator {g.id!r} missing or mis-sized")

    def load_voltage(self, net: Network, load_id: str) -> complex:
        """Voltage across a load's terminals (entry minus return)."""
        d = next(d for d in net.loads if d.id == load_id)
        u = self.voltages[d.bus]
        return complex(u[d.terminals[0]] - u[d.terminals[1]])

    def dispatch(self, net: Network) -> dict[str, complex]:
        if self.gen_currents is None:
            raise EmbeddingError("generator currents unknown")
        return {
            g.id: complex(np.sum(self.voltages[g.bus][list(g.conductors)] * self.gen_currents[g.id].conj()))
            for g in net.generators
        }


_POINT_FIELDS = ("voltages", "branch_currents", "load_currents", "gen_currents")


def point_to_dict(p: IvrPoint) -> dict:
    """JSON-ready form; complex entries become ``[re, im]`` pairs as in network files."""
    out = {}
    for name in _POINT_FIELDS:
        table = getattr(p, name)
        if table is not None:
            out[name] = {k: [[float(z.real), float(z.imag)] for z in v] for k, v in table.items()}
    return out


def point_from_dict(d: Mapping) -> IvrPoint:
    def table(name: str, required: bool):
        if name not in d:
            if required:
                raise SchemaError(name)
            return None
        raw = d[name]
        if not isinstance(raw, Mapping):
            raise SchemaError(name, "expected an object keyed by element id")
        out = {}
        for k, vals in raw.items():
            if not isinstance(vals, (list, tuple)):
                raise SchemaError(f"{name}.{k}", "expected an array of [re, im] pairs")
            zs = []
            for pair in vals:
                if not (isinstance(pair, (list, tuple)) and len(pair) == 2):
                    raise SchemaError(f"{name}.{k}", "complex numbers are encoded as [re, im]")
                try:
                    zs.append(complex(float(pair[0]), float(pair[1])))
                except (TypeError, ValueError):
                    raise SchemaError(f"{name}.{k}", "non-numeric complex component") from None
            out[k] = np.array(zs, dtype=complex)
        return out

    return IvrPoint(
        table("voltages", True),
        table("branch_currents", True),
        table("load_currents", False),
        table("gen_currents", False),
    )


@dataclass(eq=False)
class LiftedPoint:
    W: dict[str, np.ndarray]
    L: dict[str, np.ndarray]
    Sbar_from: dict[str, np.ndarray]
    Sbar_to: dict[str, np.ndarray]
    Sbar_load: dict[str, np.ndarray] | None
    Sbar_gen: dict[str, np.ndarray] | None
    S_load: dict[str, np.ndarray] | None
    S_gen: dict[str, np.ndarray] | None
    S_disp: dict[str, complex] | None

    def block_matrix(self, net: Network, branch_id: str) -> np.ndarray:
        br = net.branch(branch_id)
        sb = self.Sbar_from[branch_id]
        return np.block([[self.W[br.from_bus], sb], [sb.conj().T, self.L[branch_id]]])


def _gram(v: np.ndarray) -> np.ndarray:
    """``v v^H`` with an exactly real diagonal ``|v_k|^2``."""
    m = np.outer(v, v.conj())
    np.fill_diagonal(m, v.real**2 + v.imag**2)
    return m


def lift_point(p: IvrPoint, net: Network) -> LiftedPoint:
    """Outer-product lifting ``W = U U^H``, ``L = I I^H``, ``Sbar = U I^H``."""
    p.check(net)
    W = {b: _gram(u) for b, u in p.voltages.items()}
    L, sf, st = {}, {}, {}
    for br in net.branches:
        i = p.branch_currents[br.id]
        L[br.id] = _gram(i)
        sf[br.id] = np.outer(p.voltages[br.from_bus], i.conj())
        st[br.id] = np.outer(p.voltages[br.to_bus], (-i).conj())
    sbd = sd = None
    if p.load_currents is not None:
        sbd, sd = {}, {}
        for d in net.loads:
            u = p.voltages[d.bus][list(d.terminals)]
            sbd[d.id] = np.outer(u, p.load_currents[d.id].conj())
            sd[d.id] = np.diag(sbd[d.id]).copy()
    sbg = sg = disp = None
    if p.gen_currents is not None:
        sbg, sg, disp = {}, {}, {}
        for g in net.generators:
            u = p.voltages[g.bus][list(g.conductors)]
            sbg[g.id] = np.outer(u, p.gen_currents[g.id].conj())
            sg[g.id] = np.diag(sbg[g.id]).copy()
            disp[g.id] = complex(np.sum(sg[g.id]))
    return LiftedPoint(W, L, sf, st, sbd, sbg, sd, sg, disp)


def point_values(p: IvrPoint | LiftedPoint, net: Network) -> dict[tuple[str, str], np.ndarray]:
    """Every symbol value derivable from ``p``, keyed like the registry."""
    out: dict[tuple[str, str], np.ndarray] = {}
    if isinstance(p, IvrPoint):
        p.check(net)
        for b, u in p.voltages.items():
            out[("U", b)] = u
        for br in net.branches:
            i = p.branch_currents[br.id]
            out[("I_lij", br.id)] = i
            out[("S_lij", br.id)] = p.voltages[br.from_bus] * i.conj()
            out[("S_lji", br.id)] = p.voltages[br.to_bus] * (-i).conj()
        if p.load_currents is not None:
            for d in net.loads:
                out[("I_d", d.id)] = p.load_currents[d.id]
                out[("S_d", d.id)] = p.voltages[d.bus][list(d.terminals)] * p.load_currents[d.id].conj()
        if p.gen_currents is not None:
            for g in net.generators:
                out[("I_g", g.id)] = p.gen_currents[g.id]
                out[("S_g", g.id)] = p.voltages[g.bus][list(g.conductors)] * p.gen_currents[g.id].conj()
                out[("S_disp", g.id)] = np.array([np.sum(out[("S_g", g.id)])])
        lifted = lift_point(p, net)
    else:
        lifted = p
    for b, w in lifted.W.items():
        out[("W", b)] = w
    for k, v in lifted.L.items():
        out[("L", k)] = v
    for k, v in lifted.Sbar_from.items():
        out[("Sbar_lij", k)] = v
    for k, v in lifted.Sbar_to.items():
        out[("Sbar_lji", k)] = v
    for src, sym in (
        (lifted.Sbar_load, "Sbar_d"),
        (lifted.Sbar_gen, "Sbar_g"),
        (lifted.S_load, "S_d"),
        (lifted.S_gen, "S_g"),
    ):
        if src is not None:
            for k, v in src.items():
                out[(sym, k)] = v
    if lifted.S_disp is not None:
        for k, v in lifted.S_disp.items():
            out[("S_disp", k)] = np.array([v])
    return out


def embed(inst: ProblemInstance, p: IvrPoint | LiftedPoint, net: Network) -> np.ndarray:
    """Natural embedding of a circuit or lifted point into ``inst``'s registry."""
    return inst.registry.pack(point_values(p, net))


def point_from_solution(inst: ProblemInstance, x: np.ndarray, net: Network) -> IvrPoint:
    """Recover the circuit point of an IVR/SVR solution vector.

    For SVR kinds the branch current is ``Y (U_i - U_j)``; device currents are
    taken from the registry when present and left unknown otherwise.
    """
    if inst.kind.is_lifted:
        raise ContractError("lifted solutions have no unique circuit point; use lifted_from_solution")
    vals = inst.values(x)
    volts = {b.id: vals[("U", b.id)] for b in net.buses}
    branch = {}
    for br in net.branches:
        if ("I_lij", br.id) in vals:
            branch[br.id] = vals[("I_lij", br.id)]
        else:
            branch[br.id] = br.y @ (volts[br.from_bus] - volts[br.to_bus])
    loads = gens = None
    if net.loads and all(("I_d", d.id) in vals for d in net.loads):
        loads = {d.id: vals[("I_d", d.id)] for d in net.loads}
    if net.generators and all(("I_g", g.id) in vals for g in net.generators):
        gens = {g.id: vals[("I_g", g.id)] for g in net.generators}
    return IvrPoint(volts, branch, loads, gens)


def lifted_from_solution(inst: ProblemInstance, x: np.ndarray, net: Network) -> LiftedPoint:
    if not inst.kind.is_lifted:
        raise ContractError("not a lifted formulation")
    vals = inst.values(x)
    get = lambda sym, ids: {k: vals[(sym, k)] for k in ids} if ids and (sym, ids[0]) in vals else None  # noqa: E731
    br_ids = [br.id for br in net.branches]
    d_ids = [d.id for d in net.loads]
    g_ids = [g.id for g in net.generators]
    disp = get("S_disp", g_ids)
    return LiftedPoint(
        W={b.id: vals[("W", b.id)] for b in net.buses},
        L=get("L", br_ids) or {},
        Sbar_from=get("Sbar_lij", br_ids) or {},
        Sbar_to=get("Sbar_lji", br_ids) or {},
        Sbar_load=get("Sbar_d", d_ids),
        Sbar_gen=get("Sbar_g", g_ids),
        S_load=get("S_d", d_ids),
        S_gen=get("S_g", g_ids),
        S_disp=None if disp is None else {k: complex(v[0]) for k, v in disp.items()},
    )


# ---------------------------------------------------------------------------
# residuals
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ResidualReport:
    names: tuple[str, ...]
    senses: tuple[str, ...]
    residuals: np.ndarray = field(repr=False)
    eq_inf_norm: float
    ineq_max_violation: float
    psd_min_eigs: tuple[float, ...]

    def feasible(self, tol: float) -> bool:
        return (
            self.eq_inf_norm <= tol
            and self.ineq_max_violation <= tol
            and all(e >= -tol for e in self.psd_min_eigs)
        )

    def worst(self, k: int = 5) -> list[tuple[str, float]]:
        viol = np.where(np.array(self.senses) == EQ, np.abs(self.residuals), np.maximum(self.residuals, 0.0))
        order = np.argsort(-viol)[:k]
        return [(self.names[i], float(self.residuals[i])) for i in order]

    def by_name(self, prefix: str) -> dict[str, float]:
        return {n: float(r) for n, r in zip(self.names, self.residuals) if n.startswith(prefix)}

    def summary(self) -> dict[str, float]:
        return {
            "eq_inf_norm": self.eq_inf_norm,
            "ineq_max_violation": self.ineq_max_violation,
            "psd_min_eig": min(self.psd_min_eigs) if self.psd_min_eigs else float("nan"),
        }


def residuals(inst: ProblemInstance, x: np.ndarray) -> ResidualReport:
    x = np.asarray(x, dtype=float)
    if x.shape != (inst.n,):
        raise ContractError(f"point has length {x.shape}, registry has {inst.n} variables")
    res = np.array([c.evaluate(x) for c in inst.constraints])
    senses = tuple(c.sense for c in inst.constraints)
    eq_mask = np.array([s == EQ for s in senses], dtype=bool)
    eq_norm = float(np.max(np.abs(res[eq_mask]))) if eq_mask.any() else 0.0
    ineq_viol = float(max(0.0, np.max(res[~eq_mask]))) if (~eq_mask).any() else 0.0
    eigs = tuple(float(np.linalg.eigvalsh(b.matrix(x))[0]) for b in inst.psd_blocks)
    return ResidualReport(
        names=tuple(c.name for c in inst.constraints),
        senses=senses,
        residuals=res,
        eq_inf_norm=eq_norm,
        ineq_max_violation=ineq_viol,
        psd_min_eigs=eigs,
    )


def phase_to_neutral(volts: Mapping[str, np.ndarray], net: Network) -> dict[str, float]:
    """Magnitude of the voltage across each load."""
    return {d.id: float(abs(volts[d.bus][d.terminals[0]] - volts[d.bus][d.terminals[1]])) for d in net.loads}


def lifted_phase_to_neutral(W: Mapping[str, np.ndarray], net: Network) -> dict[str, float]:
    out = {}
    for d in net.loads:
        w = W[d.bus]
        a, n = d.terminals
        out[d.id] = float(np.sqrt(max(0.0, (w[a, a] + w[n, n] - 2 * w[a, n].real).real)))
    return out


def kinds(values: Iterable[str | FormulationKind]) -> list[FormulationKind]:
    return [FormulationKind.parse(v) for v in values]
