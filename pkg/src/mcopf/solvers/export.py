"""Text exports of compiled problems for cross-checking with other solvers.

Two formats:

``qcqp-json``
    Mirrors :class:`~mcopf.formulations.ProblemInstance` field by field.
    Floats are written with ``repr`` so that :func:`load_problem` rebuilds an
    equal instance.

``conic-text``
    Line-oriented, SWR kinds only. ``#`` starts a comment. Layout::

        nvar nblocks neq
        side index index ...              one line per PSD block
        psd b r c: const ; coeff@var ...  entries of block b, r <= c
        name: coeff@var ... = rhs         equality rows
        name: coeff@var ... <= rhs        inequality rows
        obj: coeff@var ...

    Block ``b`` requires the symmetric matrix with the listed entries to be
    PSD; ``index`` lists the variables it touches. Variables are 0-based.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any

import numpy as np

from mcopf.errors import ContractError, NetworkParseError, SchemaError
from mcopf.expr import EQ, Constraint
from mcopf.formulations import (
    SDP_KINDS,
    Block,
    FormulationKind,
    ProblemInstance,
    PsdBlock,
    Variable,
    VariableRegistry,
)
from mcopf.solvers.sdp import ConeProblem, svec

FORMATS = ("qcqp-json", "conic-text")


def _terms(pairs) -> str:
    return " ".join(f"{v!r}@{k}" for k, v in pairs)


# ---------------------------------------------------------------------------
# qcqp-json
# ---------------------------------------------------------------------------


def _instance_to_dict(inst: ProblemInstance) -> dict[str, Any]:
    return {
        "format": "qcqp-json",
        "kind": inst.kind.value,
        "network_name": inst.network_name,
        "flags": list(inst.flags),
        "variables": [
            {"name": v.name, "owner": v.owner, "symbol": v.symbol, "index": list(v.index),
             "part": v.part, "lb": v.lb, "ub": v.ub}
            for v in inst.registry
        ],
        "blocks": [
            {"symbol": b.symbol, "owner": b.owner, "structure": b.structure, "shape": list(b.shape)}
            for b in inst.registry.blocks
        ],
        "constraints": [
            {"name": c.name, "sense": c.sense, "const": c.const, "group": c.group,
             "lin": [[k, v] for k, v in c.lin], "quad": [[i, j, v] for i, j, v in c.quad]}
            for c in inst.constraints
        ],
        "psd_blocks": [
            {"name": b.name, "side": b.side, "const": [list(r) for r in b.const],
             "terms": [list(t) for t in b.terms]}
            for b in inst.psd_blocks
        ],
        "objective_p": [[k, v] for k, v in inst.objective_p],
        "objective_q": [[k, v] for k, v in inst.objective_q],
        "fixed_voltages": [
            [bus, [[z.real, z.imag] for z in u]] for bus, u in inst.fixed_voltages
        ],
    }


def _instance_from_dict(d: dict[str, Any]) -> ProblemInstance:
    try:
        registry = VariableRegistry(
            [Variable(v["name"], v["owner"], v["symbol"], tuple(v["index"]), v["part"], v["lb"], v["ub"])
             for v in d["variables"]],
            [Block(b["symbol"], b["owner"], b["structure"], tuple(b["shape"])) for b in d["blocks"]],
        )
        constraints = tuple(
            Constraint(c["name"], c["sense"], float(c["const"]),
                       tuple((int(k), float(v)) for k, v in c["lin"]),
                       tuple((int(i), int(j), float(v)) for i, j, v in c["quad"]),
                       c["group"])
            for c in d["constraints"]
        )
        psd = tuple(
            PsdBlock(b["name"], int(b["side"]), tuple(tuple(float(x) for x in r) for r in b["const"]),
                     tuple((int(v), int(r), int(c), float(k)) for v, r, c, k in b["terms"]))
            for b in d["psd_blocks"]
        )
        return ProblemInstance(
            kind=FormulationKind.parse(d["kind"]),
            registry=registry,
            constraints=constraints,
            psd_blocks=psd,
            objective_p=tuple((int(k), float(v)) for k, v in d["objective_p"]),
            objective_q=tuple((int(k), float(v)) for k, v in d["objective_q"]),
            fixed_voltages=tuple(
                (bus, tuple(complex(re, im) for re, im in u)) for bus, u in d["fixed_voltages"]
            ),
            flags=tuple(d["flags"]),
            network_name=d["network_name"],
        )
    except KeyError as e:
        raise SchemaError(str(e.args[0]), "missing field in qcqp-json") from None


def load_problem(data: str | bytes) -> ProblemInstance:
    """Rebuild a :class:`ProblemInstance` from its ``qcqp-json`` export."""
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    try:
        d = json.loads(data)
    except json.JSONDecodeError as e:
        raise NetworkParseError(e.msg, e.lineno, e.colno) from None
    if d.get("format") != "qcqp-json":
        raise SchemaError("format", "not a qcqp-json document")
    return _instance_from_dict(d)


# ---------------------------------------------------------------------------
# conic-text
# ---------------------------------------------------------------------------


def _conic_text(inst: ProblemInstance, theta: float) -> str:
    if inst.kind not in SDP_KINDS:
        raise ContractError(f"conic-text needs a conic instance (SWR kinds), got {inst.kind.label}")
    if any(c.is_quadratic for c in inst.constraints):
        raise ContractError("conic-text cannot carry quadratic rows")
    for c in inst.constraints:
        if any(ch.isspace() or ch == ":" for ch in c.name):
            raise ContractError(f"row name {c.name!r} cannot be written to conic-text")
    eqs = inst.equalities
    lines = [
        f"# {inst.kind.label} {inst.network_name} theta={theta!r}",
        f"{inst.n} {len(inst.psd_blocks)} {len(eqs)}",
    ]
    for blk in inst.psd_blocks:
        lines.append(" ".join([str(blk.side)] + [str(v) for v in sorted(blk.variables())]))
    for b, blk in enumerate(inst.psd_blocks):
        entries: dict[tuple[int, int], list[tuple[int, float]]] = {}
        for var, r, c, coef in blk.terms:
            if r <= c:
                entries.setdefault((r, c), []).append((var, coef))
        for r in range(blk.side):
            for c in range(r, blk.side):
                const = blk.const[r][c]
                terms = entries.get((r, c), [])
                if const == 0.0 and not terms:
                    continue
                lines.append(f"psd {b} {r} {c}: {const!r} ; {_terms(terms)}".rstrip())
    for c in eqs + inst.inequalities:
        op = "=" if c.sense == EQ else "<="
        lines.append(f"{c.name}: {_terms(c.lin)} {op} {-c.const!r}")
    g = inst.objective_vector(theta)
    lines.append("obj: " + _terms((k, float(v)) for k, v in enumerate(g) if v != 0.0))
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class ConicText:
    """Parsed ``conic-text`` document."""

    nvar: int
    blocks: tuple[tuple[int, tuple[int, ...]], ...]  # (side, variable indices)
    entries: tuple[tuple[int, int, int, float, tuple[tuple[int, float], ...]], ...]
    eq: tuple[tuple[str, tuple[tuple[int, float], ...], float], ...]
    ineq: tuple[tuple[str, tuple[tuple[int, float], ...], float], ...]
    objective: tuple[tuple[int, float], ...]

    def block_matrices(self, b: int) -> tuple[np.ndarray, np.ndarray]:
        """``(F0, F)`` of block ``b``, ``F[k]`` for variable ``k`` (symmetric)."""
        side = self.blocks[b][0]
        f0 = np.zeros((side, side))
        f = np.zeros((self.nvar, side, side))
        for blk, r, c, const, terms in self.entries:
            if blk != b:
                continue
            f0[r, c] = f0[c, r] = const
            for k, v in terms:
                f[k, r, c] = f[k, c, r] = v
        return f0, f

    def to_cone(self) -> ConeProblem:
        n = self.nvar

        def dense(rows):
            A = np.zeros((len(rows), n))
            for i, (_, terms, _) in enumerate(rows):
                for k, v in terms:
                    A[i, k] += v
            return A, np.array([rhs for _, _, rhs in rows])

        A, b = dense(self.eq)
        Gl, hl = dense(self.ineq)
        g_rows, h_rows = [Gl], [hl]
        for k in range(len(self.blocks)):
            f0, f = self.block_matrices(k)
            g_rows.append(-np.stack([svec(f[j]) for j in range(n)], axis=1))
            h_rows.append(svec(f0))
        c = np.zeros(n)
        for k, v in self.objective:
            c[k] += v
        return ConeProblem(c=c, A=A, b=b, G=np.vstack(g_rows), h=np.concatenate(h_rows),
                           n_lin=len(self.ineq), sides=tuple(s for s, _ in self.blocks))


def _parse_terms(text: str, where: int) -> tuple[tuple[int, float], ...]:
    out = []
    for tok in text.split():
        coef, sep, var = tok.partition("@")
        if not sep:
            raise NetworkParseError(f"expected coeff@var, got {tok!r}", where, 1)
        out.append((int(var), float(coef)))
    return tuple(out)


def read_conic_text(data: str | bytes) -> ConicText:
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    rows = [(k + 1, ln.split("#", 1)[0].strip()) for k, ln in enumerate(data.splitlines())]
    rows = [(k, ln) for k, ln in rows if ln]
    if not rows:
        raise NetworkParseError("empty conic-text document", 1, 1)
    try:
        nvar, nblocks, neq = (int(t) for t in rows[0][1].split())
    except ValueError:
        raise NetworkParseError("header must be 'nvar nblocks neq'", rows[0][0], 1) from None
    blocks = []
    for lineno, ln in rows[1 : 1 + nblocks]:
        nums = [int(t) for t in ln.split()]
        blocks.append((nums[0], tuple(nums[1:])))
    entries, eq, ineq, objective = [], [], [], ()
    for lineno, ln in rows[1 + nblocks :]:
        head, sep, body = ln.partition(":")
        if not sep:
            raise NetworkParseError(f"cannot parse line {ln!r}", lineno, 1)
        if head.startswith("psd "):
            _, b, r, c = head.split()
            const, _, terms = body.partition(";")
            entries.append((int(b), int(r), int(c), float(const), _parse_terms(terms, lineno)))
        elif head == "obj":
            objective = _parse_terms(body, lineno)
        elif "<=" in body:
            lhs, rhs = body.split("<=")
            ineq.append((head, _parse_terms(lhs, lineno), float(rhs)))
        elif "=" in body:
            lhs, rhs = body.split("=")
            eq.append((head, _parse_terms(lhs, lineno), float(rhs)))
        else:
            raise NetworkParseError(f"row without relation: {ln!r}", lineno, 1)
    if len(eq) != neq:
        raise NetworkParseError(f"header declares {neq} equalities, found {len(eq)}", rows[0][0], 1)
    return ConicText(nvar, tuple(blocks), tuple(entries), tuple(eq), tuple(ineq), objective)


# ---------------------------------------------------------------------------


def export_problem(inst: ProblemInstance, fmt: str, theta: float = 0.0) -> bytes:
    """Serialise ``inst`` as ``qcqp-json`` or ``conic-text`` (objective at ``theta``)."""
    if fmt == "qcqp-json":
        return (json.dumps(_instance_to_dict(inst), indent=1) + "\n").encode("utf-8")
    if fmt == "conic-text":
        return _conic_text(inst, theta).encode("utf-8")
    raise ContractError(f"unknown export format {fmt!r}; expected one of {', '.join(FORMATS)}")
