"""Command-line front end.

Exit codes: 0 success, 1 solve failure or failed check, 2 bad input.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path
from typing import Any, Sequence
from xml.sax.saxutils import escape

import numpy as np

from mcopf import analysis, regression
from mcopf.errors import McopfError
from mcopf.formulations import (
    FormulationKind,
    build_formulation,
    lifted_from_solution,
    lifted_phase_to_neutral,
    phase_to_neutral,
    point_from_dict,
    point_from_solution,
    point_to_dict,
)
from mcopf.netmodel import Network, bundled_case, load_network, validate_network
from mcopf.solvers import FORMATS, SolverOptions, export_problem, solve, solve_power_flow_newton

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2

log = logging.getLogger("mcopf")


class InputError(Exception):
    """Bad command-line input; maps to exit code 2."""


def _kind(text: str) -> FormulationKind:
    try:
        return FormulationKind.parse(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from None


def _kind_list(text: str) -> list[FormulationKind]:
    return [_kind(t) for t in text.split(",") if t.strip()]


def _json_safe(v: Any) -> Any:
    if isinstance(v, float):
        return v if math.isfinite(v) else None
    if isinstance(v, complex):
        return {"re": _json_safe(v.real), "im": _json_safe(v.imag)}
    if isinstance(v, dict):
        return {str(k): _json_safe(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_json_safe(x) for x in v]
    if isinstance(v, np.generic):
        return _json_safe(v.item())
    return v


def _dump(doc: dict) -> str:
    return json.dumps(_json_safe(doc), indent=2, allow_nan=False)


def _network(args) -> Network:
    if args.network is None:
        return bundled_case()
    path = Path(args.network)
    if not path.is_file():
        raise InputError(f"network file not found: {path}")
    net = load_network(path)
    report = validate_network(net)
    if not report.ok:
        raise InputError("network failed validation: " + "; ".join(map(str, report)))
    return net


def _options(args) -> SolverOptions:
    if args.tol is not None and args.command != "check":
        return SolverOptions(feas_tol=args.tol, opt_tol=args.tol, seed=args.seed)
    return SolverOptions(seed=args.seed)


def _write(path: str | None, text: str) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


# ---------------------------------------------------------------------------
# solve
# ---------------------------------------------------------------------------


def cmd_solve(args) -> int:
    net = _network(args)
    kind = args.formulation or FormulationKind.IVR
    inst = build_formulation(net, kind)
    res = solve(inst, args.theta, _options(args))

    if kind.is_lifted:
        lp = lifted_from_solution(inst, res.x, net)
        mags = {b: np.sqrt(np.clip(np.diag(w).real, 0.0, None)) for b, w in lp.W.items()}
        ptn = lifted_phase_to_neutral(lp.W, net)
        point = None
    else:
        point = point_from_solution(inst, res.x, net)
        mags = {b: np.abs(u) for b, u in point.voltages.items()}
        ptn = phase_to_neutral(point.voltages, net)

    try:
        exact = solve_power_flow_newton(net)
        p_exact = sum(exact.dispatch(net).values()).real
        gap = analysis.relaxation_gap(p_exact, res.total_dispatch.real)
    except McopfError as e:
        log.info("no exact reference for the gap: %s", e)
        gap = math.nan

    doc = {
        "formulation": kind.value,
        "theta": args.theta,
        "status": res.status.value,
        "objective": res.objective,
        "dispatch": {g: {"P": s.real, "Q": s.imag} for g, s in res.dispatch.items()},
        "voltage_magnitudes": {b: list(map(float, m)) for b, m in mags.items()},
        "phase_to_neutral": ptn,
        "residuals": res.report.summary() if res.report else {},
        "iterations": res.iterations,
        "gap_vs_ivr": gap,
    }
    if res.metadata.get("local_solutions"):
        doc["local_solutions"] = [
            {"objective": s["objective"], "count": s["count"]} for s in res.metadata["local_solutions"]
        ]
    if args.json:
        print(_dump(doc))
    else:
        print(f"formulation  {kind.label}  theta={args.theta:g}")
        print(f"status       {res.status.value}  ({res.iterations} iterations)")
        print(f"objective    {res.objective:.6f}")
        for g, s in res.dispatch.items():
            print(f"S_g[{g}]      {s.real:.6f} {'+' if s.imag >= 0 else '-'} j{abs(s.imag):.6f}")
        for b, m in mags.items():
            print(f"|U[{b}]|       " + " ".join(f"{v:.6f}" for v in m))
        for d, v in ptn.items():
            print(f"|U_pn[{d}]|    {v:.6f}")
        summ = doc["residuals"]
        if summ:
            print("residuals    " + " ".join(f"{k}={v:.2e}" for k, v in summ.items()))
        print(f"gap vs IVR   {gap:.4f} %")
    if args.out:
        if point is None:
            print("note: lifted solutions have no circuit point; --out ignored", file=sys.stderr)
        else:
            Path(args.out).write_text(json.dumps(point_to_dict(point), indent=1) + "\n")
    return EXIT_OK if res.ok else EXIT_FAIL


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

_COLOURS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def sweep_svg(reports: Sequence[analysis.SweepReport], width: int = 800, height: int = 600) -> str:
    """Scatter of optimal (P, Q) samples with one closed polyline per formulation."""
    pts = np.vstack([r.pq() for r in reports if len(r.pq())] or [np.zeros((1, 2))])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = np.where(hi - lo > 1e-9, hi - lo, 1.0)
    lo, span = lo - 0.05 * span, 1.1 * span
    left, right, top, bottom = 70, 20, 20, 60

    def xy(p, q):
        x = left + (p - lo[0]) / span[0] * (width - left - right)
        y = height - bottom - (q - lo[1]) / span[1] * (height - top - bottom)
        return x, y

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{left}" y1="{height - bottom}" x2="{width - right}" y2="{height - bottom}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{height - bottom}" stroke="black"/>',
        f'<text x="{(width + left) / 2}" y="{height - 15}" text-anchor="middle">P (pu)</text>',
        f'<text x="20" y="{(height - bottom) / 2}" text-anchor="middle" transform="rotate(-90 20 {(height - bottom) / 2})">Q (pu)</text>',
    ]
    for k, (lab, val) in enumerate(((f"{lo[0]:.4f}", lo[0]), (f"{lo[0] + span[0]:.4f}", lo[0] + span[0]))):
        x, _ = xy(val, lo[1])
        out.append(f'<text x="{x:.1f}" y="{height - bottom + 18}" text-anchor="middle" font-size="11">{lab}</text>')
    for lab, val in ((f"{lo[1]:.4f}", lo[1]), (f"{lo[1] + span[1]:.4f}", lo[1] + span[1])):
        _, y = xy(lo[0], val)
        out.append(f'<text x="{left - 5}" y="{y:.1f}" text-anchor="end" font-size="11">{lab}</text>')
    for k, rep in enumerate(reports):
        colour = _COLOURS[k % len(_COLOURS)]
        pq = rep.pq()
        coords = [xy(p, q) for p, q in pq]
        if coords:
            poly = " ".join(f"{x:.2f},{y:.2f}" for x, y in coords + coords[:1])
            out.append(f'<polyline class="boundary" points="{poly}" fill="none" stroke="{colour}" stroke-width="1"/>')
        for x, y in coords:
            out.append(f'<circle class="marker" cx="{x:.2f}" cy="{y:.2f}" r="3" fill="{colour}"/>')
        out.append(f'<text x="{width - right - 5}" y="{top + 15 * (k + 1)}" text-anchor="end" fill="{colour}">'
                   f"{escape(rep.kind.label)}</text>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def cmd_sweep(args) -> int:
    if args.samples < analysis.MIN_SAMPLES:
        raise InputError(f"--samples must be at least {analysis.MIN_SAMPLES}")
    net = _network(args)
    kinds = args.formulation_list or [FormulationKind.SWR2]
    opts = _options(args)
    reports = [analysis.sweep_objective(net, k, args.samples, opts, workers=args.workers) for k in kinds]
    if args.json:
        doc = {
            r.kind.value: [{"theta": s.theta, "status": s.status.value, "P": s.P, "Q": s.Q} for s in r.samples]
            for r in reports
        }
        text = _dump(doc) + "\n"
        _write(args.out, text)
    elif len(reports) == 1 or args.out is None:
        _write(args.out, "".join(r.to_csv() for r in reports))
    else:
        out = Path(args.out)
        for r in reports:
            out.with_name(f"{out.stem}_{r.kind.value}{out.suffix}").write_text(r.to_csv())
    if args.svg:
        Path(args.svg).write_text(sweep_svg(reports))
    failed = sum(len(r) - len(r.optimal()) for r in reports)
    if failed:
        print(f"{failed} sample(s) did not reach optimality", file=sys.stderr)
    return EXIT_OK if failed == 0 else EXIT_FAIL


# ---------------------------------------------------------------------------
# check / export / paper
# ---------------------------------------------------------------------------


def cmd_check(args) -> int:
    net = _network(args)
    path = Path(args.solution)
    try:
        point = point_from_dict(json.loads(path.read_text()))
        point.check(net)
    except (OSError, ValueError, McopfError) as e:
        raise InputError(f"cannot read solution {path}: {e}") from None
    tol = args.tol if args.tol is not None else 1e-6
    kinds = args.formulation_list or list(FormulationKind)
    fm = analysis.feasibility_matrix({path.stem: point}, net, kinds, tol)
    if args.json:
        print(_dump(fm.to_dict()))
    else:
        print(f"feasibility at tol {tol:g}")
        print(fm.format())
    return EXIT_OK


def cmd_export(args) -> int:
    net = _network(args)
    kind = args.formulation or FormulationKind.SWR2
    inst = build_formulation(net, kind)
    data = export_problem(inst, args.format, args.theta)
    if args.out:
        Path(args.out).write_bytes(data)
        if args.json:
            print(_dump({"formulation": kind.value, "format": args.format, "path": args.out, "bytes": len(data)}))
    elif args.json:
        print(_dump({"formulation": kind.value, "format": args.format, "content": data.decode("utf-8")}))
    else:
        sys.stdout.write(data.decode("utf-8"))
    return EXIT_OK


def cmd_paper(args) -> int:
    ctx = regression.make_context(args.perturb_z, args.seed, _network(args) if args.network else None)
    checks = [regression.run_check(fn, ctx) for fn in regression.CHECKS]
    ok = all(c.passed for c in checks)
    if args.json:
        print(_dump({
            "passed": ok,
            "checks": [
                {"number": c.number, "title": c.title, "passed": c.passed, "error": c.error,
                 "items": [{"label": i.label, "observed": i.observed, "expected": i.expected,
                            "tol": i.tol, "relation": i.relation, "passed": i.passed} for i in c.items]}
                for c in checks
            ],
        }))
    else:
        print(regression.format_table(checks))
        print(f"{sum(c.passed for c in checks)}/{len(checks)} checks passed")
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--network", help="network JSON file (default: bundled two-bus case)")
    shared.add_argument("--theta", type=float, default=0.0, help="objective angle in radians")
    shared.add_argument("--samples", type=int, default=64, help="sweep samples (>= 4)")
    shared.add_argument("--tol", type=float, default=None, help="solver tolerance; feasibility tolerance for check")
    shared.add_argument("--seed", type=int, default=42, help="random seed for multistart")
    shared.add_argument("--json", action="store_true", help="machine-readable output")
    shared.add_argument("--out", help="output file")
    shared.add_argument("--svg", help="sweep: also write a (P, Q) scatter")
    shared.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mcopf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", parents=[shared], help="solve one instance")
    p.add_argument("--formulation", type=_kind, help="ivr | svr1 | svr2 | swr1 | swr2 (default ivr)")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("sweep", parents=[shared], help="objective-angle sweep")
    p.add_argument("--formulation", dest="formulation_list", type=_kind_list,
                   help="comma-separated kinds (default swr2)")
    p.add_argument("--workers", type=int, default=1, help="parallel sample solves")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("check", parents=[shared], help="feasibility of a circuit point in every formulation")
    p.add_argument("solution", help="circuit point JSON (as written by solve --out)")
    p.add_argument("--formulation", dest="formulation_list", type=_kind_list,
                   help="comma-separated kinds (default all)")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("export", parents=[shared], help="write a compiled problem as text")
    p.add_argument("--formulation", type=_kind, help="default swr2")
    p.add_argument("--format", choices=FORMATS, default="qcqp-json")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("paper", parents=[shared], help="run the reference-case regression checks")
    p.add_argument("--perturb-z", type=float, default=0.0, help="scale every impedance by 1 + value")
    p.set_defaults(func=cmd_paper)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InputError, McopfError) as e:
        print(f"mcopf {args.command}: error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
