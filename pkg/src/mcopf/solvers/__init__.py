"""Solvers for compiled instances plus the Newton circuit oracle."""

from __future__ import annotations

from mcopf.formulations import SDP_KINDS, ProblemInstance
from mcopf.solvers.common import SolveResult, SolverOptions, Status
from mcopf.solvers.export import FORMATS, export_problem, load_problem
from mcopf.solvers.newton import solve_power_flow_newton
from mcopf.solvers.nlp import solve_nlp
from mcopf.solvers.sdp import solve_sdp

__all__ = [
    "FORMATS",
    "SolveResult",
    "SolverOptions",
    "Status",
    "export_problem",
    "load_problem",
    "solve",
    "solve_nlp",
    "solve_power_flow_newton",
    "solve_sdp",
]


def solve(inst: ProblemInstance, theta: float = 0.0, opts: SolverOptions | None = None) -> SolveResult:
    """Route to the conic or the nonlinear solver according to ``inst.kind``."""
    if inst.kind in SDP_KINDS:
        return solve_sdp(inst, theta, opts)
    return solve_nlp(inst, theta, opts)
