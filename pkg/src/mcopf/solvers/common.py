from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from mcopf.formulations import ResidualReport


class Status(str, enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible-detected"
    MAX_ITER = "max-iterations"
    NUMERICAL = "numerical-failure"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class SolverOptions:
    feas_tol: float = 1e-8
    opt_tol: float = 1e-8
    max_iter: int = 200
    multistart: int = 8
    init: str = "flat"
    seed: int = 42
    perturbation: float = 0.1

    def __post_init__(self):
        if self.feas_tol <= 0 or self.opt_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_iter < 1 or self.multistart < 1:
            raise ValueError("max_iter and multistart must be >= 1")
        if self.init not in ("flat", "zero"):
            raise ValueError(f"unknown initialization {self.init!r}")


@dataclass
class SolveResult:
    status: Status
    x: np.ndarray
    objective: float
    dispatch: dict[str, complex]
    iterations: int
    report: ResidualReport | None
    theta: float = 0.0
    y: np.ndarray | None = None  # equality multipliers
    z: np.ndarray | None = None  # inequality multipliers
    psd_duals: list[np.ndarray] = field(default_factory=list)
    metadata: dict[str, Any] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == Status.OPTIMAL

    @property
    def total_dispatch(self) -> complex:
        return complex(sum(self.dispatch.values()))
