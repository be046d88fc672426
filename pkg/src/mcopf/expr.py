"""Degree-two polynomial expressions over registered real variables.

Complex quantities are carried as a pair of real polynomials. Multiplying
two expressions whose degrees add up to more than two raises
:class:`UnsupportedExpressionError`, which keeps every constraint a QCQP row.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from mcopf.errors import UnsupportedExpressionError


class RPoly:
    """Real polynomial ``const + sum a_i x_i + sum_{i<=j} q_ij x_i x_j``."""

    __slots__ = ("const", "lin", "quad")

    def __init__(self, const: float = 0.0, lin=None, quad=None):
        self.const = float(const)
        self.lin: dict[int, float] = dict(lin) if lin else {}
        self.quad: dict[tuple[int, int], float] = dict(quad) if quad else {}

    @classmethod
    def var(cls, idx: int) -> "RPoly":
        return cls(0.0, {idx: 1.0})

    @property
    def degree(self) -> int:
        if self.quad:
            return 2
        if self.lin:
            return 1
        return 0

    def copy(self) -> "RPoly":
        return RPoly(self.const, self.lin, self.quad)

    def _acc(self, other: "RPoly", sign: float) -> "RPoly":
        out = self.copy()
        out.const += sign * other.const
        for k, v in other.lin.items():
            out.lin[k] = out.lin.get(k, 0.0) + sign * v
        for k, v in other.quad.items():
            out.quad[k] = out.quad.get(k, 0.0) + sign * v
        return out

    def __add__(self, other):
        if not isinstance(other, RPoly):
            other = RPoly(other)
        return self._acc(other, 1.0)

    __radd__ = __add__

    def __sub__(self, other):
        if not isinstance(other, RPoly):
            other = RPoly(other)
        return self._acc(other, -1.0)

    def __rsub__(self, other):
        return RPoly(other)._acc(self, -1.0)

    def __neg__(self):
        return self.scale(-1.0)

    def scale(self, a: float) -> "RPoly":
        a = float(a)
        return RPoly(
            self.const * a,
            {k: v * a for k, v in self.lin.items()},
            {k: v * a for k, v in self.quad.items()},
        )

    def __mul__(self, other):
        if not isinstance(other, RPoly):
            return self.scale(other)
        if self.degree + other.degree > 2:
            raise UnsupportedExpressionError(
                f"product of degree {self.degree} and {other.degree} terms"
            )
        out = RPoly(self.const * other.const)
        for k, v in self.lin.items():
            out.lin[k] = out.lin.get(k, 0.0) + v * other.const
        for k, v in other.lin.items():
            out.lin[k] = out.lin.get(k, 0.0) + v * self.const
        for k, v in self.quad.items():
            out.quad[k] = out.quad.get(k, 0.0) + v * other.const
        for k, v in other.quad.items():
            out.quad[k] = out.quad.get(k, 0.0) + v * self.const
        for i, a in self.lin.items():
            for j, b in other.lin.items():
                key = (i, j) if i <= j else (j, i)
                out.quad[key] = out.quad.get(key, 0.0) + a * b
        return out

    __rmul__ = __mul__

    def pruned(self) -> "RPoly":
        """Drop exactly-zero coefficients."""
        return RPoly(
            self.const,
            {k: v for k, v in self.lin.items() if v != 0.0},
            {k: v for k, v in self.quad.items() if v != 0.0},
        )

    def is_zero(self) -> bool:
        p = self.pruned()
        return p.const == 0.0 and not p.lin and not p.quad

    def evaluate(self, x: np.ndarray) -> float:
        val = self.const
        for k, v in self.lin.items():
            val += v * x[k]
        for (i, j), v in self.quad.items():
            val += v * x[i] * x[j]
        return float(val)

    def variables(self) -> set[int]:
        out = set(self.lin)
        for i, j in self.quad:
            out.update((i, j))
        return out

    def __repr__(self) -> str:
        return f"RPoly({self.const!r}, lin={self.lin!r}, quad={self.quad!r})"


class CExpr:
    """Complex expression ``re + j*im`` with real polynomial parts."""

    __slots__ = ("re", "im")

    def __init__(self, re: RPoly | float = 0.0, im: RPoly | float = 0.0):
        self.re = re if isinstance(re, RPoly) else RPoly(re)
        self.im = im if isinstance(im, RPoly) else RPoly(im)

    @classmethod
    def const(cls, z: complex) -> "CExpr":
        z = complex(z)
        return cls(RPoly(z.real), RPoly(z.imag))

    @classmethod
    def var(cls, re_idx: int, im_idx: int | None) -> "CExpr":
        im = RPoly.var(im_idx) if im_idx is not None else RPoly()
        return cls(RPoly.var(re_idx), im)

    @staticmethod
    def _lift(other) -> "CExpr":
        if isinstance(other, CExpr):
            return other
        if isinstance(other, RPoly):
            return CExpr(other, RPoly())
        return CExpr.const(other)

    @property
    def degree(self) -> int:
        return max(self.re.degree, self.im.degree)

    def conj(self) -> "CExpr":
        return CExpr(self.re, -self.im)

    def __add__(self, other):
        other = self._lift(other)
        return CExpr(self.re + other.re, self.im + other.im)

    __radd__ = __add__

    def __sub__(self, other):
        other = self._lift(other)
        return CExpr(self.re - other.re, self.im - other.im)

    def __rsub__(self, other):
        return self._lift(other) - self

    def __neg__(self):
        return CExpr(-self.re, -self.im)

    def __mul__(self, other):
        if isinstance(other, (int, float, complex, np.number)):
            z = complex(other)
            return CExpr(
                self.re.scale(z.real) - self.im.scale(z.imag),
                self.re.scale(z.imag) + self.im.scale(z.real),
            )
        other = self._lift(other)
        return CExpr(
            self.re * other.re - self.im * other.im,
            self.re * other.im + self.im * other.re,
        )

    __rmul__ = __mul__

    def evaluate(self, x: np.ndarray) -> complex:
        return complex(self.re.evaluate(x), self.im.evaluate(x))

    def __repr__(self) -> str:
        return f"CExpr(re={self.re!r}, im={self.im!r})"


ZERO = CExpr()


def csum(terms: Iterable[CExpr]) -> CExpr:
    out = CExpr()
    for t in terms:
        out = out + t
    return out


# ---------------------------------------------------------------------------
# constraint rows
# ---------------------------------------------------------------------------

EQ = "=="
LE = "<="


@dataclass(frozen=True)
class Constraint:
    """Real row ``x' Q x + a' x + const  (== | <=)  0``.

    ``quad`` holds upper-triangle monomials ``(i, j, q)`` with ``i <= j`` so
    that the term is ``q * x_i * x_j``.
    """

    name: str
    sense: str
    const: float
    lin: tuple[tuple[int, float], ...] = ()
    quad: tuple[tuple[int, int, float], ...] = ()
    group: str = field(default="", compare=True)

    @classmethod
    def from_poly(cls, name: str, poly: RPoly, sense: str = EQ, group: str = "") -> "Constraint":
        p = poly.pruned()
        return cls(
            name=name,
            sense=sense,
            const=p.const,
            lin=tuple(sorted(p.lin.items())),
            quad=tuple((i, j, v) for (i, j), v in sorted(p.quad.items())),
            group=group,
        )

    @property
    def is_quadratic(self) -> bool:
        return bool(self.quad)

    @property
    def removable(self) -> bool:
        """True for the trivial row ``0 == 0`` (or ``0 <= 0``)."""
        return not self.lin and not self.quad and self.const == 0.0

    def poly(self) -> RPoly:
        return RPoly(self.const, dict(self.lin), {(i, j): v for i, j, v in self.quad})

    def evaluate(self, x: np.ndarray) -> float:
        val = self.const
        for k, v in self.lin:
            val += v * x[k]
        for i, j, v in self.quad:
            val += v * x[i] * x[j]
        return float(val)

    def variables(self) -> set[int]:
        out = {k for k, _ in self.lin}
        for i, j, _ in self.quad:
            out.update((i, j))
        return out


def realify(name: str, lhs: CExpr, rhs: CExpr | complex = 0.0, group: str = "") -> list[Constraint]:
    """Expand the complex equality ``lhs == rhs`` into its real and imaginary rows.

    Always returns two rows; an identically-zero part is kept but reports
    ``removable``.
    """
    diff = lhs - rhs
    if diff.degree > 2:
        raise UnsupportedExpressionError("complex equality of degree > 2")
    return [
        Constraint.from_poly(f"{name}.re", diff.re, EQ, group),
        Constraint.from_poly(f"{name}.im", diff.im, EQ, group),
    ]


def evaluate_all(exprs: Mapping[str, CExpr], x: np.ndarray) -> dict[str, complex]:
    return {k: e.evaluate(x) for k, e in exprs.items()}
