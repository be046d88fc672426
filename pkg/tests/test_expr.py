import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcopf.errors import UnsupportedExpressionError
from mcopf.expr import CExpr, RPoly, csum, realify

finite = st.floats(-10, 10, allow_nan=False)


def test_degree_three_rejected():
    x = RPoly.var(0)
    with pytest.raises(UnsupportedExpressionError):
        _ = x * x * x
    u = CExpr.var(0, 1)
    with pytest.raises(UnsupportedExpressionError):
        _ = u * u.conj() * u


def test_zero_equality_gives_two_removable_rows():
    rows = realify("zero", CExpr(), 0.0)
    assert [r.name for r in rows] == ["zero.re", "zero.im"]
    assert all(r.removable for r in rows)


def test_ohm_rows_from_table_data():
    # U_j = U_i - Z I with U_i fixed: two conductors give four real rows
    z = np.array([[0.05 + 0.04j, 0.005 + 0.02j], [0.005 + 0.02j, 0.05 + 0.04j]])
    u = [CExpr.var(0, 1), CExpr.var(2, 3)]
    cur = [CExpr.var(4, 5), CExpr.var(6, 7)]
    ui = [1.0, 0.0]
    rows = []
    for a in range(2):
        rhs = CExpr.const(ui[a]) - csum(CExpr.const(z[a, b]) * cur[b] for b in range(2))
        rows += realify(f"ohm{a}", u[a], rhs)
    assert len(rows) == 4
    assert not any(r.is_quadratic for r in rows)
    x = np.random.default_rng(0).normal(size=8)
    uc = x[[0, 2]] + 1j * x[[1, 3]]
    ic = x[[4, 6]] + 1j * x[[5, 7]]
    res = uc - (np.array(ui) - z @ ic)
    got = np.array([r.evaluate(x) for r in rows])
    assert np.allclose(got, np.ravel(np.column_stack([res.real, res.imag])), atol=1e-14)


@given(st.lists(finite, min_size=6, max_size=6))
@settings(max_examples=200)
def test_power_product_round_trip(vals):
    # S = U conj(I) against direct complex arithmetic
    x = np.array(vals)
    u, i, s = CExpr.var(0, 1), CExpr.var(2, 3), CExpr.var(4, 5)
    rows = realify("p", s, u * i.conj())
    direct = complex(x[4], x[5]) - complex(x[0], x[1]) * np.conj(complex(x[2], x[3]))
    assert abs(rows[0].evaluate(x) - direct.real) <= 1e-14 * max(1.0, abs(direct)) * 10
    assert abs(rows[1].evaluate(x) - direct.imag) <= 1e-14 * max(1.0, abs(direct)) * 10


@given(st.lists(finite, min_size=4, max_size=4), finite, finite)
@settings(max_examples=200)
def test_cexpr_algebra_matches_complex(vals, cr, ci):
    x = np.array(vals)
    a, b = CExpr.var(0, 1), CExpr.var(2, 3)
    k = complex(cr, ci)
    za, zb = complex(x[0], x[1]), complex(x[2], x[3])
    cases = [
        (a + b, za + zb),
        (a - b, za - zb),
        (CExpr.const(k) * a, k * za),
        (a * b, za * zb),
        (a.conj() * b, np.conj(za) * zb),
        (-a + k, -za + k),
    ]
    for expr, want in cases:
        assert abs(expr.evaluate(x) - want) <= 1e-12 * max(1.0, abs(want))


def test_rpoly_evaluate_and_variables():
    p = RPoly(1.0, {0: 2.0}, {(0, 1): 3.0})
    assert p.evaluate(np.array([1.0, 2.0])) == pytest.approx(1 + 2 + 6)
    assert p.variables() == {0, 1}
    assert p.degree == 2
