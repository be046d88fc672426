import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from mcopf.errors import ContractError
from mcopf.formulations import FormulationKind as K, build_formulation, point_from_solution
from mcopf.regression import fd_stationarity
from mcopf.solvers import SolverOptions, Status, solve_nlp, solve_power_flow_newton, solve_sdp
from mcopf.solvers.nlp import CLUSTER_RADIUS, stationarity

P_IVR, Q_IVR = 1.147226, 0.565434


def test_ivr_reference(ctx):
    res = ctx.result(K.IVR)
    assert res.ok
    assert res.total_dispatch.real == pytest.approx(P_IVR, abs=1e-4)
    assert len(res.metadata["local_solutions"]) == 1
    assert res.metadata["local_solutions"][0]["count"] == 8


def test_svr2_two_local_solutions(ctx, net):
    res = ctx.result(K.SVR2)
    sols = sorted(res.metadata["local_solutions"], key=lambda s: s["objective"])
    assert len(sols) == 2
    assert sols[0]["objective"] == pytest.approx(1.076921, abs=1e-4)
    assert sols[1]["objective"] == pytest.approx(P_IVR, abs=1e-4)
    inst = ctx.inst(K.SVR2)
    low = point_from_solution(inst, sols[0]["x"], net)
    assert abs(low.voltages["j"][1]) < 1e-6
    assert np.linalg.norm(sols[0]["x"] - sols[1]["x"]) > CLUSTER_RADIUS


def test_svr2_spurious_matches_grounded_circuit(ctx, net):
    u_a, s_g = oracles.grounded_circuit()
    sols = sorted(ctx.result(K.SVR2).metadata["local_solutions"], key=lambda s: s["objective"])
    p = point_from_solution(ctx.inst(K.SVR2), sols[0]["x"], net)
    assert abs(p.voltages["j"][0] - u_a) < 1e-6
    assert abs(ctx.inst(K.SVR2).dispatch(sols[0]["x"])["g"] - s_g) < 1e-6


def test_svr1_reference(ctx, net):
    res = ctx.result(K.SVR1)
    assert res.ok
    assert res.total_dispatch.real == pytest.approx(1.071996, abs=1e-4)
    u = point_from_solution(ctx.inst(K.SVR1), res.x, net).voltages["j"]
    assert abs(u[0] - (0.926241 - 0.013080j)) < 1e-4
    assert abs(u[1] - (-0.007515 - 0.016886j)) < 1e-4


def test_newton_and_nlp_agree(ctx, net):
    p = point_from_solution(ctx.inst(K.IVR), ctx.result(K.IVR).x, net)
    q = solve_power_flow_newton(net)
    assert np.max(np.abs(p.voltages["j"] - q.voltages["j"])) < 1e-5


@pytest.mark.parametrize("kind", [K.IVR, K.SVR1, K.SVR2])
def test_kkt_against_finite_differences(ctx, kind):
    res = ctx.result(kind)
    inst = ctx.inst(kind)
    assert res.ok
    assert np.max(np.abs(stationarity(inst, res))) <= 1e-6
    assert fd_stationarity(inst, res) <= 1e-4
    assert np.all(res.z >= 0)


@pytest.mark.parametrize("kind", [K.IVR, K.SVR1, K.SVR2])
def test_optimal_meets_tolerance(ctx, kind):
    res = ctx.result(kind)
    assert res.report.eq_inf_norm <= SolverOptions().feas_tol
    assert res.report.ineq_max_violation <= SolverOptions().feas_tol


def test_deterministic(net):
    inst = build_formulation(net, K.SVR2)
    a = solve_nlp(inst, 0.3, SolverOptions(seed=5))
    b = solve_nlp(inst, 0.3, SolverOptions(seed=5))
    assert np.array_equal(a.x, b.x)
    assert a.objective == b.objective


def test_rejects_sdp_kind(net):
    with pytest.raises(ContractError):
        solve_nlp(build_formulation(net, K.SWR1))


def test_infeasible_bounds_detected(net):
    bad = net.with_bus_bounds("j", u_min=[0.0, 0.0], u_max=[0.1, 0.1])
    res = solve_nlp(build_formulation(bad, K.IVR))
    assert res.status == Status.INFEASIBLE
    assert len(res.metadata["starts"]) == 8


@given(st.floats(0.0, 2 * np.pi))
@settings(max_examples=10, deadline=None)
def test_ivr_objective_is_unique_point(net, theta):
    res = solve_nlp(build_formulation(net, K.IVR), theta)
    assert res.ok
    assert res.objective == pytest.approx(np.cos(theta) * P_IVR + np.sin(theta) * Q_IVR, abs=1e-5)


@pytest.mark.parametrize("theta", np.linspace(0, 2 * np.pi, 6, endpoint=False))
def test_sdp_lower_bounds_nlp(net, theta):
    pairs = ((K.SWR2, K.IVR, (True, True)), (K.SWR1, K.SVR1, (False, False)),
             (K.SWR1, K.SVR2, (False, False)))
    for relaxed, exact, flags in pairs:
        r = solve_sdp(build_formulation(net, relaxed), theta)
        e = solve_nlp(build_formulation(net, exact), theta)
        assert e.ok
        if not r.ok:
            # SWR-2 dual optimum is not attained at some angles; the best
            # iterate must then agree with an independent conic solve
            assert relaxed is K.SWR2 and r.status is Status.NUMERICAL
            _, s_g = oracles.cvxpy_swr(theta, *flags)
            ref = np.cos(theta) * s_g.real + np.sin(theta) * s_g.imag
            assert r.objective == pytest.approx(ref, abs=1e-5)
        assert r.objective <= e.objective + 1e-6
