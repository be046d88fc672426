import numpy as np
import pytest

import oracles
from mcopf.errors import ContractError
from mcopf.formulations import FormulationKind as K, build_formulation
from mcopf.solvers import SolverOptions, Status, solve_sdp
from mcopf.solvers.sdp import dual_residual, smat, svec, to_cone

P_IVR, P_SVR1 = 1.147226, 1.071996
THETAS = np.linspace(0, 2 * np.pi, 8, endpoint=False)


def _obj(theta, s):
    return np.cos(theta) * s.real + np.sin(theta) * s.imag


def test_swr2_zero_gap(ctx):
    res = ctx.result(K.SWR2)
    assert res.ok
    assert res.total_dispatch.real == pytest.approx(P_IVR, abs=1e-3)


def test_swr1_matches_svr1(ctx):
    res = ctx.result(K.SWR1)
    assert res.ok
    assert res.total_dispatch.real == pytest.approx(P_SVR1, abs=1e-3)


@pytest.mark.parametrize("theta", THETAS)
@pytest.mark.parametrize("kind,flags", [(K.SWR1, (False, False)), (K.SWR2, (True, True))])
def test_against_clarabel(net, kind, flags, theta):
    res = solve_sdp(build_formulation(net, kind), theta)
    status, s_g = oracles.cvxpy_swr(theta, *flags)
    assert status.startswith("optimal")
    assert res.objective == pytest.approx(_obj(theta, s_g), abs=1e-5)


@pytest.mark.parametrize("flags", [dict(matrix_kcl=True), dict(row_sums=True)])
def test_ablations_against_clarabel(net, flags):
    res = solve_sdp(build_formulation(net, K.SWR1, **flags), 0.0)
    _, s_g = oracles.cvxpy_swr(0.0, flags.get("matrix_kcl", False), flags.get("row_sums", False))
    assert res.ok
    assert res.total_dispatch.real == pytest.approx(s_g.real, abs=1e-5)
    assert res.total_dispatch.real < P_IVR * 0.99


def test_optimal_result_invariants(ctx):
    opts = SolverOptions()
    for kind in (K.SWR1, K.SWR2):
        inst, res = ctx.inst(kind), ctx.result(kind)
        assert res.report.eq_inf_norm <= opts.feas_tol
        for blk in inst.psd_blocks:
            assert np.linalg.eigvalsh(blk.matrix(res.x)).min() >= -opts.feas_tol
        assert np.abs(dual_residual(inst, res)).max() <= 1e-6


def test_complementarity(ctx):
    for kind in (K.SWR1, K.SWR2):
        inst, res = ctx.inst(kind), ctx.result(kind)
        for blk, zm in zip(inst.psd_blocks, res.psd_duals):
            assert abs(np.trace(blk.matrix(res.x) @ zm)) <= 1e-6


def test_deterministic(net):
    inst = build_formulation(net, K.SWR1)
    a, b = solve_sdp(inst, 1.0), solve_sdp(inst, 1.0)
    assert np.array_equal(a.x, b.x)


def test_nlp_kinds_rejected(net):
    with pytest.raises(ContractError):
        solve_sdp(build_formulation(net, K.SVR1))


def _tight(net):
    return net.with_bus_bounds("j", u_min=[0.0, 0.0], u_max=[0.1, 0.1])


def test_contradictory_bounds_no_circuit_point():
    # oracle side: nothing inside the voltage box solves the exact circuit
    g = np.linspace(-0.1, 0.1, 21)
    a, b, c, d = (m.ravel() for m in np.meshgrid(g, g, g, g, indexing="ij"))
    ua, un = a + 1j * b, c + 1j * d
    keep = np.abs(ua - un) > 1e-9
    ua, un = ua[keep], un[keep]
    i_a = np.conj(oracles.S_REF / (ua - un))
    u = np.stack([ua, un])
    r = np.abs(u - oracles.U_I[:, None] + oracles.Z @ np.stack([i_a, -i_a])).max(axis=0)
    assert r.min() > 0.4


def test_contradictory_bounds_swr2_infeasible(net):
    res = solve_sdp(build_formulation(_tight(net), K.SWR2))
    assert res.status is Status.INFEASIBLE
    assert res.metadata["certificate"] is not None
    status, _ = oracles.cvxpy_swr(0.0, True, True, u_min=(0.0, 0.0), u_max=(0.1, 0.1))
    assert status == "infeasible"


def test_contradictory_bounds_swr1_still_relaxed(net):
    # the weaker relaxation keeps points the circuit cannot reach
    res = solve_sdp(build_formulation(_tight(net), K.SWR1))
    _, s_g = oracles.cvxpy_swr(0.0, u_min=(0.0, 0.0), u_max=(0.1, 0.1))
    assert res.ok
    assert res.objective == pytest.approx(s_g.real, abs=1e-4)


def test_svec_roundtrip():
    rng = np.random.default_rng(0)
    m = rng.normal(size=(5, 5))
    m = m + m.T
    assert np.allclose(smat(svec(m), 5), m)
    n = rng.normal(size=(5, 5))
    n = n + n.T
    assert svec(m) @ svec(n) == pytest.approx(np.trace(m @ n))


def test_cone_dimensions(ctx):
    cp = to_cone(ctx.inst(K.SWR2))
    assert cp.sides == (8,)
    assert cp.G.shape[0] == cp.n_lin + 8 * 9 // 2
