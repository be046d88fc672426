import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from mcopf.errors import ContractError, EmbeddingError, ModelError
from mcopf.formulations import (
    FormulationKind as K,
    IvrPoint,
    build_formulation,
    embed,
    lift_point,
    point_from_dict,
    point_to_dict,
    residuals,
)
from mcopf.netmodel import Network
from mcopf.regression import projected_points
from mcopf.solvers import solve_power_flow_newton


@pytest.fixture(scope="module")
def exact(net):
    return solve_power_flow_newton(net)


@pytest.fixture(scope="module")
def insts(net):
    return {k: build_formulation(net, k) for k in K}


def test_ivr_construction_audit(insts):
    inst = insts[K.IVR]
    # hand count for two buses, one branch, one load, one generator (2 conductors each):
    # kcl 8, ohm 4, load power 4, set point 2, load current 2, gen power 4,
    # gen current 2, dispatch 2, bounds 3 (u_min = 0 on the neutral adds no row)
    groups = {}
    for c in inst.constraints:
        groups[c.group] = groups.get(c.group, 0) + 1
    assert groups == {"kcl": 8, "ohm": 4, "load_power": 4, "setpoint": 2, "load_current": 2,
                      "gen_power": 4, "gen_current": 2, "dispatch": 2, "bounds": 3}
    assert inst.n == 26
    assert inst.psd_blocks == ()
    sp = [c for c in inst.constraints if c.group == "setpoint"]
    assert len(sp) == 2 and all(c.is_quadratic for c in sp)


@pytest.mark.parametrize("kind", [K.SWR1, K.SWR2])
def test_lifted_psd_block(insts, kind):
    inst = insts[kind]
    assert [b.side for b in inst.psd_blocks] == [8]
    blk = inst.psd_blocks[0]
    covered = {(inst.registry[v].symbol, inst.registry[v].owner) for v in blk.variables()}
    assert covered == {("L", "l"), ("Sbar_lij", "l")}
    expected = {k for k, v in enumerate(inst.registry) if v.symbol in ("L", "Sbar_lij") and v.owner == "l"}
    assert blk.variables() == expected


@pytest.mark.parametrize("kind", [K.IVR, K.SVR1, K.SVR2])
def test_nlp_kinds_have_no_psd(insts, kind):
    assert insts[kind].psd_blocks == ()


def test_svr2_adds_device_currents(insts):
    a = {(v.symbol, v.owner, v.index, v.part) for v in insts[K.SVR1].registry}
    b = {(v.symbol, v.owner, v.index, v.part) for v in insts[K.SVR2].registry}
    assert a < b
    assert {s for s, *_ in b - a} == {"I_d", "I_g"}
    assert len(b - a) == 8


def test_constraints_reference_registered_variables(insts):
    for inst in insts.values():
        for c in inst.constraints:
            assert all(0 <= k < inst.n for k in c.variables())


def test_unvalidated_network_rejected(net):
    bad = net.with_bus_bounds("j", u_min=[1.2, 0.0])
    with pytest.raises(ContractError):
        build_formulation(bad, K.IVR)


def test_missing_objective_generator(net):
    with pytest.raises(ModelError):
        build_formulation(Network(net.buses, net.branches, net.loads, (), net.name), K.IVR)


def test_zero_point_set_point_residual(insts):
    rep = residuals(insts[K.IVR], np.zeros(insts[K.IVR].n))
    sp = rep.by_name("setpoint")
    assert np.hypot(sp["setpoint[d].re"], sp["setpoint[d].im"]) == pytest.approx(abs(1 + 0.5j), abs=1e-14)
    assert not rep.feasible(1e-6)


def test_residual_length_checked(insts):
    with pytest.raises(ContractError):
        residuals(insts[K.IVR], np.zeros(3))


def test_exact_point_matches_independent_circuit(exact):
    u = oracles.solve_circuit()
    assert np.max(np.abs(exact.voltages["j"] - u)) < 1e-10


@pytest.mark.parametrize("kind", list(K))
def test_relaxation_containment(insts, net, exact, kind):
    inst = insts[kind]
    assert residuals(insts[K.IVR], embed(insts[K.IVR], exact, net)).feasible(1e-8)
    assert residuals(inst, embed(inst, exact, net)).feasible(1e-6)


def test_lifted_identities_at_exact_point(insts, net, exact):
    rep = residuals(insts[K.SWR2], embed(insts[K.SWR2], exact, net))
    for prefix in ("ohm", "flow_loss"):
        assert max(map(abs, rep.by_name(prefix).values())) < 1e-10


def test_lift_simple_vectors(net):
    p = IvrPoint(
        {"i": [1, 0], "j": [1, 0]},
        {"l": [0, 0]},
        {"d": [0, 0]},
        {"g": [0, 0]},
    )
    lp = lift_point(p, net)
    assert np.array_equal(lp.W["j"], np.array([[1, 0], [0, 0]]))
    assert not np.any(lp.L["l"]) and not np.any(lp.Sbar_from["l"])
    m = lp.block_matrix(net, "l")
    eig = np.linalg.eigvalsh(m)
    assert eig.min() >= -1e-15
    assert np.sum(eig > 1e-12) == 1


def test_lift_dimension_mismatch(net):
    p = IvrPoint({"i": [1, 0], "j": [1, 0, 0]}, {"l": [0, 0]})
    with pytest.raises(ContractError):
        lift_point(p, net)


def complex_vectors(n):
    return st.lists(st.complex_numbers(max_magnitude=3, allow_nan=False, allow_infinity=False),
                    min_size=n, max_size=n).map(lambda v: np.array(v, dtype=complex))


@st.composite
def circuit_points(draw, conserved=False):
    ui, uj = draw(complex_vectors(2)), draw(complex_vectors(2))
    i = draw(complex_vectors(2))
    if conserved:
        i = np.array([i[0], -i[0]])
    return IvrPoint({"i": ui, "j": uj}, {"l": i}, {"d": i.copy()}, {"g": i.copy()})


@given(circuit_points())
@settings(max_examples=100, deadline=None)
def test_lift_invariants(net, p):
    lp = lift_point(p, net)
    for b, u in p.voltages.items():
        assert np.array_equal(np.diag(lp.W[b]).real, u.real**2 + u.imag**2)
        assert np.max(np.abs(lp.W[b] - lp.W[b].conj().T)) <= 1e-12
    assert np.max(np.abs(lp.L["l"] - lp.L["l"].conj().T)) <= 1e-12
    assert np.allclose(np.diag(lp.Sbar_load["d"]), lp.S_load["d"], atol=1e-12)
    assert np.allclose(np.diag(lp.Sbar_gen["g"]), lp.S_gen["g"], atol=1e-12)
    eig = np.linalg.eigvalsh(lp.block_matrix(net, "l"))
    assert eig.min() >= -1e-9 * max(1.0, eig.max())
    assert np.sum(eig > 1e-9 * max(1.0, eig.max())) <= 1


@given(circuit_points(conserved=True))
@settings(max_examples=100, deadline=None)
def test_set_point_chain(net, p):
    # with conserved load current the terminal-voltage product equals the summed load power
    lp = lift_point(p, net)
    u = p.voltages["j"]
    i = p.load_currents["d"]
    lhs = (u[0] - u[1]) * np.conj(i[0])
    assert abs(lhs - np.sum(lp.S_load["d"])) <= 1e-12 * max(1.0, abs(lhs))
    rows = lp.Sbar_load["d"].sum(axis=1)
    assert np.max(np.abs(rows)) <= 1e-12 * max(1.0, np.abs(lp.Sbar_load["d"]).max())


def test_lifted_kcl_on_projected_points(insts, net):
    # 100 random points projected onto current KCL satisfy the lifted KCL rows
    from mcopf.formulations import point_from_solution

    rng = np.random.default_rng(11)
    worst = 0.0
    for x in projected_points(insts[K.IVR], {"kcl"}, 100, rng):
        p = point_from_solution(insts[K.IVR], x, net)
        rep = residuals(insts[K.SWR2], embed(insts[K.SWR2], p, net))
        worst = max(worst, max(map(abs, rep.by_name("kcl_matrix").values())))
        rep1 = residuals(insts[K.SVR1], embed(insts[K.SVR1], p, net))
        worst = max(worst, max(map(abs, rep1.by_name("kcl").values())))
    assert worst <= 1e-10


def test_row_sums_on_conserved_points(insts, net):
    from mcopf.formulations import point_from_solution

    rng = np.random.default_rng(12)
    worst = 0.0
    for x in projected_points(insts[K.IVR], {"kcl", "load_current", "gen_current"}, 100, rng):
        p = point_from_solution(insts[K.IVR], x, net)
        rep = residuals(insts[K.SWR2], embed(insts[K.SWR2], p, net))
        worst = max(worst, max(map(abs, rep.by_name("row_sum").values())))
    assert worst <= 1e-12


def test_ablation_flags_apply_to_swr1_only(net):
    base = build_formulation(net, K.SWR1)
    both = build_formulation(net, K.SWR1, matrix_kcl=True, row_sums=True)
    assert base.n < both.n
    assert {c.group for c in both.constraints} >= {"kcl", "row_sum"}
    # the flags only exist for the SWR-1 ablation and are ignored elsewhere
    assert build_formulation(net, K.IVR, matrix_kcl=True).flags == ()


def test_embedding_needs_device_currents(insts, net, exact):
    p = IvrPoint(exact.voltages, exact.branch_currents)
    for kind in (K.IVR, K.SVR1, K.SWR2):
        with pytest.raises(EmbeddingError):
            embed(insts[kind], p, net)


def test_point_json_round_trip(exact):
    again = point_from_dict(point_to_dict(exact))
    for table in ("voltages", "branch_currents", "load_currents", "gen_currents"):
        a, b = getattr(exact, table), getattr(again, table)
        assert a.keys() == b.keys()
        assert all(np.array_equal(a[k], b[k]) for k in a)


def test_kind_parsing():
    assert K.parse("SVR-1") is K.SVR1
    assert K.parse(" swr2 ") is K.SWR2
    with pytest.raises(ValueError):
        K.parse("bogus")
