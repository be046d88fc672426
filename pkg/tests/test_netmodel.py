import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from mcopf.errors import NetworkParseError, NetworkReferenceError, SchemaError, SingularMatrixError
from mcopf.netmodel import (
    Branch,
    bundled_case,
    is_hermitian,
    is_positive_definite,
    is_symmetric,
    kron_reduce,
    load_network,
    network_to_dict,
    network_to_json,
    parse_network,
    validate_network,
)


def case_dict():
    return network_to_dict(bundled_case())


def test_bundled_case_matches_repository_file(case_path):
    assert load_network(case_path) == bundled_case()


def test_table_data_decoded(net):
    z = net.branch("l").z
    assert z[0, 0] == pytest.approx(0.05 + 0.04j, abs=1e-15)
    assert z[0, 1] == pytest.approx(0.005 + 0.02j, abs=1e-15)
    assert np.allclose(z, oracles.Z, atol=1e-15)
    assert net.loads[0].s_ref == 1.0 + 0.5j
    assert net.bus("j").u_min == (0.9, 0.0)
    assert net.bus("i").fixed_voltage == (1.0 + 0j, 0j)


def test_empty_branch_list_is_structurally_valid():
    doc = {"buses": [{"id": "a", "n_conductors": 1, "u_min": [0], "u_max": [1], "fixed_voltage": [[1, 0]]}],
           "branches": []}
    net = parse_network(json.dumps(doc))
    assert net.branches == ()
    assert validate_network(net).ok


def test_dangling_reference():
    d = case_dict()
    d["loads"][0]["bus"] = "zz"
    with pytest.raises(NetworkReferenceError):
        parse_network(json.dumps(d))


def test_malformed_json_reports_position():
    with pytest.raises(NetworkParseError) as e:
        parse_network('{"buses": [\n  {"id": }\n]}')
    assert e.value.line == 2
    assert e.value.column > 1


def test_missing_field_named():
    d = case_dict()
    del d["branches"][0]["X"]
    with pytest.raises(SchemaError) as e:
        parse_network(json.dumps(d))
    assert "X" in e.value.field


def test_bad_complex_encoding():
    d = case_dict()
    d["loads"][0]["s_ref"] = [1.0]
    with pytest.raises(SchemaError):
        parse_network(json.dumps(d))


def test_round_trip(net):
    again = parse_network(network_to_json(net))
    assert again == net
    assert network_to_dict(again) == network_to_dict(net)


def test_validation_clean_case(net):
    assert validate_network(net).ok


def test_validation_asymmetric_resistance():
    d = case_dict()
    d["branches"][0]["R"] = [[0.05, 0.005], [0.006, 0.05]]
    rep = validate_network(parse_network(json.dumps(d)))
    assert rep.codes() == ["asymmetric"]
    assert "branch l" in str(list(rep)[0])


def test_validation_bound_order():
    d = case_dict()
    d["buses"][1]["u_min"] = [1.2, 0.0]
    rep = validate_network(parse_network(json.dumps(d)))
    assert "bound-order" in rep.codes()


@pytest.mark.parametrize(
    "edit, code",
    [
        (lambda d: d["buses"][1].__setitem__("fixed_voltage", [[1, 0], [0, 0]]), "slack-count"),
        (lambda d: d["buses"][1].__setitem__("u_min", [-0.1, 0.0]), "bound-negative"),
        (lambda d: d["loads"][0].__setitem__("terminals", [1, 1]), "terminals"),
        (lambda d: d["loads"][0].__setitem__("terminals", [0, 5]), "terminals"),
        (lambda d: d["generators"][0].__setitem__("conductors", [0, 0]), "conductors"),
        (lambda d: d["branches"][0].__setitem__("X", [[0.04, 0.05], [0.05, 0.04]]), "not-positive-definite"),
        (lambda d: d["branches"][0].__setitem__("to", "i"), "self-loop"),
    ],
)
def test_validation_findings(edit, code):
    d = case_dict()
    edit(d)
    assert code in validate_network(parse_network(json.dumps(d))).codes()


def test_zero_lower_bound_allowed():
    d = case_dict()
    d["buses"][1]["u_min"] = [0.0, 0.0]
    assert validate_network(parse_network(json.dumps(d))).ok


def test_matrix_predicates():
    assert is_symmetric(np.array([[1, 2], [2, 1]]))
    assert not is_symmetric(np.array([[1, 2], [2.1, 1]]))
    assert is_hermitian(np.array([[1, 1j], [-1j, 2]]))
    assert not is_hermitian(np.array([[1, 1j], [1j, 2]]))
    assert is_positive_definite(np.eye(3))
    assert not is_positive_definite(np.array([[1, 2], [2, 1]]))
    assert not is_positive_definite(np.diag([1.0, 1e-11]))


def test_kron_reference_value(net):
    zk = kron_reduce(net.branch("l").z, [1])
    assert zk.shape == (1, 1)
    assert abs(zk[0, 0] - (0.052622 + 0.033902j)) < 1e-6
    assert abs(zk[0, 0] - oracles.kron_scalar()) < 1e-15


def test_kron_uncoupled_keeps_self_impedance():
    z = np.diag([0.05 + 0.04j, 0.07 + 0.01j])
    assert kron_reduce(z, [1])[0, 0] == z[0, 0]


def test_kron_sequential_equals_joint():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3))
    z = a @ a.T + 3 * np.eye(3)
    joint = kron_reduce(z, [1, 2])
    step = kron_reduce(kron_reduce(z, [2]), [1])
    assert np.max(np.abs(joint - step)) < 1e-12


def test_kron_singular_block():
    with pytest.raises(SingularMatrixError):
        kron_reduce(np.array([[1.0, 1.0], [1.0, 0.0]]), [1])


def spd(draw, n):
    a = np.array(draw(st.lists(st.floats(-1, 1), min_size=n * n, max_size=n * n))).reshape(n, n)
    return a @ a.T + 0.1 * np.eye(n)


@st.composite
def impedances(draw, n=3):
    return spd(draw, n) + 1j * spd(draw, n)


@given(impedances())
@settings(max_examples=50, deadline=None)
def test_kron_preserves_symmetry(z):
    out = kron_reduce(z, [2])
    assert np.max(np.abs(out - out.T)) < 1e-12


@given(impedances(n=2))
@settings(max_examples=50, deadline=None)
def test_admittance_inverse(z):
    br = Branch("b", "x", "y", tuple(map(tuple, z.real)), tuple(map(tuple, z.imag)))
    assert np.max(np.abs(br.z @ br.y - np.eye(2))) < 1e-12


@given(st.floats(0.5, 2.0), st.floats(0.5, 2.0), st.floats(-0.9, 0.9), st.floats(-0.9, 0.9))
@settings(max_examples=50, deadline=None)
def test_symmetric_pd_perturbations_validate(fr, fx, cr, cx):
    d = case_dict()
    d["branches"][0]["R"] = [[0.05 * fr, 0.05 * fr * cr], [0.05 * fr * cr, 0.05 * fr]]
    d["branches"][0]["X"] = [[0.04 * fx, 0.04 * fx * cx], [0.04 * fx * cx, 0.04 * fx]]
    assert validate_network(parse_network(json.dumps(d))).ok


def test_copy_helpers(net):
    assert net.with_scaled_impedance(2.0).branch("l").z[0, 0] == pytest.approx(0.1 + 0.08j)
    assert net.with_bus_bounds("j", u_max=[1.0, 1.0]).bus("j").u_max == (1.0, 1.0)
    assert net.with_load_setpoint("d", 0j).loads[0].s_ref == 0
    assert net.branch("l").z[0, 0] == pytest.approx(0.05 + 0.04j)
