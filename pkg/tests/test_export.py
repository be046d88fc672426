import json

import numpy as np
import pytest

from mcopf.errors import ContractError, NetworkParseError, SchemaError
from mcopf.formulations import FormulationKind as K, build_formulation
from mcopf.solvers import FORMATS, export_problem, load_problem, solve_sdp
from mcopf.solvers.export import read_conic_text
from mcopf.solvers.sdp import to_cone

ALL = list(K)


@pytest.mark.parametrize("kind", ALL)
def test_qcqp_json_roundtrip(net, kind):
    inst = build_formulation(net, kind)
    blob = export_problem(inst, "qcqp-json")
    back = load_problem(blob)
    assert back == inst
    assert export_problem(back, "qcqp-json") == blob


def test_qcqp_json_keeps_flags(net):
    inst = build_formulation(net, K.SWR1, matrix_kcl=True)
    assert load_problem(export_problem(inst, "qcqp-json")) == inst


def test_swr2_conic_text_one_block_of_side_8(net):
    text = export_problem(build_formulation(net, K.SWR2), "conic-text").decode()
    doc = read_conic_text(text)
    assert [side for side, _ in doc.blocks] == [8]
    header = [ln for ln in text.splitlines() if ln and not ln.startswith("#")][0]
    nvar, nblocks, _ = map(int, header.split())
    assert (nvar, nblocks) == (50, 1)


@pytest.mark.parametrize("kind", [K.SWR1, K.SWR2])
@pytest.mark.parametrize("theta", [0.0, 2.0, 4.5])
def test_conic_text_matches_cone(net, kind, theta):
    inst = build_formulation(net, kind)
    a = to_cone(inst, theta)
    b = read_conic_text(export_problem(inst, "conic-text", theta)).to_cone()
    assert a.sides == b.sides and a.n_lin == b.n_lin
    for f in ("c", "A", "b", "G", "h"):
        assert np.array_equal(getattr(a, f), getattr(b, f)), f


@pytest.mark.parametrize("kind", [K.SWR1, K.SWR2])
def test_conic_text_solved_externally(net, kind):
    cp = pytest.importorskip("cvxpy")
    inst = build_formulation(net, kind)
    doc = read_conic_text(export_problem(inst, "conic-text"))
    x = cp.Variable(doc.nvar)
    cons = []
    for _, terms, rhs in doc.eq:
        cons.append(sum(v * x[k] for k, v in terms) == rhs)
    for _, terms, rhs in doc.ineq:
        cons.append(sum(v * x[k] for k, v in terms) <= rhs)
    for b in range(len(doc.blocks)):
        f0, f = doc.block_matrices(b)
        m = f0 + sum(x[k] * f[k] for k in range(doc.nvar) if f[k].any())
        cons.append((m + m.T) / 2 >> 0)
    obj = sum(v * x[k] for k, v in doc.objective)
    prob = cp.Problem(cp.Minimize(obj), cons)
    prob.solve(solver="CLARABEL")
    assert prob.status.startswith("optimal")
    assert solve_sdp(inst).objective == pytest.approx(prob.value, abs=1e-5)


@pytest.mark.parametrize("kind", [K.IVR, K.SVR1, K.SVR2])
def test_conic_text_needs_swr(net, kind):
    with pytest.raises(ContractError):
        export_problem(build_formulation(net, kind), "conic-text")


def test_unknown_format(net):
    assert FORMATS == ("qcqp-json", "conic-text")
    with pytest.raises(ContractError):
        export_problem(build_formulation(net, K.IVR), "mps")


def test_load_problem_rejects_garbage(net):
    with pytest.raises((SchemaError, NetworkParseError)):
        load_problem(b"{not json")
    d = json.loads(export_problem(build_formulation(net, K.IVR), "qcqp-json"))
    d.pop("kind")
    with pytest.raises(SchemaError):
        load_problem(json.dumps(d))


def test_conic_text_parse_errors():
    with pytest.raises(NetworkParseError):
        read_conic_text("")
    with pytest.raises(NetworkParseError):
        read_conic_text("2 0 1\nobj: 1@0\n")
    with pytest.raises(NetworkParseError):
        read_conic_text("2 0 0\nr1: 1x0 <= 1\n")
