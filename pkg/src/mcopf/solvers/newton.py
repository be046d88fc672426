"""Newton power-flow oracle for the exact (current-voltage) circuit equations."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from mcopf.errors import ContractError, NoSolutionError, SingularLoadError
from mcopf.formulations import IvrPoint
from mcopf.netmodel import Network, validate_network

SINGULAR_DROP = 1e-9


def _layout(net: Network):
    slots: dict[tuple[str, int], int] = {}
    for b in net.buses:
        if b.is_slack:
            continue
        for c in range(b.n_conductors):
            slots[(b.id, c)] = len(slots)
    return slots


def solve_power_flow_newton(
    net: Network,
    *,
    injections: Mapping[tuple[str, int], complex] | None = None,
    start: Mapping[str, np.ndarray] | None = None,
    tol: float = 1e-12,
    max_iter: int = 50,
) -> IvrPoint:
    """Solve KCL at every non-source bus with constant-power loads.

    ``injections`` adds a fixed KCL slack current at ``(bus, conductor)``
    that belongs to the bus's first load: that load's terminal currents are
    no longer balanced, while its total complex power is still held at the
    set point. With no injections this is the physical circuit.

    Returned load currents are the effective device currents (load plus
    slack), so the point stays KCL-consistent at every bus.
    """
    report = validate_network(net)
    if not report.ok:
        raise ContractError("network failed validation: " + "; ".join(map(str, report)))
    for g in net.generators:
        if not net.bus(g.bus).is_slack:
            raise ContractError("Newton oracle supports generators at the voltage-source bus only")
    injections = dict(injections or {})
    absorbing: dict[str, list[tuple[int, complex]]] = {}
    for (bus_id, cond), cur in injections.items():
        loads = net.loads_at(bus_id)
        if not loads:
            raise ContractError(f"slack injection at bus {bus_id!r} needs a load there")
        if not 0 <= cond < net.bus(bus_id).n_conductors:
            raise ContractError(f"conductor {cond} invalid for bus {bus_id!r}")
        absorbing.setdefault(loads[0].id, []).append((cond, complex(cur)))

    slots = _layout(net)
    n = len(slots)
    u = {b.id: np.array(b.fixed_voltage, dtype=complex) for b in net.buses if b.is_slack}
    src = net.slack_buses[0]
    for b in net.buses:
        if b.is_slack:
            continue
        if start is not None and b.id in start:
            u[b.id] = np.array(start[b.id], dtype=complex)
        else:
            flat = np.zeros(b.n_conductors, dtype=complex)
            m = min(b.n_conductors, src.n_conductors)
            flat[:m] = np.array(src.fixed_voltage[:m], dtype=complex)
            u[b.id] = flat

    def load_current(d, uu) -> tuple[np.ndarray, complex, complex]:
        """Device current and its Wirtinger derivatives w.r.t. conj(U_a), conj(U_n)."""
        a, r = d.terminals
        v = uu[d.bus][a] - uu[d.bus][r]
        if abs(v) < SINGULAR_DROP:
            raise SingularLoadError(f"voltage across load {d.id!r} collapsed to {abs(v):.2e}")
        num = np.conj(d.s_ref)
        extra = [(c, j) for c, j in absorbing.get(d.id, [])]
        for c, j in extra:
            num -= np.conj(uu[d.bus][c]) * j
        ia = num / np.conj(v)
        cur = np.zeros(net.bus(d.bus).n_conductors, dtype=complex)
        cur[a] += ia
        cur[r] -= ia
        for c, j in extra:
            cur[c] += j
        return cur, ia, num

    def residual_and_jacobian(uu):
        f = np.zeros(n, dtype=complex)
        A = np.zeros((n, n), dtype=complex)
        B = np.zeros((n, n), dtype=complex)
        for br in net.branches:
            y = br.y
            i_ij = y @ (uu[br.from_bus] - uu[br.to_bus])
            for end, other, sign in ((br.from_bus, br.to_bus, 1.0), (br.to_bus, br.from_bus, -1.0)):
                if (end, 0) not in slots:
                    continue
                for c in range(br.n_conductors):
                    row = slots[(end, c)]
                    f[row] += sign * i_ij[c]
                    for k in range(br.n_conductors):
                        if (end, k) in slots:
                            A[row, slots[(end, k)]] += y[c, k]
                        if (other, k) in slots:
                            A[row, slots[(other, k)]] -= y[c, k]
        for d in net.loads:
            if (d.bus, 0) not in slots:
                continue
            cur, ia, num = load_current(d, uu)
            a, r = d.terminals
            v = uu[d.bus][a] - uu[d.bus][r]
            for c in range(len(cur)):
                f[slots[(d.bus, c)]] += cur[c]
            # dI_a/dconj(U_a) = -num/conj(v)^2 ; dI_a/dconj(U_r) = +num/conj(v)^2
            dia_da = -num / np.conj(v) ** 2
            dia_dr = -dia_da
            dia_dc = {c: -j / np.conj(v) for c, j in absorbing.get(d.id, [])}
            for row_c, sgn in ((a, 1.0), (r, -1.0)):
                row = slots[(d.bus, row_c)]
                B[row, slots[(d.bus, a)]] += sgn * dia_da
                B[row, slots[(d.bus, r)]] += sgn * dia_dr
                for c, dv in dia_dc.items():
                    B[row, slots[(d.bus, c)]] += sgn * dv
        J = np.block([[(A + B).real, -(A - B).imag], [(A + B).imag, (A - B).real]])
        return f, J

    def pack(uu) -> np.ndarray:
        z = np.zeros(n, dtype=complex)
        for (b, c), k in slots.items():
            z[k] = uu[b][c]
        return z

    def unpack(z, uu) -> dict:
        out = dict(uu)
        for b in net.buses:
            if not b.is_slack:
                out[b.id] = np.array([z[slots[(b.id, c)]] for c in range(b.n_conductors)])
        return out

    for it in range(max_iter + 1):
        f, J = residual_and_jacobian(u)
        err = float(np.max(np.abs(f))) if n else 0.0
        if not np.isfinite(err) or err > 1e8:
            raise NoSolutionError(f"Newton diverged (|F| = {err:.3e}) at iteration {it}")
        if err < tol:
            break
        if it == max_iter:
            raise NoSolutionError(f"Newton did not converge in {max_iter} iterations (|F| = {err:.3e})")
        try:
            step = np.linalg.solve(J, -np.concatenate([f.real, f.imag]))
        except np.linalg.LinAlgError:
            raise NoSolutionError("singular Newton Jacobian") from None
        z = pack(u) + step[:n] + 1j * step[n:]
        u = unpack(z, u)

    branch = {br.id: br.y @ (u[br.from_bus] - u[br.to_bus]) for br in net.branches}
    loads = {}
    for d in net.loads:
        cur, _, _ = load_current(d, u)
        loads[d.id] = cur[list(d.terminals)]
        for c, _ in absorbing.get(d.id, []):
            if c not in d.terminals:
                raise ContractError("slack injection must sit on one of the absorbing load's terminals")
    gens = {}
    for b in net.buses:
        if not b.is_slack:
            continue
        net_out = np.zeros(b.n_conductors, dtype=complex)
        for br in net.branches:
            if br.from_bus == b.id:
                net_out += branch[br.id]
            elif br.to_bus == b.id:
                net_out -= branch[br.id]
        for d in net.loads_at(b.id):
            net_out[list(d.terminals)] += loads[d.id]
        here = net.generators_at(b.id)
        for k, g in enumerate(here):
            # the first generator at the source bus balances the source's KCL
            gens[g.id] = net_out[list(g.conductors)] if k == 0 else np.zeros(len(g.conductors), dtype=complex)
    return IvrPoint(u, branch, loads, gens)
