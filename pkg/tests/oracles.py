"""Independent reference computations for the two-bus case.

Nothing here goes through the formulation compiler or the package solvers:
the circuit is written out by hand from the case data.
"""

from __future__ import annotations

import numpy as np
from scipy.optimize import fsolve

R = 0.05 * np.array([[1.0, 0.1], [0.1, 1.0]])
X = 0.04 * np.array([[1.0, 0.5], [0.5, 1.0]])
Z = R + 1j * X
U_I = np.array([1.0 + 0j, 0.0 + 0j])
S_REF = 1.0 + 0.5j


def circuit_residual(u_j: np.ndarray, s_ref: complex = S_REF) -> np.ndarray:
    """Ohm's law over the branch with the load current eliminated."""
    i_a = np.conj(s_ref / (u_j[0] - u_j[1]))
    i = np.array([i_a, -i_a])
    return u_j - U_I + Z @ i


def solve_circuit(s_ref: complex = S_REF, start=(1.0, 0.0, 0.0, 0.0)) -> np.ndarray:
    def f(v):
        r = circuit_residual(np.array([v[0] + 1j * v[1], v[2] + 1j * v[3]]), s_ref)
        return [r[0].real, r[0].imag, r[1].real, r[1].imag]

    v = fsolve(f, start, xtol=1e-14)
    return np.array([v[0] + 1j * v[1], v[2] + 1j * v[3]])


def circuit_dispatch(u_j: np.ndarray) -> complex:
    i_a = np.conj(S_REF / (u_j[0] - u_j[1]))
    i_branch = np.linalg.solve(Z, U_I - u_j)
    assert np.allclose(i_branch, [i_a, -i_a], atol=1e-9)
    return complex(U_I @ np.conj(i_branch))


def kron_scalar() -> complex:
    return Z[0, 0] - Z[0, 1] * Z[1, 0] / Z[1, 1]


def grounded_circuit(iterations: int = 200) -> tuple[complex, complex]:
    """Fixed-point solve of the neutral-grounded circuit; returns (U_j,a, S_g)."""
    zk = kron_scalar()
    u = 1.0 + 0j
    for _ in range(iterations):
        u = 1.0 - zk * np.conj(S_REF / u)
    i_a = np.conj(S_REF / u)
    return complex(u), complex(U_I[0] * np.conj(i_a))


def cvxpy_swr(theta: float = 0.0, matrix_kcl: bool = False, row_sums: bool = False,
              u_min=(0.9, 0.0), u_max=(1.1, 1.1)):
    """Hand-written lifted model solved by Clarabel; returns (status, S_g).

    ``matrix_kcl`` ties the device matrices to the branch matrices
    (S_d = -S_ji, S_g = S_ij as 2x2 blocks); without it only their diagonals
    are tied. ``row_sums`` zeroes every row sum of the device matrices.
    """
    import cvxpy as cp

    w_i = np.outer(U_I, U_I.conj())
    m = cp.Variable((4, 4), hermitian=True)
    s_ij = m[0:2, 2:4]
    ell = m[2:4, 2:4]
    s_ji = cp.Variable((2, 2), complex=True)
    w_j = w_i - s_ij @ Z.conj().T - Z @ s_ij.H + Z @ ell @ Z.conj().T
    cons = [m >> 0, m[0:2, 0:2] == w_i, s_ij + s_ji == Z @ ell]
    if matrix_kcl:
        sd_bar, sg_bar = -s_ji, s_ij
    else:
        sd_bar = cp.Variable((2, 2), complex=True)
        sg_bar = cp.Variable((2, 2), complex=True)
        cons += [cp.diag(sd_bar) == -cp.diag(s_ji), cp.diag(sg_bar) == cp.diag(s_ij)]
    if row_sums:
        cons += [sd_bar @ np.ones(2) == 0, sg_bar @ np.ones(2) == 0]
    cons += [cp.sum(cp.diag(sd_bar)) == S_REF]
    d = cp.real(cp.diag(w_j))
    cons += [d[0] >= u_min[0] ** 2, d[0] <= u_max[0] ** 2, d[1] >= u_min[1] ** 2, d[1] <= u_max[1] ** 2]
    disp = cp.sum(cp.diag(sg_bar))
    prob = cp.Problem(cp.Minimize(np.cos(theta) * cp.real(disp) + np.sin(theta) * cp.imag(disp)), cons)
    prob.solve(solver=cp.CLARABEL)
    return prob.status, (None if disp.value is None else complex(disp.value))
