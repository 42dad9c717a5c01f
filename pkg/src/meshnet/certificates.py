"""Numeric re-verification of synthesized gain sets.

Everything here is plain numpy on concrete numbers: these assemblers rebuild
the certificate matrices from scratch and eigencheck them, independently of
the conic-program route that produced the values.  Synthesis code must not
call into this module to build its constraints, and this module never touches
the solver.

Index conventions: translation errors are stacked e = (e_x, e_v) per agent;
the double integrator pair (A, B) below is mass-free because the outer loop
commands accelerations directly.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from .control import GainBlock

__all__ = [
    "double_integrator",
    "closed_loop_matrix",
    "storage_certificate",
    "storage_certificate_scaled",
    "verify_ifofp",
    "dissipation_gap",
    "scalar_gain_certificate",
    "scalar_gain_certificate_scaled",
    "network_certificate_matrix",
    "chain_diag_block",
    "chain_off_block",
    "self_damping_residual",
    "coupling_budget_ratio",
    "iss_upper_bound",
]

I3 = np.eye(3)
I6 = np.eye(6)


def double_integrator() -> tuple[np.ndarray, np.ndarray]:
    """(A, B) of the stacked translation error: e_dot = A e + B u."""
    A = np.zeros((6, 6))
    A[:3, 3:] = I3
    B = np.zeros((6, 3))
    B[3:, :] = I3
    return A, B


def closed_loop_matrix(L_rows: np.ndarray) -> np.ndarray:
    """A + B L for a 3x6 feedback row block."""
    A, B = double_integrator()
    return A + B @ np.asarray(L_rows, dtype=float)


def _sym(m: np.ndarray) -> np.ndarray:
    return m + m.T


def storage_certificate(
    P: np.ndarray, L_rows: np.ndarray, nu: float, rho: float
) -> np.ndarray:
    """18x18 certificate for excess passivity (nu, rho) of the closed loop.

    [[rho^-1 I, P,                0        ]
     [P,        -sym(A P + B L P), -I + P/2 ]
     [0,        -I + P/2,          -nu I    ]]

    Positive definiteness makes V(e) = e^T P^-1 e a storage function proving
    the loop input-feedforward output-feedback passive with index pair
    (nu, rho) and, in particular, sym(R Abar) <= -rho I - (R - I/2)^2 / |nu|.
    """
    P = np.asarray(P, dtype=float)
    A, B = double_integrator()
    AP = A @ P + B @ (np.asarray(L_rows, dtype=float) @ P)
    z = np.zeros((6, 6))
    cross = -I6 + 0.5 * P
    return np.block(
        [
            [I6 / rho, P, z],
            [P.T, -_sym(AP), cross],
            [z, cross.T, -nu * I6],
        ]
    )


def storage_certificate_scaled(
    P_tilde: np.ndarray, L_tilde: np.ndarray, rho: float, nu_tilde: float
) -> np.ndarray:
    """The rho-scaled synthesis form; equals rho * storage_certificate at
    P = P_tilde / rho, L = L_tilde P_tilde^-1, nu = nu_tilde / rho."""
    P_tilde = np.asarray(P_tilde, dtype=float)
    A, B = double_integrator()
    APt = A @ P_tilde + B @ np.asarray(L_tilde, dtype=float)
    z = np.zeros((6, 6))
    cross = -rho * I6 + 0.5 * P_tilde
    return np.block(
        [
            [I6, P_tilde, z],
            [P_tilde.T, -_sym(APt), cross],
            [z, cross.T, -nu_tilde * I6],
        ]
    )


def verify_ifofp(P: np.ndarray, L_rows: np.ndarray, nu: float, rho: float) -> float:
    """Smallest eigenvalue of the storage certificate (>= 0 means certified)."""
    return float(np.linalg.eigvalsh(storage_certificate(P, L_rows, nu, rho)).min())


def dissipation_gap(R: np.ndarray, L_rows: np.ndarray, nu: float, rho: float) -> float:
    """lambda_max of sym(R Abar) + rho I + (R - I/2)^2 / |nu| (<= 0 if passive)."""
    R = np.asarray(R, dtype=float)
    if nu >= 0:
        raise ValueError("nu must be negative")
    Abar = closed_loop_matrix(L_rows)
    shifted = R - 0.5 * I6
    form = _sym(R @ Abar) + rho * I6 + (shifted @ shifted) / abs(nu)
    return float(np.linalg.eigvalsh(form).max())


def scalar_gain_certificate(nu: float, rho: float, p: float, gamma2: float) -> np.ndarray:
    """4x4 single-agent reduction of the network certificate (zero coupling).

    PD of this matrix is what the per-coordinate network test degenerates to
    for one agent; it needs p rho > 1 and
    gamma2 > -p nu + p^2 / (4 (p rho - 1)).
    """
    return np.array(
        [
            [-p * nu, 0.0, 0.0, -p * nu],
            [0.0, 1.0, 1.0, 0.0],
            [0.0, 1.0, p * rho, -p / 2.0],
            [-p * nu, 0.0, -p / 2.0, gamma2],
        ]
    )


def scalar_gain_certificate_scaled(
    nu_tilde: float, p_tilde: float, gamma2: float
) -> np.ndarray:
    """Scaled variant used at synthesis time; PD forces 0 < p_tilde < 1 and
    gamma2 > -nu_tilde + 1 / (4 (1 - p_tilde))."""
    return np.array(
        [
            [-nu_tilde, 0.0, 0.0, -nu_tilde],
            [0.0, p_tilde, p_tilde, 0.0],
            [0.0, p_tilde, 1.0, -0.5],
            [-nu_tilde, 0.0, -0.5, gamma2],
        ]
    )


def network_certificate_matrix(
    ids: Sequence[int],
    nu: Mapping[int, float],
    rho: Mapping[int, float],
    p: Mapping[int, float],
    Q: np.ndarray,
    gamma2: float,
) -> np.ndarray:
    """Dense 24N x 24N network certificate in field-major layout.

    ``Q`` is the full 6N x 6N matrix of scaled coupling blocks in the order
    of ``ids`` (Q_ij = -p_i nu_i K_ij).  PD at a point (p, Q, gamma2) proves
    the interconnected error system L2-stable with gain sqrt(gamma2).
    """
    n = len(ids)
    Q = np.asarray(Q, dtype=float)
    if Q.shape != (6 * n, 6 * n):
        raise ValueError(f"Q must be {6 * n}x{6 * n}, got {Q.shape}")
    x11 = np.kron(np.diag([-p[i] * nu[i] for i in ids]), I6)
    x12 = np.kron(np.diag([-1.0 / (2.0 * nu[i]) for i in ids]), I6)
    xp22 = np.kron(np.diag([-p[i] * rho[i] for i in ids]), I6)
    eye = np.eye(6 * n)
    z = np.zeros((6 * n, 6 * n))
    block33 = -Q.T @ x12 - x12 @ Q - xp22
    block34 = -x12 @ x11
    return np.block(
        [
            [x11, z, Q, x11],
            [z, eye, eye, z],
            [Q.T, eye, block33, block34],
            [x11, z, block34.T, gamma2 * eye],
        ]
    )


def chain_diag_block(
    nu: float, rho: float, p: float, gamma2_hat: float, Q_ii: np.ndarray
) -> np.ndarray:
    """24x24 self block of the agent-major chain form of the network
    certificate (same matrix as field-major up to a permutation)."""
    Q_ii = np.asarray(Q_ii, dtype=float)
    vp = -p * nu * I6
    z = np.zeros((6, 6))
    block33 = _sym(Q_ii) / (2.0 * nu) + p * rho * I6
    return np.block(
        [
            [vp, z, Q_ii, vp],
            [z, I6, I6, z],
            [Q_ii.T, I6, block33, -(p / 2.0) * I6],
            [vp, z, -(p / 2.0) * I6, gamma2_hat * I6],
        ]
    )


def chain_off_block(
    nu_i: float, nu_j: float, Q_ij: np.ndarray, Q_ji: np.ndarray
) -> np.ndarray:
    """24x24 coupling block (row agent i, column agent j) of the chain form."""
    Q_ij = np.asarray(Q_ij, dtype=float)
    Q_ji = np.asarray(Q_ji, dtype=float)
    z = np.zeros((6, 6))
    block33 = Q_ji.T / (2.0 * nu_j) + Q_ij / (2.0 * nu_i)
    return np.block(
        [
            [z, z, Q_ij, z],
            [z, z, z, z],
            [Q_ji.T, z, block33, z],
            [z, z, z, z],
        ]
    )


def self_damping_residual(
    R: np.ndarray,
    L_bar: GainBlock,
    K_ii: GainBlock,
    rho: float,
    epsilon: float,
) -> float:
    """lambda_max of sym(R (A + B L_bar + K_ii)) + (rho + epsilon) I.

    A value <= 0 certifies that the self-coupled loop keeps rho + epsilon
    worth of damping through R, which is what the mesh-stability decay rate
    mu = (rho + epsilon - 1) / lambda_max(R) rests on.  Note the constraint
    cannot be placed on sym(R K_ii) alone: that form vanishes on the kernel
    of the gain rows (the structural zero rows of K_ii), so only the slack of
    the local certificate sym(R A_bar) <= -rho I can pay for epsilon.
    """
    a_bar = closed_loop_matrix(L_bar.rows()) + K_ii.matrix()
    form = _sym(np.asarray(R, dtype=float) @ a_bar) + (rho + epsilon) * I6
    return float(np.linalg.eigvalsh(form).max())


def coupling_budget_ratio(
    agent: int,
    R: np.ndarray,
    K_row: Mapping[int, GainBlock],
    delta: float,
) -> float:
    """sum_{j != agent} ||R K_ij||_2 / delta; < 1 is the weak-coupling test."""
    R = np.asarray(R, dtype=float)
    total = 0.0
    for j, block in K_row.items():
        if j == agent:
            continue
        total += float(np.linalg.norm(R @ block.matrix(), 2))
    return total / delta


def iss_upper_bound(
    times: np.ndarray,
    *,
    R: np.ndarray,
    mu: float,
    delta: float,
    coupling_norm_sum: float,
    neighbor_sup: float,
    w_sup: float,
    e0_norm: float,
) -> np.ndarray:
    """Pointwise sup-norm bound on one agent's stacked translation error:

    |e(t)| <= (coupling_norm_sum * neighbor_sup + ||R|| w_sup) / delta
              + sqrt(cond(R)) |e(0)| exp(-mu t / 2).
    """
    R = np.asarray(R, dtype=float)
    eigs = np.linalg.eigvalsh(R)
    if eigs.min() <= 0:
        raise ValueError("R must be positive definite")
    steady = (coupling_norm_sum * neighbor_sup + np.linalg.norm(R, 2) * w_sup) / delta
    transient = np.sqrt(eigs.max() / eigs.min()) * e0_norm * np.exp(
        -0.5 * mu * np.asarray(times, dtype=float)
    )
    return steady + transient
