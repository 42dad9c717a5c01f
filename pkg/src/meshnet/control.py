"""Tracking controllers for thrust-propelled rigid bodies.

Two-loop structure per vehicle:

- The outer loop works on the translation error pair e = (e_x, e_v) and
  produces a virtual acceleration u_1, realized as a nominal force request
  f_d = m (u_1 + a_d - g e3).  The scalar thrust actually applied is the
  projection f = -f_d . (R e3); whatever the attitude cannot deliver shows up
  as the coupling residual X with -f R e3 = f_d - X, valid whenever the
  planned attitude keeps its third column along -f_d.  |X| <= 2 |f_d| always,
  and |X| <= |f_d| |e_R| while the attitude error stays below a quarter turn.

- The inner loop feedback-linearizes the attitude error: given u_2, the torque
  M = J (u_2 - hat(Omega) R^T R_d Omega_d + R^T R_d Omega_d_dot) + hat(Omega) J Omega
  makes the body-rate error obey e_Omega_dot = u_2 exactly (disturbance-free).

Gains between vehicles act only on the velocity row of the double-integrator
error, so every 6x6 coupling block has the form [[0, 0], [k_x, k_v]].
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .dynamics import E3, GRAVITY, RigidBodyParams, RigidBodyState
from .geometry import angular_velocity_error, hat, rotation_error

__all__ = [
    "MissingGain",
    "DegenerateGains",
    "InnerLoopGains",
    "GainBlock",
    "TrackingError",
    "GrowthConstants",
    "tracking_errors",
    "nominal_force_from_u1",
    "thrust_from_nominal",
    "coupling_term",
    "inner_loop",
    "torque_from_u2",
    "outer_loop",
    "stack_gain_rows",
    "growth_constants",
]


class MissingGain(LookupError):
    """A coupling gain references a neighbor whose error is unavailable."""


class DegenerateGains(ValueError):
    """Gain set with zero spectral size; growth constants are undefined."""


@dataclass(frozen=True)
class InnerLoopGains:
    """Proportional-derivative attitude gains, u_2 = -k_R e_R - k_Omega e_Omega."""

    k_R: float = 50.0
    k_Omega: float = 50.0

    def __post_init__(self) -> None:
        if self.k_R <= 0.0 or self.k_Omega <= 0.0:
            raise ValueError("inner-loop gains must be positive")


@dataclass(frozen=True)
class GainBlock:
    """One 6x6 outer-loop block [[0, 0], [k_x, k_v]] stored as its 3x3 parts."""

    k_x: np.ndarray
    k_v: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "k_x", np.asarray(self.k_x, dtype=float))
        object.__setattr__(self, "k_v", np.asarray(self.k_v, dtype=float))
        if self.k_x.shape != (3, 3) or self.k_v.shape != (3, 3):
            raise ValueError("gain parts must be 3x3")

    @classmethod
    def zero(cls) -> "GainBlock":
        return cls(np.zeros((3, 3)), np.zeros((3, 3)))

    @classmethod
    def isotropic(cls, k_x: float, k_v: float) -> "GainBlock":
        return cls(k_x * np.eye(3), k_v * np.eye(3))

    @classmethod
    def from_rows(cls, rows: np.ndarray) -> "GainBlock":
        rows = np.asarray(rows, dtype=float)
        if rows.shape != (3, 6):
            raise ValueError("expected a 3x6 row block")
        return cls(rows[:, :3], rows[:, 3:])

    def rows(self) -> np.ndarray:
        """The acting 3x6 part [k_x k_v]."""
        return np.hstack([self.k_x, self.k_v])

    def matrix(self) -> np.ndarray:
        """Full 6x6 block with the zero position row included."""
        out = np.zeros((6, 6))
        out[3:, :3] = self.k_x
        out[3:, 3:] = self.k_v
        return out

    def apply(self, e: np.ndarray) -> np.ndarray:
        """Map a stacked error (..., 6) to an acceleration (..., 3)."""
        e = np.asarray(e, dtype=float)
        return e[..., :3] @ self.k_x.T + e[..., 3:] @ self.k_v.T

    def __add__(self, other: "GainBlock") -> "GainBlock":
        return GainBlock(self.k_x + other.k_x, self.k_v + other.k_v)

    def __sub__(self, other: "GainBlock") -> "GainBlock":
        return GainBlock(self.k_x - other.k_x, self.k_v - other.k_v)

    def __neg__(self) -> "GainBlock":
        return GainBlock(-self.k_x, -self.k_v)

    def __mul__(self, scale: float) -> "GainBlock":
        return GainBlock(scale * self.k_x, scale * self.k_v)

    __rmul__ = __mul__

    def norm(self) -> float:
        """Largest singular value of the acting 3x6 part."""
        return float(np.linalg.norm(self.rows(), 2))


@dataclass
class TrackingError:
    """Translation and attitude tracking errors for one vehicle (or a stack)."""

    e_x: np.ndarray
    e_v: np.ndarray
    e_R: np.ndarray
    e_Omega: np.ndarray

    @property
    def outer(self) -> np.ndarray:
        """Stacked double-integrator error (..., 6)."""
        return np.concatenate([self.e_x, self.e_v], axis=-1)


def tracking_errors(
    state: RigidBodyState,
    x_d: np.ndarray,
    v_d: np.ndarray,
    R_d: np.ndarray,
    Omega_d: np.ndarray,
) -> TrackingError:
    return TrackingError(
        e_x=state.x - x_d,
        e_v=state.v - v_d,
        e_R=rotation_error(state.R, R_d),
        e_Omega=angular_velocity_error(state.Omega, state.R, R_d, Omega_d),
    )


def nominal_force_from_u1(
    u1: np.ndarray, a_d: np.ndarray, mass: float | np.ndarray
) -> np.ndarray:
    """Force request realizing the virtual acceleration u_1 (gravity removed)."""
    m = np.asarray(mass, dtype=float)
    return m[..., None] * (np.asarray(u1, dtype=float) + a_d - GRAVITY * E3)


def thrust_from_nominal(f_d: np.ndarray, R: np.ndarray) -> float | np.ndarray:
    """Scalar thrust f = -f_d . (R e3), the deliverable part of f_d."""
    out = -np.einsum("...i,...i->...", np.asarray(f_d, dtype=float), R @ E3)
    return float(out) if out.ndim == 0 else out


def coupling_term(f_d: np.ndarray, R: np.ndarray, R_d: np.ndarray) -> np.ndarray:
    """Residual X in -f R e3 = f_d - X under the planned attitude.

    X = |f_d| ((e3^T R_d^T R e3) R e3 - R_d e3); exact whenever R_d e3 is the
    unit vector opposite f_d, which the attitude planner guarantees.
    """
    f_d = np.asarray(f_d, dtype=float)
    mag = np.linalg.norm(f_d, axis=-1)
    r3 = R @ E3
    rd3 = R_d @ E3
    align = np.einsum("...i,...i->...", rd3, r3)
    return mag[..., None] * (align[..., None] * r3 - rd3)


def inner_loop(
    e_R: np.ndarray, e_Omega: np.ndarray, gains: InnerLoopGains = InnerLoopGains()
) -> np.ndarray:
    """Attitude virtual input u_2 = -k_R e_R - k_Omega e_Omega."""
    return -gains.k_R * np.asarray(e_R, dtype=float) - gains.k_Omega * np.asarray(
        e_Omega, dtype=float
    )


def torque_from_u2(
    u2: np.ndarray,
    state: RigidBodyState,
    R_d: np.ndarray,
    Omega_d: np.ndarray,
    Omega_d_dot: np.ndarray,
    params: RigidBodyParams,
) -> np.ndarray:
    """Body torque realizing e_Omega_dot = u_2 along the nominal model."""
    transport = np.einsum("...ji,...jk,...k->...i", state.R, R_d, Omega_d)
    transport_dot = np.einsum("...ji,...jk,...k->...i", state.R, R_d, Omega_d_dot)
    core = u2 - np.cross(state.Omega, transport) + transport_dot
    J_Om = np.einsum("...ij,...j->...i", params.inertia, state.Omega)
    return np.einsum("...ij,...j->...i", params.inertia, core) + np.cross(
        state.Omega, J_Om
    )


def outer_loop(
    agent: int,
    errors: Mapping[int, TrackingError],
    L_bar: GainBlock,
    K_row: Mapping[int, GainBlock],
) -> np.ndarray:
    """Virtual acceleration u_1 = L_bar e_i + sum_j K_ij e_j (j runs over the
    keys of ``K_row``, including the self block when present).

    Raises
    ------
    MissingGain
        If a coupling block references an agent with no supplied error.
    """
    if agent not in errors:
        raise MissingGain(f"no tracking error for agent {agent}")
    u1 = L_bar.apply(errors[agent].outer)
    for j, block in K_row.items():
        if j not in errors:
            raise MissingGain(f"gain ({agent}, {j}) but no error for agent {j}")
        u1 = u1 + block.apply(errors[j].outer)
    return u1


def stack_gain_rows(
    ids: Sequence[int],
    L_bar: Mapping[int, GainBlock],
    K: Mapping[tuple[int, int], GainBlock],
) -> np.ndarray:
    """Dense (3N, 6N) map from stacked outer errors to stacked u_1.

    Row block i is [.. K_ij .. | L_bar_ii + K_ii | .. ] in the order of ``ids``.
    """
    n = len(ids)
    col = {agent: k for k, agent in enumerate(ids)}
    out = np.zeros((3 * n, 6 * n))
    for k, agent in enumerate(ids):
        out[3 * k : 3 * k + 3, 6 * k : 6 * k + 6] = L_bar[agent].rows()
    for (i, j), block in K.items():
        if i not in col or j not in col:
            continue
        r, c = col[i], col[j]
        out[3 * r : 3 * r + 3, 6 * c : 6 * c + 6] += block.rows()
    return out


@dataclass(frozen=True)
class GrowthConstants:
    """Interaction growth bound: |coupling force| <= k_f when the stacked
    error is below c_f, with k_f c_f = 2 input_bound."""

    k_f: float
    c_f: float
    sigma_star: float


def growth_constants(
    masses: Sequence[float],
    L_bar: Mapping[int, GainBlock],
    K: Mapping[tuple[int, int], GainBlock],
    input_bound: float,
) -> GrowthConstants:
    """Force-level growth constants from the gain set.

    sigma_star is the larger of the spectral norms of the decoupled local part
    blkdiag(L_bar) and of the dense coupling map; k_f = 2 sqrt(2) max(m) sigma_star
    and c_f = input_bound / (sqrt(2) max(m) sigma_star).
    """
    ids = sorted(L_bar)
    local = np.zeros((3 * len(ids), 6 * len(ids)))
    for k, agent in enumerate(ids):
        local[3 * k : 3 * k + 3, 6 * k : 6 * k + 6] = L_bar[agent].rows()
    dense_k = np.zeros_like(local)
    col = {agent: k for k, agent in enumerate(ids)}
    for (i, j), block in K.items():
        dense_k[3 * col[i] : 3 * col[i] + 3, 6 * col[j] : 6 * col[j] + 6] += block.rows()
    sigma_star = max(np.linalg.norm(local, 2), np.linalg.norm(dense_k, 2))
    if sigma_star <= 0.0:
        raise DegenerateGains("all gains are zero")
    if input_bound <= 0.0:
        raise ValueError("input_bound must be positive")
    m_max = float(np.max(masses))
    scale = np.sqrt(2.0) * m_max * sigma_star
    return GrowthConstants(k_f=2.0 * scale, c_f=input_bound / scale, sigma_star=sigma_star)
