"""Rigid-body dynamics, reference trajectories, and a Lie-group RK4 stepper.

Equations of motion (world z along gravity, thrust along -R@e3):

    x_dot     = v
    m v_dot   = -f R e3 + m g e3 + d_v
    R_dot     = R hat(Omega)
    J Omega_dot = -Omega x (J Omega) + M + d_Omega

The stepper is a Munthe-Kaas RK4: the attitude is integrated in exponential
coordinates theta (R(t0 + s) = R(t0) exp(hat(theta(s)))) with the truncated
dexpinv

    theta_dot = Omega + 0.5 theta x Omega + (1/12) theta x (theta x Omega),

which keeps 4th order for the coupled system and returns bit-exact SO(3)
elements up to roundoff (no projection step).  Control and disturbance inputs
are held constant over each step.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from numpy.random import Generator, Philox

from .geometry import TOL_ORTH, assert_rotation, exp_so3

__all__ = [
    "GRAVITY",
    "E3",
    "DT_MAX",
    "IntegrationDiverged",
    "RigidBodyParams",
    "RigidBodyState",
    "ControlInput",
    "DisturbanceModel",
    "derivative",
    "step",
    "Trajectory",
    "ConstantTrajectory",
    "SinusoidTrajectory",
    "PiecewiseTrajectory",
]

GRAVITY = 9.81
E3 = np.array([0.0, 0.0, 1.0])
DT_MAX = 1e-2


class IntegrationDiverged(RuntimeError):
    """Non-finite state or broken rotation invariant after a step."""


@dataclass(frozen=True)
class RigidBodyParams:
    """Mass and inertia, scalar for one body or stacked (N,) / (N, 3, 3).

    ``uncertainty_pct`` is the half-width of the multiplicative uniform
    perturbation applied by :meth:`perturbed` (0.1 means +/-10%).
    """

    mass: float | np.ndarray
    inertia: np.ndarray
    uncertainty_pct: float = 0.0

    def __post_init__(self) -> None:
        mass = np.asarray(self.mass, dtype=float)
        inertia = np.asarray(self.inertia, dtype=float)
        if inertia.shape[-1] == 3 and inertia.ndim >= 1 and inertia.shape[-2:] != (3, 3):
            # Accept principal moments as a (…, 3) vector.
            inertia = inertia[..., None] * np.eye(3)
        if np.any(mass <= 0.0):
            raise ValueError("mass must be positive")
        sym = np.max(np.abs(inertia - np.swapaxes(inertia, -1, -2)))
        if sym > 1e-12:
            raise ValueError(f"inertia must be symmetric (max asym {sym:.2e})")
        eigs = np.linalg.eigvalsh(inertia)
        if np.any(eigs <= 0.0):
            raise ValueError("inertia must be positive definite")
        if not 0.0 <= self.uncertainty_pct < 1.0:
            raise ValueError("uncertainty_pct must lie in [0, 1)")
        object.__setattr__(self, "mass", mass if mass.ndim else float(mass))
        object.__setattr__(self, "inertia", inertia)
        object.__setattr__(self, "inertia_inv", np.linalg.inv(inertia))

    # Filled in by __post_init__; declared for type checkers.
    inertia_inv: np.ndarray = field(init=False, repr=False, compare=False)

    def perturbed(self, rng: Generator) -> "RigidBodyParams":
        """Draw a multiplicative +/-uncertainty_pct instance (mass and each
        principal moment get independent factors)."""
        p = self.uncertainty_pct
        if p == 0.0:
            return self
        mass = np.asarray(self.mass) * rng.uniform(1.0 - p, 1.0 + p, size=np.shape(self.mass))
        d = rng.uniform(1.0 - p, 1.0 + p, size=self.inertia.shape[:-2] + (3,))
        inertia = self.inertia * d[..., None, :]  # scale columns
        inertia = 0.5 * (inertia + np.swapaxes(inertia, -1, -2))
        return RigidBodyParams(
            mass=float(mass) if np.ndim(mass) == 0 else mass,
            inertia=inertia,
            uncertainty_pct=p,
        )


@dataclass
class RigidBodyState:
    """Position, velocity, attitude, body angular velocity (broadcastable)."""

    x: np.ndarray
    v: np.ndarray
    R: np.ndarray
    Omega: np.ndarray

    def __post_init__(self) -> None:
        self.x = np.asarray(self.x, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        self.R = np.asarray(self.R, dtype=float)
        self.Omega = np.asarray(self.Omega, dtype=float)

    def copy(self) -> "RigidBodyState":
        return RigidBodyState(self.x.copy(), self.v.copy(), self.R.copy(), self.Omega.copy())

    @classmethod
    def rest(cls, x: np.ndarray) -> "RigidBodyState":
        x = np.asarray(x, dtype=float)
        eye = np.broadcast_to(np.eye(3), x.shape[:-1] + (3, 3)).copy()
        return cls(x=x.copy(), v=np.zeros_like(x), R=eye, Omega=np.zeros_like(x))


@dataclass(frozen=True)
class ControlInput:
    """Collective thrust magnitude f and body torque M, held over one step."""

    f: float | np.ndarray
    M: np.ndarray


@dataclass(frozen=True)
class DisturbanceModel:
    """Per-step i.i.d. N(0, sigma^2 I3) force and torque disturbances.

    Streams are counter-based (Philox keyed on the seed, counter carrying
    (step, agent)), so each (agent, step) pair has a fixed draw regardless of
    how many agents exist or in what order they are sampled.
    """

    sigma: float = 0.1
    seed: int = 0
    enabled: bool = True

    def sample(self, agent: int, step: int) -> tuple[np.ndarray, np.ndarray]:
        """Return (d_v, d_Omega) for one agent at one step index."""
        if not self.enabled or self.sigma == 0.0:
            z = np.zeros(3)
            return z, z.copy()
        gen = Generator(Philox(key=[self.seed, 0], counter=[0, step, agent, 0]))
        draw = gen.normal(0.0, self.sigma, 6)
        return draw[:3], draw[3:]

    def sample_stack(self, agents: Sequence[int], step: int) -> tuple[np.ndarray, np.ndarray]:
        """Stacked (N, 3) draws for a set of agent ids at one step."""
        if not self.enabled or self.sigma == 0.0:
            z = np.zeros((len(agents), 3))
            return z, z.copy()
        d_v = np.empty((len(agents), 3))
        d_Om = np.empty((len(agents), 3))
        for row, agent in enumerate(agents):
            d_v[row], d_Om[row] = self.sample(agent, step)
        return d_v, d_Om


def derivative(
    state: RigidBodyState,
    control: ControlInput,
    params: RigidBodyParams,
    d_v: np.ndarray | None = None,
    d_Omega: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Time derivatives (x_dot, v_dot, Omega_dot) at the given state.

    The attitude derivative is R hat(Omega) by definition and is not returned;
    the stepper integrates attitude in exponential coordinates instead.
    """
    m = np.asarray(params.mass, dtype=float)
    f = np.asarray(control.f, dtype=float)
    d_v = 0.0 if d_v is None else np.asarray(d_v, dtype=float)
    d_Omega = 0.0 if d_Omega is None else np.asarray(d_Omega, dtype=float)
    thrust = -f[..., None] * (state.R @ E3)
    v_dot = (thrust + m[..., None] * GRAVITY * E3 + d_v) / m[..., None]
    J_Om = np.einsum("...ij,...j->...i", params.inertia, state.Omega)
    torque = -np.cross(state.Omega, J_Om) + control.M + d_Omega
    Omega_dot = np.einsum("...ij,...j->...i", params.inertia_inv, torque)
    return state.v.copy(), v_dot, Omega_dot


def _dexpinv(theta: np.ndarray, Omega: np.ndarray) -> np.ndarray:
    # dexpinv_{-theta}(Omega) for the body-frame convention R_dot = R hat(Omega):
    # the first commutator enters with +1/2 (it would be -1/2 for hat(Omega) R).
    # Truncation after the double commutator is sufficient for 4th order.
    c1 = np.cross(theta, Omega)
    return Omega + 0.5 * c1 + (1.0 / 12.0) * np.cross(theta, c1)


def step(
    state: RigidBodyState,
    control: ControlInput,
    params: RigidBodyParams,
    dt: float,
    d_v: np.ndarray | None = None,
    d_Omega: np.ndarray | None = None,
    *,
    check: bool = True,
    tol_orth: float = TOL_ORTH,
) -> RigidBodyState:
    """Advance one step of size dt with zero-order-hold inputs.

    Raises
    ------
    IntegrationDiverged
        If the new state contains non-finite entries or (with ``check=True``)
        the attitude drifts off SO(3) beyond ``tol_orth``.
    """
    if not 0.0 < dt:
        raise ValueError("dt must be positive")
    m = np.asarray(params.mass, dtype=float)
    f = np.asarray(control.f, dtype=float)
    M = np.asarray(control.M, dtype=float)
    d_v_arr = 0.0 if d_v is None else np.asarray(d_v, dtype=float)
    d_Om_arr = 0.0 if d_Omega is None else np.asarray(d_Omega, dtype=float)
    J = params.inertia
    J_inv = params.inertia_inv
    R0 = state.R
    g_e3 = GRAVITY * E3

    def rhs(v, th, Om):
        Rs = R0 @ exp_so3(th)
        v_dot = (-f[..., None] * (Rs @ E3)) / m[..., None] + g_e3 + d_v_arr / m[..., None]
        J_Om = np.einsum("...ij,...j->...i", J, Om)
        Om_dot = np.einsum(
            "...ij,...j->...i", J_inv, -np.cross(Om, J_Om) + M + d_Om_arr
        )
        return v, v_dot, _dexpinv(th, Om), Om_dot

    zero = np.zeros_like(state.Omega)
    # Non-finite inputs are caught by the finiteness check below; silence the
    # intermediate IEEE noise they would generate.
    with np.errstate(invalid="ignore", over="ignore"):
        k1 = rhs(state.v, zero, state.Omega)
        k2 = rhs(state.v + 0.5 * dt * k1[1], 0.5 * dt * k1[2], state.Omega + 0.5 * dt * k1[3])
        k3 = rhs(state.v + 0.5 * dt * k2[1], 0.5 * dt * k2[2], state.Omega + 0.5 * dt * k2[3])
        k4 = rhs(state.v + dt * k3[1], dt * k3[2], state.Omega + dt * k3[3])

    def comb(idx):
        return (dt / 6.0) * (k1[idx] + 2.0 * k2[idx] + 2.0 * k3[idx] + k4[idx])

    new = RigidBodyState(
        x=state.x + comb(0),
        v=state.v + comb(1),
        R=R0 @ exp_so3(comb(2)),
        Omega=state.Omega + comb(3),
    )
    finite = (
        np.all(np.isfinite(new.x))
        and np.all(np.isfinite(new.v))
        and np.all(np.isfinite(new.R))
        and np.all(np.isfinite(new.Omega))
    )
    if not finite:
        raise IntegrationDiverged("non-finite state after step")
    if check:
        try:
            assert_rotation(new.R, tol_orth=tol_orth)
        except Exception as exc:  # re-tag with the dynamics error type
            raise IntegrationDiverged(str(exc)) from exc
    return new


class Trajectory:
    """Closed-form desired path: position / velocity / acceleration of t."""

    def position(self, t: float) -> np.ndarray:
        raise NotImplementedError

    def velocity(self, t: float) -> np.ndarray:
        raise NotImplementedError

    def acceleration(self, t: float) -> np.ndarray:
        raise NotImplementedError

    def shifted(self, offset: np.ndarray) -> "Trajectory":
        """Same motion displaced by a constant offset (virtual-leader grids)."""
        return _ShiftedTrajectory(self, np.asarray(offset, dtype=float))


@dataclass
class _ShiftedTrajectory(Trajectory):
    base: Trajectory
    offset: np.ndarray

    def position(self, t):
        return self.base.position(t) + self.offset

    def velocity(self, t):
        return self.base.velocity(t)

    def acceleration(self, t):
        return self.base.acceleration(t)


@dataclass
class ConstantTrajectory(Trajectory):
    """Fixed point or constant-velocity line."""

    x0: np.ndarray
    v0: np.ndarray | None = None

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float)
        self.v0 = np.zeros(3) if self.v0 is None else np.asarray(self.v0, dtype=float)

    def position(self, t):
        return self.x0 + np.multiply.outer(np.asarray(t, dtype=float), self.v0)

    def velocity(self, t):
        return np.broadcast_to(self.v0, np.shape(t) + (3,)).copy()

    def acceleration(self, t):
        return np.zeros(np.shape(t) + (3,))


@dataclass
class SinusoidTrajectory(Trajectory):
    """Forward motion along x with a sinusoidal lateral velocity:

    v_d(t) = [forward_speed, lateral_amplitude cos(frequency t), 0].
    """

    x0: np.ndarray
    forward_speed: float = 1.0
    lateral_amplitude: float = 2.0
    frequency: float = 2.0

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float)
        if self.frequency <= 0.0:
            raise ValueError("frequency must be positive")

    def position(self, t):
        t = np.asarray(t, dtype=float)
        w = self.frequency
        out = np.zeros(t.shape + (3,))
        out[..., 0] = self.forward_speed * t
        out[..., 1] = (self.lateral_amplitude / w) * np.sin(w * t)
        return self.x0 + out

    def velocity(self, t):
        t = np.asarray(t, dtype=float)
        out = np.zeros(t.shape + (3,))
        out[..., 0] = self.forward_speed
        out[..., 1] = self.lateral_amplitude * np.cos(self.frequency * t)
        return out

    def acceleration(self, t):
        t = np.asarray(t, dtype=float)
        out = np.zeros(t.shape + (3,))
        out[..., 1] = -self.lateral_amplitude * self.frequency * np.sin(self.frequency * t)
        return out


@dataclass
class PiecewiseTrajectory(Trajectory):
    """Time-chained segments, each a (duration, Trajectory) pair.

    Positions are chained continuously: segment k is evaluated on local time
    and displaced so it starts where segment k-1 ended.  Beyond the last
    segment the final one keeps running.
    """

    segments: Sequence[tuple[float, Trajectory]]

    def __post_init__(self):
        if not self.segments:
            raise ValueError("need at least one segment")
        starts = [0.0]
        offsets = [np.zeros(3)]
        for k, (dur, seg) in enumerate(self.segments[:-1]):
            if dur <= 0.0:
                raise ValueError("segment durations must be positive")
            end_pos = offsets[k] + seg.position(dur)
            nxt = self.segments[k + 1][1]
            offsets.append(end_pos - nxt.position(0.0))
            starts.append(starts[k] + dur)
        self._starts = starts
        self._offsets = offsets

    def _locate(self, t: float) -> tuple[Trajectory, float, np.ndarray]:
        k = len(self._starts) - 1
        while k > 0 and t < self._starts[k]:
            k -= 1
        return self.segments[k][1], t - self._starts[k], self._offsets[k]

    def position(self, t):
        if np.ndim(t):
            return np.stack([self.position(float(ti)) for ti in np.asarray(t)])
        seg, tau, off = self._locate(float(t))
        return off + seg.position(tau)

    def velocity(self, t):
        if np.ndim(t):
            return np.stack([self.velocity(float(ti)) for ti in np.asarray(t)])
        seg, tau, _ = self._locate(float(t))
        return seg.velocity(tau)

    def acceleration(self, t):
        if np.ndim(t):
            return np.stack([self.acceleration(float(ti)) for ti in np.asarray(t)])
        seg, tau, _ = self._locate(float(t))
        return seg.acceleration(tau)
