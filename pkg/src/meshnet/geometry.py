"""SO(3) utilities and attitude planning for thrust-vectored rigid bodies.

All functions broadcast over leading axes, so a single body ((3,) vectors,
(3, 3) matrices) and a stacked network ((N, 3), (N, 3, 3)) share one code path.

Frame conventions: world z points down the gravity direction (gravity enters
the translational dynamics as +g*e3), body thrust acts along -R@e3.  Hovering
with identity attitude therefore needs a nominal force f_d = -m*g*e3.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "TOL_ORTH",
    "TOL_SKEW",
    "EPS_THRUST",
    "EPS_VELOCITY",
    "EPS_ALIGN",
    "NotSkew",
    "NotRotation",
    "DegenerateThrust",
    "DegenerateAxes",
    "hat",
    "vee",
    "exp_so3",
    "is_rotation",
    "assert_rotation",
    "rotation_error",
    "angular_velocity_error",
    "trace_op",
    "DesiredAttitude",
    "plan_attitude",
]

# Default tolerances; every public function takes them as keyword overrides.
TOL_ORTH = 1e-9
TOL_SKEW = 1e-9
EPS_THRUST = 1e-8
EPS_VELOCITY = 1e-8
EPS_ALIGN = 1e-6


class NotSkew(ValueError):
    """Input to vee() is not antisymmetric within tolerance."""


class NotRotation(ValueError):
    """Matrix failed the orthonormality / determinant check."""


class DegenerateThrust(ValueError):
    """Nominal force too small to define a thrust axis."""


class DegenerateAxes(ValueError):
    """Desired velocity (nearly) parallel to the thrust axis."""


def hat(v: np.ndarray) -> np.ndarray:
    """Map vectors to skew-symmetric matrices, hat(v) @ w == cross(v, w).

    Parameters
    ----------
    v : ndarray, shape (..., 3)

    Returns
    -------
    ndarray, shape (..., 3, 3)
    """
    v = np.asarray(v, dtype=float)
    if v.shape[-1] != 3:
        raise ValueError(f"expected trailing dimension 3, got shape {v.shape}")
    m = np.zeros(v.shape[:-1] + (3, 3))
    m[..., 0, 1] = -v[..., 2]
    m[..., 0, 2] = v[..., 1]
    m[..., 1, 0] = v[..., 2]
    m[..., 1, 2] = -v[..., 0]
    m[..., 2, 0] = -v[..., 1]
    m[..., 2, 1] = v[..., 0]
    return m


def _vee_raw(m: np.ndarray) -> np.ndarray:
    # No antisymmetry check; callers pass matrices that are skew by construction.
    return np.stack([m[..., 2, 1], m[..., 0, 2], m[..., 1, 0]], axis=-1)


def vee(m: np.ndarray, *, tol_skew: float = TOL_SKEW) -> np.ndarray:
    """Inverse of hat() for antisymmetric matrices.

    Raises
    ------
    NotSkew
        If max|m + m^T| exceeds ``tol_skew``.
    """
    m = np.asarray(m, dtype=float)
    if m.shape[-2:] != (3, 3):
        raise ValueError(f"expected trailing shape (3, 3), got {m.shape}")
    asym = np.max(np.abs(m + np.swapaxes(m, -1, -2)))
    if asym > tol_skew:
        raise NotSkew(f"max|m + m^T| = {asym:.3e} exceeds tol_skew = {tol_skew:.3e}")
    return _vee_raw(m)


def exp_so3(theta: np.ndarray) -> np.ndarray:
    """Rodrigues formula: matrix exponential of hat(theta).

    Uses the series expansion of sin(a)/a and (1-cos(a))/a^2 below a = 1e-8,
    where the closed form loses digits.
    """
    theta = np.asarray(theta, dtype=float)
    a = np.linalg.norm(theta, axis=-1)
    small = a < 1e-8
    a_safe = np.where(small, 1.0, a)
    s = np.where(small, 1.0 - a**2 / 6.0, np.sin(a_safe) / a_safe)
    c = np.where(small, 0.5 - a**2 / 24.0, (1.0 - np.cos(a_safe)) / a_safe**2)
    k = hat(theta)
    eye = np.broadcast_to(np.eye(3), k.shape)
    return eye + s[..., None, None] * k + c[..., None, None] * (k @ k)


def is_rotation(R: np.ndarray, *, tol_orth: float = TOL_ORTH) -> bool:
    """True iff every matrix satisfies R^T R = I and det R = 1 within tolerance."""
    R = np.asarray(R, dtype=float)
    if R.shape[-2:] != (3, 3):
        return False
    eye = np.eye(3)
    orth = np.max(np.abs(np.swapaxes(R, -1, -2) @ R - eye))
    det = np.max(np.abs(np.linalg.det(R) - 1.0))
    return bool(orth <= tol_orth and det <= tol_orth)


def assert_rotation(R: np.ndarray, *, tol_orth: float = TOL_ORTH, label: str = "R") -> None:
    """Raise NotRotation with a diagnostic if the orthonormality check fails."""
    R = np.asarray(R, dtype=float)
    eye = np.eye(3)
    orth = np.max(np.abs(np.swapaxes(R, -1, -2) @ R - eye))
    det = np.max(np.abs(np.linalg.det(R) - 1.0))
    if orth > tol_orth or det > tol_orth:
        raise NotRotation(
            f"{label}: |R^T R - I| = {orth:.3e}, |det - 1| = {det:.3e} "
            f"(tol = {tol_orth:.3e})"
        )


def rotation_error(R: np.ndarray, R_d: np.ndarray) -> np.ndarray:
    """Attitude tracking error e_R = 0.5 * vee(R_e - R_e^T), R_e = R_d^T R.

    Each component is the sine of a relative angle, so |e_R| <= 1.
    """
    R = np.asarray(R, dtype=float)
    R_d = np.asarray(R_d, dtype=float)
    R_e = np.swapaxes(R_d, -1, -2) @ R
    return 0.5 * _vee_raw(R_e - np.swapaxes(R_e, -1, -2))


def angular_velocity_error(
    Omega: np.ndarray, R: np.ndarray, R_d: np.ndarray, Omega_d: np.ndarray
) -> np.ndarray:
    """Body-rate tracking error e_Omega = Omega - R_e^T Omega_d."""
    R_e = np.swapaxes(np.asarray(R_d, dtype=float), -1, -2) @ np.asarray(R, dtype=float)
    Omega_d = np.asarray(Omega_d, dtype=float)
    return np.asarray(Omega, dtype=float) - np.einsum("...ji,...j->...i", R_e, Omega_d)


def trace_op(m: np.ndarray) -> np.ndarray:
    """C(m) = 0.5 * (tr(m) I - m^T); satisfies d/dt e_R = C(R_e) e_Omega."""
    m = np.asarray(m, dtype=float)
    tr = np.trace(m, axis1=-2, axis2=-1)
    eye = np.broadcast_to(np.eye(3), m.shape)
    return 0.5 * (tr[..., None, None] * eye - np.swapaxes(m, -1, -2))


@dataclass
class DesiredAttitude:
    """Planner output: desired frame plus finite-difference body rates.

    Attributes
    ----------
    R_d : ndarray (..., 3, 3)
        Desired rotation; columns are [transverse, binormal, thrust axis].
    Omega_d, Omega_d_dot : ndarray (..., 3)
        Desired body angular velocity and its backward-difference derivative.
        Zero on the first planning step (no history).
    b1 : ndarray (..., 3)
        Heading reference actually used (retained as the fallback for later
        steps where the desired velocity degenerates).
    b3 : ndarray (..., 3)
        Thrust axis -f_d/|f_d|.
    """

    R_d: np.ndarray
    Omega_d: np.ndarray
    Omega_d_dot: np.ndarray
    b1: np.ndarray
    b3: np.ndarray


def _normalize(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def plan_attitude(
    f_d: np.ndarray,
    v_d: np.ndarray,
    prev: DesiredAttitude | None = None,
    dt: float | None = None,
    *,
    eps_thrust: float = EPS_THRUST,
    eps_velocity: float = EPS_VELOCITY,
    eps_align: float = EPS_ALIGN,
) -> DesiredAttitude:
    """Build the desired attitude from a nominal force and desired velocity.

    The thrust axis is b3 = -f_d/|f_d|; the heading reference is
    b1 = v_d/|v_d| (falling back to the previous b1, then to world x, when
    |v_d| <= eps_velocity).  Columns:

        col1 = -(hat(b3)^2 b1) / |hat(b3)^2 b1|   (= component of b1 normal to b3)
        col2 = (hat(b3) b1) / |hat(b3) b1|
        col3 = b3

    followed by a Gram-Schmidt polish.  Desired rates come from central /
    backward differences against ``prev``:

        Omega_d     = vee(R_prev^T R - R^T R_prev) / (2 dt)
        Omega_d_dot = (Omega_d - Omega_d_prev) / dt

    and are zero when there is no history.

    Raises
    ------
    DegenerateThrust
        If any |f_d| <= eps_thrust.
    DegenerateAxes
        If the heading reference is within eps_align of the thrust axis.
    """
    f_d = np.asarray(f_d, dtype=float)
    v_d = np.asarray(v_d, dtype=float)
    f_norm = np.linalg.norm(f_d, axis=-1)
    if np.any(f_norm <= eps_thrust):
        raise DegenerateThrust(f"|f_d| = {np.min(f_norm):.3e} <= {eps_thrust:.3e}")
    b3 = -f_d / f_norm[..., None]

    v_norm = np.linalg.norm(v_d, axis=-1)
    if prev is not None:
        fallback = np.broadcast_to(prev.b1, b3.shape)
    else:
        fallback = np.broadcast_to(np.array([1.0, 0.0, 0.0]), b3.shape)
    v_ok = v_norm > eps_velocity
    b1 = np.where(
        v_ok[..., None],
        v_d / np.where(v_ok, v_norm, 1.0)[..., None],
        fallback,
    )

    # -(hat(b3)^2 b1) = (I - b3 b3^T) b1 for unit b3.
    c1 = b1 - b3 * np.sum(b3 * b1, axis=-1, keepdims=True)
    n1 = np.linalg.norm(c1, axis=-1)
    if np.any(n1 <= eps_align):
        raise DegenerateAxes(
            f"heading is within {eps_align:.1e} of the thrust axis (|proj| = {np.min(n1):.3e})"
        )
    q1 = c1 / n1[..., None]
    c2 = np.cross(b3, b1)
    q2 = _normalize(c2)
    # Gram-Schmidt polish; q1/q2/b3 are orthonormal up to roundoff already.
    q2 = _normalize(q2 - q1 * np.sum(q1 * q2, axis=-1, keepdims=True))
    q3 = np.cross(q1, q2)
    R_d = np.stack([q1, q2, q3], axis=-1)

    if prev is None or dt is None:
        Omega_d = np.zeros_like(b3)
        Omega_d_dot = np.zeros_like(b3)
    else:
        rel = np.swapaxes(prev.R_d, -1, -2) @ R_d
        Omega_d = _vee_raw(rel - np.swapaxes(rel, -1, -2)) / (2.0 * dt)
        Omega_d_dot = (Omega_d - prev.Omega_d) / dt

    return DesiredAttitude(R_d=R_d, Omega_d=Omega_d, Omega_d_dot=Omega_d_dot, b1=b1, b3=b3)
