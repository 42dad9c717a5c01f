"""Rotation primitives and the desired-attitude planner.

Walks the SO(3) toolbox (hat/vee, exponential map, error maps) and then runs
the planner along a curved trajectory, showing how the desired frame banks
with the commanded acceleration and how the finite-difference body rates
settle once history is available.
"""

import numpy as np

from meshnet.control import nominal_force_from_u1
from meshnet.geometry import (
    exp_so3,
    hat,
    plan_attitude,
    rotation_error,
    vee,
)

print("== skew maps ==")
w = np.array([0.3, -1.2, 0.8])
W = hat(w)
print("hat(w) =\n", W)
print("vee(hat(w)) == w:", np.array_equal(vee(W), w))
print("hat is skew:", np.allclose(W + W.T, 0.0))

print()
print("== exponential map ==")
# quarter turn about z
R = exp_so3(np.array([0.0, 0.0, np.pi / 2]))
print("exp(pi/2 e3) @ e1 =", np.round(R @ [1.0, 0.0, 0.0], 12))
print("orthonormal to", np.max(np.abs(R.T @ R - np.eye(3))))

print()
print("== attitude error between two frames ==")
R_a = exp_so3(np.array([0.2, 0.0, 0.0]))
R_b = exp_so3(np.array([0.2, 0.0, 0.4]))
print("e_R(R_a, R_a) =", rotation_error(R_a, R_a))
print("e_R(R_a, R_b) =", np.round(rotation_error(R_a, R_b), 6))

print()
print("== planning along a figure-weaving trajectory ==")
dt = 1e-3
mass = np.array([0.55])
plan = None
for k in range(5):
    t = k * dt
    # desired kinematics of a gentle weave
    a_d = np.array([[0.8 * np.cos(t), -0.4 * np.sin(t), 0.2]])
    v_d = np.array([[1.0, 0.3 * t, 0.0]])
    f_d = nominal_force_from_u1(np.zeros((1, 3)), a_d, mass)
    plan = plan_attitude(f_d, v_d, prev=plan, dt=dt)
    tilt = np.degrees(np.arccos(plan.R_d[0, 2, 2]))
    print(
        f"t={t:.3f}  tilt {tilt:5.2f} deg  "
        f"|Omega_d| {np.linalg.norm(plan.Omega_d[0]):.4f}  "
        f"|Omega_d_dot| {np.linalg.norm(plan.Omega_d_dot[0]):.4f}"
    )
print("first step has zero rates (no history); the one-step spike in the")
print("rate derivative is the backward difference warming up against it")
