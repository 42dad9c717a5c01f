"""Closed-loop network simulation with join/leave events.

The loop is fully vectorized over the current roster: one stacked state, one
dense gain map, one batched attitude plan per step.  Membership changes
re-slice the stacked arrays; the per-agent time series are split out of the
step buffers only when the roster changes or the run ends.

Per step (pre-step quantities are logged, the terminal state is not):

1. run any events scheduled at this step (synthesis happens between steps),
2. leader trajectory -> per-agent references x_d, v_d, a_d,
3. outer loop u_1 from the stacked translation errors,
4. nominal force f_d, planned attitude, thrust f, torque M,
5. disturbance draw, residual channel w_v, log,
6. integrate one RK4 step with the true (perturbed) parameters.

``w_v`` is the realized translational residual v_dot - a_d - u_1: the
disturbance plus thrust-direction coupling plus parameter mismatch, i.e. the
exogenous input of the outer error dynamics.  The explicit neighbor feedback
is part of u_1, not of w_v.
"""

from __future__ import annotations

from bisect import bisect_left
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..codesign import (
    AgentRecord,
    TopologySolution,
    apply_join,
    apply_leave,
    decentralized_step,
    local_synthesis,
)
from ..control import (
    GainBlock,
    coupling_term,
    inner_loop,
    nominal_force_from_u1,
    stack_gain_rows,
    thrust_from_nominal,
    torque_from_u2,
)
from ..dynamics import (
    E3,
    GRAVITY,
    ControlInput,
    RigidBodyParams,
    RigidBodyState,
    step as integrate_step,
)
from ..geometry import (
    DesiredAttitude,
    angular_velocity_error,
    plan_attitude,
    rotation_error,
)
from ..lmi import Infeasible
from .metrics import Metrics, compute_metrics
from .scenario import JoinEvent, LeaveEvent, ScenarioConfig

__all__ = ["EventRecord", "AgentTrace", "SimOutput", "run"]


@dataclass(frozen=True)
class EventRecord:
    """One executed membership event and the network budget after it."""

    step: int
    time: float
    action: str
    agent: int
    neighbors: tuple[int, ...]
    gamma: float


@dataclass
class AgentTrace:
    """Logged time series of one agent over its whole presence.

    All arrays share the leading sample axis; ``steps`` holds the global step
    index of each sample (samples are taken before integrating that step).
    """

    agent: int
    steps: np.ndarray
    t: np.ndarray
    x: np.ndarray
    v: np.ndarray
    R: np.ndarray
    Omega: np.ndarray
    e_x: np.ndarray
    e_v: np.ndarray
    e_R: np.ndarray
    e_Omega: np.ndarray
    f: np.ndarray
    M: np.ndarray
    d_v: np.ndarray
    d_Omega: np.ndarray
    coupling_mag: np.ndarray
    w_v: np.ndarray

    def __len__(self) -> int:
        return len(self.t)

    @property
    def outer(self) -> np.ndarray:
        """Stacked translation error (S, 6)."""
        return np.concatenate([self.e_x, self.e_v], axis=-1)

    @property
    def inner(self) -> np.ndarray:
        """Stacked attitude error (S, 6)."""
        return np.concatenate([self.e_R, self.e_Omega], axis=-1)


@dataclass
class SimOutput:
    """Everything a run produced: traces, event log, final gains."""

    scenario: ScenarioConfig
    dt: float
    n_steps: int
    log_every: int
    traces: dict[int, AgentTrace]
    events: list[EventRecord]
    gains_final: TopologySolution
    departed: dict[int, tuple[AgentRecord, dict[int, GainBlock]]] = field(
        default_factory=dict
    )

    def record_for(self, agent: int) -> tuple[AgentRecord, dict[int, GainBlock]]:
        """Synthesis record and coupling row of any agent that ever flew."""
        if agent in self.gains_final.agents:
            return self.gains_final.agents[agent], self.gains_final.k_row(agent)
        if agent in self.departed:
            return self.departed[agent]
        raise KeyError(f"agent {agent} never appeared in this run")


# stacked per-step quantities captured into each trace
_FIELDS = (
    "x", "v", "R", "Omega", "e_x", "e_v", "e_R", "e_Omega",
    "f", "M", "d_v", "d_Omega", "coupling_mag", "w_v",
)


class _Accumulator:
    """Per-segment stacked buffers, split per agent at roster changes."""

    def __init__(self) -> None:
        self.per_agent: dict[int, dict[str, list[np.ndarray]]] = {}
        self._reset([])

    def _reset(self, ids: list[int]) -> None:
        self.ids = list(ids)
        self.steps: list[int] = []
        self.rows: dict[str, list[np.ndarray]] = {name: [] for name in _FIELDS}

    def log(self, step: int, values: Mapping[str, np.ndarray]) -> None:
        self.steps.append(step)
        for name in _FIELDS:
            self.rows[name].append(values[name])

    def roster_change(self, ids: list[int]) -> None:
        self.flush()
        self._reset(ids)

    def flush(self) -> None:
        if not self.steps:
            return
        steps = np.asarray(self.steps, dtype=int)
        stacked = {name: np.stack(vals) for name, vals in self.rows.items()}
        for pos, agent in enumerate(self.ids):
            acc = self.per_agent.setdefault(
                agent, {"steps": [], **{name: [] for name in _FIELDS}}
            )
            acc["steps"].append(steps)
            for name in _FIELDS:
                acc[name].append(stacked[name][:, pos])
        self.steps = []
        self.rows = {name: [] for name in _FIELDS}

    def traces(self, dt: float) -> dict[int, AgentTrace]:
        self.flush()
        out = {}
        for agent in sorted(self.per_agent):
            acc = self.per_agent[agent]
            steps = np.concatenate(acc["steps"])
            arrays = {name: np.concatenate(acc[name]) for name in _FIELDS}
            out[agent] = AgentTrace(agent=agent, steps=steps, t=steps * dt, **arrays)
        return out


class _Roster:
    """Sorted live-agent set with all stacked per-agent arrays."""

    def __init__(self, config: ScenarioConfig, solution: TopologySolution):
        self.config = config
        self.ids: list[int] = []
        self.offsets = np.zeros((0, 3))
        self.mass_nom = np.zeros(0)
        self.inertia_nom = np.zeros((0, 3, 3))
        self.mass_true = np.zeros(0)
        self.inertia_true = np.zeros((0, 3, 3))
        self.state = RigidBodyState(
            x=np.zeros((0, 3)), v=np.zeros((0, 3)),
            R=np.zeros((0, 3, 3)), Omega=np.zeros((0, 3)),
        )
        self.plan: DesiredAttitude | None = None
        self.K_bar = np.zeros((0, 0))
        self._rebuild_gains(solution)

    # -- membership ---------------------------------------------------------

    def add(
        self,
        agent: int,
        state0: RigidBodyState,
        solution: TopologySolution,
        plan_row: DesiredAttitude | None = None,
    ) -> None:
        pos = bisect_left(self.ids, agent)
        self.ids.insert(pos, agent)
        self.offsets = np.insert(self.offsets, pos, self.config.offset(agent), axis=0)
        nom, true = self.config.params_for(agent)
        self.mass_nom = np.insert(self.mass_nom, pos, nom.mass)
        self.inertia_nom = np.insert(self.inertia_nom, pos, nom.inertia, axis=0)
        self.mass_true = np.insert(self.mass_true, pos, true.mass)
        self.inertia_true = np.insert(self.inertia_true, pos, true.inertia, axis=0)
        self.state = RigidBodyState(
            x=np.insert(self.state.x, pos, state0.x, axis=0),
            v=np.insert(self.state.v, pos, state0.v, axis=0),
            R=np.insert(self.state.R, pos, state0.R, axis=0),
            Omega=np.insert(self.state.Omega, pos, state0.Omega, axis=0),
        )
        if self.plan is not None:
            # one-sample planner history so the differenced desired rates
            # are finite at the entrant's first step
            if plan_row is None:
                plan_row = DesiredAttitude(
                    R_d=np.eye(3)[None], Omega_d=np.zeros((1, 3)),
                    Omega_d_dot=np.zeros((1, 3)),
                    b1=np.array([[1.0, 0.0, 0.0]]), b3=np.array([[0.0, 0.0, 1.0]]),
                )
            self.plan = DesiredAttitude(
                R_d=np.insert(self.plan.R_d, pos, plan_row.R_d[0], axis=0),
                Omega_d=np.insert(self.plan.Omega_d, pos, plan_row.Omega_d[0], axis=0),
                Omega_d_dot=np.insert(
                    self.plan.Omega_d_dot, pos, plan_row.Omega_d_dot[0], axis=0
                ),
                b1=np.insert(self.plan.b1, pos, plan_row.b1[0], axis=0),
                b3=np.insert(self.plan.b3, pos, plan_row.b3[0], axis=0),
            )
        self._rebuild_gains(solution)

    def remove(self, agent: int, solution: TopologySolution) -> None:
        pos = self.ids.index(agent)
        self.ids.pop(pos)
        self.offsets = np.delete(self.offsets, pos, axis=0)
        self.mass_nom = np.delete(self.mass_nom, pos)
        self.inertia_nom = np.delete(self.inertia_nom, pos, axis=0)
        self.mass_true = np.delete(self.mass_true, pos)
        self.inertia_true = np.delete(self.inertia_true, pos, axis=0)
        self.state = RigidBodyState(
            x=np.delete(self.state.x, pos, axis=0),
            v=np.delete(self.state.v, pos, axis=0),
            R=np.delete(self.state.R, pos, axis=0),
            Omega=np.delete(self.state.Omega, pos, axis=0),
        )
        if self.plan is not None:
            self.plan = DesiredAttitude(
                R_d=np.delete(self.plan.R_d, pos, axis=0),
                Omega_d=np.delete(self.plan.Omega_d, pos, axis=0),
                Omega_d_dot=np.delete(self.plan.Omega_d_dot, pos, axis=0),
                b1=np.delete(self.plan.b1, pos, axis=0),
                b3=np.delete(self.plan.b3, pos, axis=0),
            )
        self._rebuild_gains(solution)

    def _rebuild_gains(self, solution: TopologySolution) -> None:
        if not self.ids:
            self.K_bar = np.zeros((0, 0))
            return
        self.K_bar = stack_gain_rows(
            self.ids,
            {i: solution.agents[i].L_bar for i in self.ids},
            solution.K,
        )

    # -- stacked parameter views ---------------------------------------------

    @property
    def params_nom(self) -> RigidBodyParams:
        return RigidBodyParams(mass=self.mass_nom, inertia=self.inertia_nom)

    @property
    def params_true(self) -> RigidBodyParams:
        return RigidBodyParams(mass=self.mass_true, inertia=self.inertia_true)


def _initial_state(config: ScenarioConfig, t: float, offset: np.ndarray) -> RigidBodyState:
    leader = config.leader()
    x0 = leader.position(t) + offset
    state = RigidBodyState.rest(x0)
    if config.sim.initial == "on_trajectory":
        state.v = leader.velocity(t).copy()
    return state


def _join_state(
    config: ScenarioConfig, agent: int, t: float, dt: float
) -> tuple[RigidBodyState, DesiredAttitude]:
    """Rendezvous state for a mid-run join.

    An entrant merges in flight: position and velocity sit on its formation
    slot and the attitude and body rate match the planned frame there, the
    same way a vehicle would synchronize before handing itself over to the
    formation controller. Also returns the planner row one sample back so
    the differenced desired rates are sane at the entrant's first step.
    """
    leader = config.leader()
    nom, _ = config.params_for(agent)
    mass = np.array([nom.mass])
    zero_u1 = np.zeros((1, 3))
    plan = None
    for s in (t - 2.0 * dt, t - dt):
        f_d = nominal_force_from_u1(zero_u1, leader.acceleration(s), mass)
        plan = plan_attitude(f_d, leader.velocity(s).reshape(1, 3), prev=plan, dt=dt)
    state = RigidBodyState(
        x=leader.position(t) + config.offset(agent),
        v=leader.velocity(t).copy(),
        R=plan.R_d[0].copy(),
        Omega=plan.Omega_d[0].copy(),
    )
    return state, plan


def run(config: ScenarioConfig, gains: TopologySolution) -> tuple[SimOutput, Metrics]:
    """Simulate a scenario under a synthesized gain set.

    Raises
    ------
    ValueError
        If the gain set does not cover every initial agent.
    meshnet.lmi.Infeasible
        If synthesis at a join event fails (message carries event context).
    meshnet.dynamics.IntegrationDiverged
        If the closed loop blows up numerically.
    """
    initial = config.initial_ids()
    missing = sorted(set(initial) - set(gains.ids()))
    if missing:
        raise ValueError(f"gain set is missing initial agents {missing}")

    dt = config.sim.dt
    n_steps = config.sim.n_steps
    log_every = config.output.log_every
    leader = config.leader()
    inner_gains = config.inner_loop
    disturbance = config.disturbance

    events_at: dict[int, list[JoinEvent | LeaveEvent]] = {}
    for ev in config.events:
        events_at.setdefault(int(round(ev.time / dt)), []).append(ev)

    solution = gains
    departed: dict[int, tuple[AgentRecord, dict[int, GainBlock]]] = {}
    event_log: list[EventRecord] = []
    acc = _Accumulator()

    roster = _Roster(config, solution)
    for agent in initial:
        roster.add(agent, _initial_state(config, 0.0, config.offset(agent)), solution)
    acc.roster_change(roster.ids)

    def run_events(step_index: int) -> None:
        nonlocal solution
        t_event = step_index * dt
        for ev in events_at.get(step_index, ()):
            if isinstance(ev, JoinEvent):
                neighbors = config.neighbors_for_join(ev, roster.ids)
                profile = local_synthesis(
                    config.options_for(ev.agent), tolerances=solution.tolerances
                )
                try:
                    msg = decentralized_step(
                        solution,
                        profile,
                        ev.agent,
                        neighbors,
                        costs=config.synthesis.costs,
                        tolerances=solution.tolerances,
                    )
                except Infeasible as exc:
                    raise Infeasible(
                        f"join of agent {ev.agent} at t={t_event:g} "
                        f"(step {step_index}) is infeasible: {exc}"
                    ) from exc
                solution = apply_join(solution, msg)
                state0, plan_row = _join_state(config, ev.agent, t_event, dt)
                roster.add(ev.agent, state0, solution, plan_row)
                event_log.append(EventRecord(
                    step=step_index, time=t_event, action="join", agent=ev.agent,
                    neighbors=tuple(neighbors), gamma=solution.gamma,
                ))
            else:
                former = tuple(sorted(
                    j for (a, j) in solution.K if a == ev.agent and j != ev.agent
                ))
                departed[ev.agent] = (
                    solution.agents[ev.agent], solution.k_row(ev.agent)
                )
                solution = apply_leave(solution, ev.agent)
                roster.remove(ev.agent, solution)
                event_log.append(EventRecord(
                    step=step_index, time=t_event, action="leave", agent=ev.agent,
                    neighbors=former, gamma=solution.gamma,
                ))
            acc.roster_change(roster.ids)

    for k in range(n_steps):
        run_events(k)
        if not roster.ids:
            break
        t = k * dt
        n = len(roster.ids)
        state = roster.state

        x_d = leader.position(t) + roster.offsets
        v_d = np.broadcast_to(leader.velocity(t), (n, 3))
        a_d = leader.acceleration(t)

        e_x = state.x - x_d
        e_v = state.v - v_d
        err = np.concatenate([e_x, e_v], axis=-1)
        u1 = (roster.K_bar @ err.reshape(-1)).reshape(n, 3)

        f_d = nominal_force_from_u1(u1, a_d, roster.mass_nom)
        plan = plan_attitude(f_d, v_d, prev=roster.plan, dt=dt)
        roster.plan = plan

        e_R = rotation_error(state.R, plan.R_d)
        e_Omega = angular_velocity_error(state.Omega, state.R, plan.R_d, plan.Omega_d)
        f = thrust_from_nominal(f_d, state.R)
        u2 = inner_loop(e_R, e_Omega, inner_gains)
        M = torque_from_u2(u2, state, plan.R_d, plan.Omega_d, plan.Omega_d_dot,
                           roster.params_nom)
        X = coupling_term(f_d, state.R, plan.R_d)

        d_v, d_Omega = disturbance.sample_stack(roster.ids, k)
        m_true = roster.mass_true[:, None]
        w_v = (-f[:, None] * (state.R @ E3) + d_v) / m_true + GRAVITY * E3 - a_d - u1

        if k % log_every == 0:
            acc.log(k, {
                "x": state.x, "v": state.v, "R": state.R, "Omega": state.Omega,
                "e_x": e_x, "e_v": e_v, "e_R": e_R, "e_Omega": e_Omega,
                "f": np.asarray(f), "M": M, "d_v": d_v, "d_Omega": d_Omega,
                "coupling_mag": np.linalg.norm(X, axis=-1), "w_v": w_v,
            })

        roster.state = integrate_step(
            state, ControlInput(f=f, M=M), roster.params_true, dt,
            d_v=d_v, d_Omega=d_Omega,
        )

    # events scheduled exactly at the horizon still update the gain state
    run_events(n_steps)

    output = SimOutput(
        scenario=config,
        dt=dt,
        n_steps=n_steps,
        log_every=log_every,
        traces=acc.traces(dt),
        events=event_log,
        gains_final=solution,
        departed=departed,
    )
    return output, compute_metrics(output)
