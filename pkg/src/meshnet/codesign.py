"""Passivity-indexed gain synthesis and communication-topology co-design.

The pipeline has two layers:

1. :func:`local_synthesis` designs one vehicle's decoupled outer-loop gain
   L_bar together with a storage matrix R and passivity index pair (nu, rho),
   nu < 0 < rho, for the double-integrator error loop.  The program is solved
   in a rho-scaled variable set (P_tilde = rho P, L_tilde = L_bar P_tilde,
   nu_tilde = rho nu) in which every constraint is jointly affine; the
   original quantities are recovered afterwards.  A pull-to-reference term
   keeps the storage matrix axis-coupled, which the self-damping constraint
   below needs (a perfectly axis-decoupled R makes it infeasible because the
   self block's velocity gain carries a zero diagonal).

2. The co-design layer picks coupling gains K_ij on an allowed edge set plus
   multipliers p_i and an L2-gain budget, minimizing an l1 communication cost.
   :func:`centralized_codesign` solves one network-wide program;
   :func:`decentralized_codesign` adds one agent at a time, each step touching
   only the new agent's blocks.  The growing network certificate is kept
   positive definite through a Schur-complement lift against the stored
   factorization chain, so earlier agents' gains are never recomputed: a join
   only appends, a leave only deletes and refactorizes bookkeeping.

Scaled coupling variables: Q_ij = -p_i nu_i K_ij.  Self blocks K_ii act like
extra local feedback but live in the coupling bookkeeping: each agent tracks
K_i0 = K_ii + sum_j K_ij, so membership changes update K_i0 instead of ever
rewriting K_ii.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.linalg import solve_continuous_lyapunov

import cvxpy as cp

from .certificates import chain_diag_block, chain_off_block
from .control import GainBlock
from .geometry import exp_so3
from .lmi import (
    Infeasible,
    LmiProblem,
    NumericalFailure,
    SylvesterFactors,
    ToleranceConfig,
    spectral_bound_constraint,
    sylvester_step,
)

__all__ = [
    "EpsilonTooSmall",
    "SmsParameters",
    "sms_parameters",
    "SynthesisOptions",
    "randomized_options",
    "LocalProfile",
    "reference_controller",
    "local_synthesis",
    "CodesignCosts",
    "AgentRecord",
    "ChainState",
    "TopologySolution",
    "JoinMessage",
    "centralized_codesign",
    "decentralized_step",
    "apply_join",
    "apply_leave",
    "decentralized_codesign",
    "chain_from_solution",
    "gains_to_json",
    "gains_from_json",
    "profile_to_dict",
    "profile_from_dict",
]

_I3 = np.eye(3)
_I6 = np.eye(6)
_Z6 = np.zeros((6, 6))


def _double_integrator() -> tuple[np.ndarray, np.ndarray]:
    a = np.zeros((6, 6))
    a[:3, 3:] = _I3
    b = np.zeros((6, 3))
    b[3:, :] = _I3
    return a, b


class EpsilonTooSmall(ValueError):
    """Self-damping slack epsilon must satisfy rho + epsilon > 1."""


@dataclass(frozen=True)
class SmsParameters:
    """Mesh-stability bookkeeping derived from (R, rho).

    epsilon    self-damping slack enforced on each K_ii
    mu         contraction rate of the local error Lyapunov function
    delta      coupling budget sqrt(mu * lambda_min(R))
    delta_eff  delta clipped below 1 (the budget split requires < 1)
    """

    epsilon: float
    mu: float
    delta: float
    delta_eff: float


def sms_parameters(
    R: np.ndarray,
    rho: float,
    epsilon: float | None = None,
    *,
    delta_cap: float = 1.0 - 1e-3,
) -> SmsParameters:
    """Derive (epsilon, mu, delta) from a storage matrix and output index.

    The default epsilon = max(0, 1 - rho) + 0.1 always leaves
    rho + epsilon - 1 >= 0.1.  An explicit epsilon violating
    rho + epsilon > 1 raises :class:`EpsilonTooSmall`.
    """
    eigs = np.linalg.eigvalsh(np.asarray(R, dtype=float))
    if eigs.min() <= 0.0:
        raise ValueError("R must be positive definite")
    if epsilon is None:
        epsilon = max(0.0, 1.0 - rho) + 0.1
    headroom = rho + epsilon - 1.0
    if headroom <= 0.0:
        raise EpsilonTooSmall(
            f"need rho + epsilon > 1, got rho={rho:.6g}, epsilon={epsilon:.6g}"
        )
    mu = headroom / float(eigs.max())
    delta = math.sqrt(mu * float(eigs.min()))
    return SmsParameters(
        epsilon=float(epsilon),
        mu=float(mu),
        delta=float(delta),
        delta_eff=float(min(delta, delta_cap)),
    )


@dataclass(frozen=True)
class SynthesisOptions:
    """Shaping knobs of the local gain program.

    decay          closed-loop decay target alpha: sym(A P + B L P) <= -2 alpha P
    nu_tilde_up    upper bound on the scaled input index (more negative means
                   more input passivity shortfall is certified)
    nu_tilde_low   lower bound keeping the solver from drifting to -inf
    rho_low/up     window for the output passivity index
    p_tilde_*      bounds on the scaled multiplier (its raw minimizer is a
                   degenerate p_tilde -> 0, so the window is load-bearing)
    pull_weight    weight tau of the pull toward the reference loop
    axis_mix_angle rotation (about (1,1,1)) mixing the axes of the reference
                   controller; keeps the storage matrix off-axis coupled
    axis_spread    per-axis stiffness ratios of the reference controller
    """

    # defaults keep the translational loop gentle (poles near -1.4) so the
    # attitude planner is not asked for violent desired-frame swings
    decay: float = 0.6
    nu_tilde_up: float = -12.0
    nu_tilde_low: float = -200.0
    rho_low: float = 1.02
    rho_up: float = 1.2
    p_tilde_min: float = 0.2
    p_tilde_max: float = 0.8
    pull_weight: float = 1.0
    axis_mix_angle: float = 0.5
    axis_spread: tuple[float, float, float] = (1.0, 1.1, 1.2)

    def __post_init__(self) -> None:
        if not self.nu_tilde_low < self.nu_tilde_up < 0.0:
            raise ValueError("need nu_tilde_low < nu_tilde_up < 0")
        if not 0.0 < self.rho_low <= self.rho_up:
            raise ValueError("need 0 < rho_low <= rho_up")
        if not 0.0 < self.p_tilde_min <= self.p_tilde_max < 1.0:
            raise ValueError("need 0 < p_tilde_min <= p_tilde_max < 1")
        if self.decay <= 0.0 or self.pull_weight < 0.0:
            raise ValueError("decay must be positive and pull_weight nonnegative")


def randomized_options(seed: int) -> SynthesisOptions:
    """A randomized but well-posed option set (soundness sweeps)."""
    rng = np.random.default_rng(seed)
    rho_mid = rng.uniform(1.5, 2.2)
    return SynthesisOptions(
        decay=rng.uniform(0.9, 2.0),
        nu_tilde_up=-rng.uniform(8.0, 16.0),
        nu_tilde_low=-200.0,
        rho_low=rho_mid - 0.3,
        rho_up=rho_mid + 0.3,
        p_tilde_min=0.2,
        p_tilde_max=0.8,
        pull_weight=rng.uniform(0.5, 2.0),
        axis_mix_angle=rng.uniform(0.25, 0.85),
        axis_spread=(1.0, 1.0 + rng.uniform(0.2, 0.5), 1.0 + rng.uniform(0.5, 0.9)),
    )


@dataclass(frozen=True)
class LocalProfile:
    """One vehicle's synthesized loop: gain, storage, indices, budgets.

    The *_tilde fields are the raw solver-scale values; the unscaled fields
    satisfy nu = nu_tilde / rho, P = P_tilde / rho, L_bar = L_tilde P_tilde^-1,
    p = 1 / (rho p_tilde), gamma2_local = gamma2_scaled / (rho^2 p_tilde).
    """

    nu: float
    rho: float
    p: float
    gamma2_local: float
    P: np.ndarray
    R: np.ndarray
    L_bar: GainBlock
    sms: SmsParameters
    P_tilde: np.ndarray
    L_tilde: np.ndarray
    nu_tilde: float
    p_tilde: float
    gamma2_scaled: float
    backend: str


def reference_controller(
    options: SynthesisOptions,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Reference loop (L0, W, L_tilde0) used as the pull target.

    L0 is a stiffness-spread PD law conjugated by a rotation so that no axis
    decouples; W is its Lyapunov storage shape P0 = R0^-1 normalized to unit
    spectral radius, and L_tilde0 = L0 W is the matching scaled-gain target.
    """
    axis = np.array([1.0, 1.0, 1.0]) / math.sqrt(3.0)
    u = exp_so3(options.axis_mix_angle * axis)
    mix = u.T @ np.diag(options.axis_spread) @ u
    alpha = options.decay
    l0 = np.hstack([-4.0 * alpha**2 * mix, -4.0 * alpha * mix])
    a, b = _double_integrator()
    abar = a + b @ l0
    # Solves abar^T R0 + R0 abar = -I.
    r0 = solve_continuous_lyapunov(abar.T, -_I6)
    r0 = 0.5 * (r0 + r0.T)
    if np.linalg.eigvalsh(r0).min() <= 0.0:
        raise RuntimeError("reference loop is not stable; bad options")
    p0 = np.linalg.inv(r0)
    w = p0 / np.linalg.eigvalsh(p0).max()
    return l0, w, l0 @ w


def local_synthesis(
    options: SynthesisOptions | None = None,
    *,
    backend: str | None = None,
    tolerances: ToleranceConfig | None = None,
) -> LocalProfile:
    """Design (L_bar, R, nu, rho) plus the scalarized gain budget for one
    vehicle.  Raises :class:`meshnet.lmi.Infeasible` if the option window
    admits no certificate.
    """
    options = options or SynthesisOptions()
    tol = tolerances or ToleranceConfig()
    prob = LmiProblem(backend=backend, tolerances=tol)

    p_t = prob.symmetric("P_tilde", 6)
    l_t = prob.matrix("L_tilde", 3, 6)
    nu_t = prob.scalar("nu_tilde")
    rho = prob.scalar("rho")
    p_mult = prob.scalar("p_tilde")
    gamma2 = prob.scalar("gamma2_scaled")

    a, b = _double_integrator()
    sym_closed = a @ p_t + b @ l_t + (a @ p_t + b @ l_t).T
    cross = -rho * _I6 + 0.5 * p_t
    storage = cp.bmat(
        [
            [_I6, p_t, _Z6],
            [p_t, -sym_closed, cross],
            [_Z6, cross, -nu_t * _I6],
        ]
    )
    prob.add_psd(storage, margin=tol.margin)
    # The storage block above only pins P_tilde through a square, so an
    # over-constrained window could otherwise be "solved" with an indefinite
    # P_tilde that explodes at recovery.  Floor it far below any usable scale.
    prob.add_psd(p_t - 1e-4 * _I6)

    scalar_budget = cp.bmat(
        [
            [-nu_t, 0.0, 0.0, -nu_t],
            [0.0, p_mult, p_mult, 0.0],
            [0.0, p_mult, 1.0, -0.5],
            [-nu_t, 0.0, -0.5, gamma2],
        ]
    )
    prob.add_psd(scalar_budget, margin=tol.margin)

    # Decay floor keeps the tracking transient inside the band criteria.
    prob.add_psd(-(sym_closed + 2.0 * options.decay * p_t))

    prob.add(
        nu_t <= options.nu_tilde_up,
        nu_t >= options.nu_tilde_low,
        rho >= options.rho_low,
        rho <= options.rho_up,
        p_mult >= options.p_tilde_min,
        p_mult <= options.p_tilde_max,
    )

    _, w, l_t0 = reference_controller(options)
    pull = cp.norm(p_t - w, "fro") + cp.norm(l_t - l_t0, "fro")
    prob.minimize(gamma2 + options.pull_weight * pull)

    report = prob.solve()
    p_tilde = np.asarray(report.values["P_tilde"])
    p_tilde = 0.5 * (p_tilde + p_tilde.T)
    l_tilde = np.asarray(report.values["L_tilde"])
    nu_tilde = float(report.values["nu_tilde"])
    rho_v = float(report.values["rho"])
    p_mult_v = float(report.values["p_tilde"])
    gamma2_scaled = float(report.values["gamma2_scaled"])

    if np.linalg.eigvalsh(p_tilde).min() <= 0.0:
        raise NumericalFailure(
            "solver returned an indefinite storage matrix; tighten tolerances "
            "or switch backends"
        )
    p_mat = p_tilde / rho_v
    r_mat = np.linalg.inv(p_mat)
    r_mat = 0.5 * (r_mat + r_mat.T)
    l_rows = np.linalg.solve(p_tilde.T, l_tilde.T).T
    nu = nu_tilde / rho_v
    p_rec = 1.0 / (rho_v * p_mult_v)
    gamma2_local = gamma2_scaled / (rho_v**2 * p_mult_v)

    return LocalProfile(
        nu=nu,
        rho=rho_v,
        p=p_rec,
        gamma2_local=gamma2_local,
        P=p_mat,
        R=r_mat,
        L_bar=GainBlock.from_rows(l_rows),
        sms=sms_parameters(r_mat, rho_v),
        P_tilde=p_tilde,
        L_tilde=l_tilde,
        nu_tilde=nu_tilde,
        p_tilde=p_mult_v,
        gamma2_scaled=gamma2_scaled,
        backend=report.backend,
    )


# ---------------------------------------------------------------------------
# Topology co-design
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CodesignCosts:
    """Objective weights of the co-design layer.

    edge_l1    cost per unit l1 mass of each coupling block
    gamma      cost on the (squared) network gain budget
    anchor     decentralized only: cost on |gamma2_hat - gamma2_local|
    gamma_max  hard cap on the squared gain budget
    per_edge   optional overrides of edge_l1 for specific directed pairs
    """

    edge_l1: float = 1.0
    gamma: float = 1.0
    anchor: float = 10.0
    gamma_max: float = 80.0
    per_edge: Mapping[tuple[int, int], float] | None = None

    def edge_cost(self, i: int, j: int) -> float:
        if self.per_edge and (i, j) in self.per_edge:
            return float(self.per_edge[(i, j)])
        return self.edge_l1


@dataclass(frozen=True)
class AgentRecord:
    """Per-agent slice of a network solution (everything re-verification or
    runtime control needs, nothing about other agents)."""

    nu: float
    rho: float
    p: float
    epsilon: float
    mu: float
    delta_eff: float
    gamma2_local: float
    gamma2_hat: float
    position: int
    R: np.ndarray
    L_bar: GainBlock
    K0: GainBlock


@dataclass(frozen=True)
class ChainState:
    """Factorization chain of the agent-major network certificate."""

    factors: SylvesterFactors
    order: tuple[int, ...]


@dataclass
class TopologySolution:
    """A co-designed network: agent records, coupling gains, gain budget.

    ``K`` holds every nonzero coupling block including the self blocks (i, i).
    The invariant K0_i = K_ii + sum_{j != i} K_ij is maintained by join and
    leave updates without ever rewriting K_ii.
    """

    agents: dict[int, AgentRecord]
    K: dict[tuple[int, int], GainBlock]
    gamma: float
    provenance: str
    backend: str
    tolerances: ToleranceConfig = field(default_factory=ToleranceConfig)
    chain: ChainState | None = None

    def ids(self) -> list[int]:
        return sorted(self.agents)

    def k_row(self, i: int) -> dict[int, GainBlock]:
        return {j: blk for (a, j), blk in self.K.items() if a == i}

    def gains_for(self, i: int) -> tuple[GainBlock, dict[int, GainBlock]]:
        return self.agents[i].L_bar, self.k_row(i)

    def edges(self) -> list[tuple[int, int]]:
        return sorted((i, j) for (i, j) in self.K if i != j)

    def k0_invariant_violation(self) -> float:
        worst = 0.0
        for i, rec in self.agents.items():
            acc = GainBlock.zero()
            for j, blk in self.k_row(i).items():
                acc = acc + blk
            worst = max(worst, float(np.max(np.abs((rec.K0 - acc).rows()))))
        return worst


@dataclass(frozen=True)
class JoinMessage:
    """Everything a join broadcast carries: the new agent's record, its own
    coupling row K_new_row (self block included), and the blocks K_ji each
    prior neighbor j must add toward the newcomer."""

    agent: int
    record: AgentRecord
    K_new_row: Mapping[int, GainBlock]
    K_into_prior: Mapping[int, GainBlock]


def _structured_q(prob: LmiProblem, name: str, *, hollow: bool) -> tuple:
    """A coupling variable [[0, 0], [q_x, q_v]]; hollow zeroes diag(q_v)."""
    q_x = prob.matrix(f"{name}_qx", 3, 3)
    q_v = prob.matrix(f"{name}_qv", 3, 3)
    if hollow:
        prob.add(cp.diag(q_v) == 0)
    z = np.zeros((3, 3))
    expr = cp.bmat([[z, z], [q_x, q_v]])
    return expr, q_x, q_v


def _q_l1(q_x, q_v):
    return cp.sum(cp.abs(q_x)) + cp.sum(cp.abs(q_v))


def _directed_pairs(ids: Sequence[int], edges: Iterable[tuple[int, int]]) -> set:
    known = set(ids)
    out = set()
    for i, j in edges:
        if i == j:
            raise ValueError(f"self edge ({i}, {i}) is implicit; do not list it")
        if i not in known or j not in known:
            raise ValueError(f"edge ({i}, {j}) references an unknown agent")
        out.add((i, j))
        out.add((j, i))
    return out


def _self_damping_constraint(prob, profile: LocalProfile, q_ii, p_var) -> None:
    # Self-coupled damping: sym(R (A_bar + K_ii)) <= -(rho + epsilon) I, in the
    # scaled variable Q_ii = -p nu K_ii.  Written against the local
    # certificate's slack D = -sym(R A_bar) - rho I >= 0:
    #     sym(R Q_ii) <= p nu epsilon I - p nu D.
    # The slack term is load-bearing: sym(R Q_ii) vanishes on the kernel of
    # the structured gain rows, so without D the bound is unsatisfiable for
    # any epsilon > 0.
    a, b = _double_integrator()
    a_bar = a + b @ profile.L_bar.rows()
    r = profile.R
    slack = -(r @ a_bar + a_bar.T @ r) - profile.rho * _I6
    rhs = p_var * (profile.nu * (profile.sms.epsilon * _I6 - slack))
    prob.add_psd(rhs - (r @ q_ii + (r @ q_ii).T))


def _gain_from_q(q_x: np.ndarray, q_v: np.ndarray, p: float, nu: float) -> GainBlock:
    scale = -p * nu
    return GainBlock(k_x=np.asarray(q_x) / scale, k_v=np.asarray(q_v) / scale)


def centralized_codesign(
    profiles: Mapping[int, LocalProfile],
    edges: Iterable[tuple[int, int]],
    costs: CodesignCosts | None = None,
    *,
    backend: str | None = None,
    tolerances: ToleranceConfig | None = None,
) -> TopologySolution:
    """Co-design all coupling gains and the shared gain budget in one program.

    ``edges`` lists undirected allowed communication pairs; both directed
    coupling blocks of each pair become variables.  Self blocks always exist.
    """
    costs = costs or CodesignCosts()
    tol = tolerances or ToleranceConfig()
    ids = sorted(profiles)
    n = len(ids)
    if n == 0:
        raise ValueError("need at least one agent")
    allowed = _directed_pairs(ids, edges)
    idx = {agent: k for k, agent in enumerate(ids)}

    prob = LmiProblem(backend=backend, tolerances=tol)
    p_vars = {i: prob.scalar(f"p_{i}") for i in ids}
    gamma2 = prob.scalar("gamma2")
    prob.add(gamma2 >= 1e-9, gamma2 <= costs.gamma_max)
    for i in ids:
        prob.add(p_vars[i] >= 1e-6)

    q_exprs: dict[tuple[int, int], tuple] = {}
    for i in ids:
        q_exprs[(i, i)] = _structured_q(prob, f"Q_{i}_{i}", hollow=True)
    for i, j in sorted(allowed):
        q_exprs[(i, j)] = _structured_q(prob, f"Q_{i}_{j}", hollow=False)

    def q_of(i: int, j: int):
        got = q_exprs.get((i, j))
        return got[0] if got is not None else None

    # Field-major grid: 4 fields x n agents of 6x6 cells.
    dim = 4 * n
    grid = [[None] * dim for _ in range(dim)]

    def put(f_r, a_r, f_c, a_c, expr):
        grid[f_r * n + idx[a_r]][f_c * n + idx[a_c]] = expr

    for i in ids:
        nu_i = profiles[i].nu
        rho_i = profiles[i].rho
        vp = (-nu_i) * p_vars[i] * _I6
        put(0, i, 0, i, vp)
        put(0, i, 3, i, vp)
        put(3, i, 0, i, vp)
        put(1, i, 1, i, _I6)
        put(1, i, 2, i, _I6)
        put(2, i, 1, i, _I6)
        put(2, i, 3, i, (-0.5) * p_vars[i] * _I6)
        put(3, i, 2, i, (-0.5) * p_vars[i] * _I6)
        put(3, i, 3, i, gamma2 * _I6)
        q_ii = q_of(i, i)
        put(0, i, 2, i, q_ii)
        put(2, i, 0, i, q_ii.T)
        put(2, i, 2, i, (q_ii + q_ii.T) / (2.0 * nu_i) + rho_i * p_vars[i] * _I6)
        for j in ids:
            if j == i:
                continue
            q_ij = q_of(i, j)
            q_ji = q_of(j, i)
            if q_ij is not None:
                put(0, i, 2, j, q_ij)
                put(2, j, 0, i, q_ij.T)
            term = None
            if q_ji is not None:
                term = q_ji.T / (2.0 * profiles[j].nu)
            if q_ij is not None:
                add = q_ij / (2.0 * nu_i)
                term = add if term is None else term + add
            if term is not None:
                put(2, i, 2, j, term)
    for r in range(dim):
        for c in range(dim):
            if grid[r][c] is None:
                grid[r][c] = _Z6
    prob.add_psd(cp.bmat(grid), margin=tol.margin)

    for i in ids:
        _self_damping_constraint(prob, profiles[i], q_of(i, i), p_vars[i])

    # Per-agent coupling budget: sum_j ||R_i Q_ij|| < -p_i nu_i delta_i.
    for i in ids:
        slacks = []
        for j in ids:
            if j == i or (i, j) not in allowed:
                continue
            t = prob.scalar(f"t_{i}_{j}", nonneg=True)
            prob.add(spectral_bound_constraint(profiles[i].R @ q_of(i, j), t))
            slacks.append(t)
        if slacks:
            budget = (-profiles[i].nu * profiles[i].sms.delta_eff) * p_vars[i]
            prob.add(cp.sum(cp.hstack(slacks)) <= (1.0 - 1e-6) * budget)

    objective = costs.gamma * gamma2
    for pair in sorted(q_exprs):
        _, q_x, q_v = q_exprs[pair]
        objective = objective + costs.edge_cost(*pair) * _q_l1(q_x, q_v)
    prob.minimize(objective)

    report = prob.solve()

    gamma2_v = float(report.values["gamma2"])
    k_blocks: dict[tuple[int, int], GainBlock] = {}
    for (i, j), _ in q_exprs.items():
        p_i = float(report.values[f"p_{i}"])
        k_blocks[(i, j)] = _gain_from_q(
            report.values[f"Q_{i}_{j}_qx"],
            report.values[f"Q_{i}_{j}_qv"],
            p_i,
            profiles[i].nu,
        )
    agents: dict[int, AgentRecord] = {}
    for pos, i in enumerate(ids, start=1):
        prof = profiles[i]
        k0 = GainBlock.zero()
        for j in ids:
            if (i, j) in k_blocks:
                k0 = k0 + k_blocks[(i, j)]
        agents[i] = AgentRecord(
            nu=prof.nu,
            rho=prof.rho,
            p=float(report.values[f"p_{i}"]),
            epsilon=prof.sms.epsilon,
            mu=prof.sms.mu,
            delta_eff=prof.sms.delta_eff,
            gamma2_local=prof.gamma2_local,
            gamma2_hat=gamma2_v,
            position=pos,
            R=prof.R,
            L_bar=prof.L_bar,
            K0=k0,
        )
    solution = TopologySolution(
        agents=agents,
        K=k_blocks,
        gamma=math.sqrt(gamma2_v),
        provenance="centralized",
        backend=report.backend,
        tolerances=tol,
    )
    solution.chain = chain_from_solution(solution).chain
    return solution


def _numeric_chain_row(
    solution: TopologySolution, order: Sequence[int], i: int
) -> list[np.ndarray]:
    """Blocks [W_i,order[0] .. W_ii] of the agent-major certificate, numeric."""
    rec_i = solution.agents[i]
    row: list[np.ndarray] = []
    for j in order:
        if j == i:
            q_ii = (-rec_i.p * rec_i.nu) * solution.K[(i, i)].matrix()
            row.append(
                chain_diag_block(rec_i.nu, rec_i.rho, rec_i.p, rec_i.gamma2_hat, q_ii)
            )
            break
        rec_j = solution.agents[j]
        k_ij = solution.K.get((i, j))
        k_ji = solution.K.get((j, i))
        q_ij = (-rec_i.p * rec_i.nu) * k_ij.matrix() if k_ij else _Z6
        q_ji = (-rec_j.p * rec_j.nu) * k_ji.matrix() if k_ji else _Z6
        row.append(chain_off_block(rec_i.nu, rec_j.nu, q_ij, q_ji))
    return row


def chain_from_solution(solution: TopologySolution) -> TopologySolution:
    """Rebuild the factorization chain from the stored gains (in position
    order) and attach it.  Raises if the stored network certificate is not PD."""
    order = sorted(solution.agents, key=lambda i: solution.agents[i].position)
    factors = SylvesterFactors(pd_tol=solution.tolerances.pd_tol)
    for k, i in enumerate(order):
        factors = sylvester_step(factors, _numeric_chain_row(solution, order[: k + 1], i))
    if not factors.is_pd:
        raise RuntimeError("stored solution fails its own network certificate")
    solution.chain = ChainState(factors=factors, order=tuple(order))
    return solution


def decentralized_step(
    solution: TopologySolution | None,
    profile: LocalProfile,
    agent: int,
    neighbors: Iterable[int],
    costs: CodesignCosts | None = None,
    *,
    backend: str | None = None,
    tolerances: ToleranceConfig | None = None,
) -> JoinMessage:
    """Design the coupling blocks between one new agent and its neighbors.

    Only the new agent's self block, its row blocks Q_ij, the neighbors' new
    column blocks Q_ji, its multiplier p and its budget gamma2_hat are
    variables; everything already deployed stays fixed.  The growing network
    certificate is constrained PD through a Schur lift against the stored
    chain, and per-edge spectral budgets split each agent's coupling allowance
    geometrically by the peer's position so the running sum never exhausts it.
    """
    costs = costs or CodesignCosts()
    nbrs = sorted(set(neighbors))
    if solution is None:
        if nbrs:
            raise ValueError("first agent cannot have neighbors")
        tol = tolerances or ToleranceConfig()
        order: tuple[int, ...] = ()
        position = 1
    else:
        tol = tolerances or solution.tolerances
        if solution.chain is None:
            chain_from_solution(solution)
        order = solution.chain.order
        if agent in solution.agents:
            raise ValueError(f"agent id {agent} is already in the network")
        unknown = [j for j in nbrs if j not in solution.agents]
        if unknown:
            raise ValueError(f"unknown neighbors: {unknown}")
        position = max(r.position for r in solution.agents.values()) + 1

    nu_i = profile.nu
    prob = LmiProblem(backend=backend, tolerances=tol)
    p_var = prob.scalar("p")
    gamma2 = prob.scalar("gamma2_hat")
    prob.add(p_var >= 1e-6, gamma2 >= 1e-9, gamma2 <= costs.gamma_max)

    q_ii, q_ii_x, q_ii_v = _structured_q(prob, f"Q_{agent}_{agent}", hollow=True)
    q_out = {}
    q_in = {}
    for j in nbrs:
        q_out[j] = _structured_q(prob, f"Q_{agent}_{j}", hollow=False)
        q_in[j] = _structured_q(prob, f"Q_{j}_{agent}", hollow=False)

    vp = (-nu_i) * p_var * _I6
    w_ii = cp.bmat(
        [
            [vp, _Z6, q_ii, vp],
            [_Z6, _I6, _I6, _Z6],
            [q_ii.T, _I6, (q_ii + q_ii.T) / (2.0 * nu_i) + profile.rho * p_var * _I6,
             (-0.5) * p_var * _I6],
            [vp, _Z6, (-0.5) * p_var * _I6, gamma2 * _I6],
        ]
    )

    if not order:
        prob.add_psd(w_ii, margin=tol.margin)
    else:
        gamma_prior = solution.chain.factors.dense_prior()
        z24 = np.zeros((24, 24))
        row_blocks = []
        for j in order:
            if j not in q_out:
                row_blocks.append(z24)
                continue
            rec_j = solution.agents[j]
            q_ij = q_out[j][0]
            q_ji = q_in[j][0]
            b33 = q_ji.T / (2.0 * rec_j.nu) + q_ij / (2.0 * nu_i)
            row_blocks.append(
                cp.bmat(
                    [
                        [_Z6, _Z6, q_ij, _Z6],
                        [_Z6, _Z6, _Z6, _Z6],
                        [q_ji.T, _Z6, b33, _Z6],
                        [_Z6, _Z6, _Z6, _Z6],
                    ]
                )
            )
        w_row = cp.hstack(row_blocks)
        lift = cp.bmat(
            [
                [gamma_prior, w_row.T],
                [w_row, w_ii - tol.margin * np.eye(24)],
            ]
        )
        prob.add_psd(lift)

    _self_damping_constraint(prob, profile, q_ii, p_var)

    # Geometric per-edge budgets, both directions of every new edge.
    for j in nbrs:
        rec_j = solution.agents[j]
        out_cap = (-nu_i * profile.sms.delta_eff * 2.0 ** (-rec_j.position)) * p_var
        t_out = prob.scalar(f"t_out_{j}", nonneg=True)
        prob.add(spectral_bound_constraint(profile.R @ q_out[j][0], t_out))
        prob.add(t_out <= out_cap)
        in_cap = (
            -rec_j.p * rec_j.nu * rec_j.delta_eff * 2.0 ** (-position)
        )
        t_in = prob.scalar(f"t_in_{j}", nonneg=True)
        prob.add(spectral_bound_constraint(rec_j.R @ q_in[j][0], t_in))
        prob.add(t_in <= in_cap)

    objective = costs.gamma * gamma2 + costs.anchor * cp.abs(
        gamma2 - profile.gamma2_local
    )
    for j in nbrs:
        objective = objective + costs.edge_cost(agent, j) * _q_l1(q_out[j][1], q_out[j][2])
        objective = objective + costs.edge_cost(j, agent) * _q_l1(q_in[j][1], q_in[j][2])
    prob.minimize(objective)

    report = prob.solve()
    p_v = float(report.values["p"])
    gamma2_v = float(report.values["gamma2_hat"])

    k_new_row = {
        agent: _gain_from_q(
            report.values[f"Q_{agent}_{agent}_qx"],
            report.values[f"Q_{agent}_{agent}_qv"],
            p_v,
            nu_i,
        )
    }
    for j in nbrs:
        k_new_row[j] = _gain_from_q(
            report.values[f"Q_{agent}_{j}_qx"],
            report.values[f"Q_{agent}_{j}_qv"],
            p_v,
            nu_i,
        )
    k_into_prior = {}
    for j in nbrs:
        rec_j = solution.agents[j]
        k_into_prior[j] = _gain_from_q(
            report.values[f"Q_{j}_{agent}_qx"],
            report.values[f"Q_{j}_{agent}_qv"],
            rec_j.p,
            rec_j.nu,
        )

    k0 = GainBlock.zero()
    for blk in k_new_row.values():
        k0 = k0 + blk
    record = AgentRecord(
        nu=nu_i,
        rho=profile.rho,
        p=p_v,
        epsilon=profile.sms.epsilon,
        mu=profile.sms.mu,
        delta_eff=profile.sms.delta_eff,
        gamma2_local=profile.gamma2_local,
        gamma2_hat=gamma2_v,
        position=position,
        R=profile.R,
        L_bar=profile.L_bar,
        K0=k0,
    )
    return JoinMessage(
        agent=agent, record=record, K_new_row=k_new_row, K_into_prior=k_into_prior
    )


def apply_join(
    solution: TopologySolution | None, msg: JoinMessage
) -> TopologySolution:
    """Fold a join broadcast into the network state.

    Existing agents only gain one new coupling block and bump their K0
    accumulator; their self blocks K_jj are not touched (bit-identical), and
    nothing else about them changes.  The factorization chain is extended by
    one block row.
    """
    i = msg.agent
    if solution is None:
        agents = {i: msg.record}
        k = dict()
        chain_prev = None
        tol = ToleranceConfig()
        backend = "unknown"
    else:
        if i in solution.agents:
            raise ValueError(f"agent {i} already present")
        for j in msg.K_into_prior:
            if j not in solution.agents:
                raise ValueError(f"join references unknown agent {j}")
        agents = dict(solution.agents)
        agents[i] = msg.record
        k = dict(solution.K)
        if solution.chain is None:
            chain_from_solution(solution)
        chain_prev = solution.chain
        tol = solution.tolerances
        backend = solution.backend
    for j, blk in msg.K_new_row.items():
        k[(i, j)] = blk
    for j, blk in msg.K_into_prior.items():
        k[(j, i)] = blk
        agents[j] = replace(agents[j], K0=agents[j].K0 + blk)

    out = TopologySolution(
        agents=agents,
        K=k,
        gamma=math.sqrt(max(r.gamma2_hat for r in agents.values())),
        provenance=solution.provenance if solution else "decentralized",
        backend=backend,
        tolerances=tol,
    )
    order = (chain_prev.order if chain_prev else ()) + (i,)
    factors = chain_prev.factors if chain_prev else SylvesterFactors(pd_tol=tol.pd_tol)
    factors = sylvester_step(factors, _numeric_chain_row(out, order, i))
    if not factors.is_pd:
        raise RuntimeError("join would break the network certificate")
    out.chain = ChainState(factors=factors, order=order)
    return out


def apply_leave(solution: TopologySolution, agent: int) -> TopologySolution:
    """Remove an agent: drop its blocks, rewind each neighbor's K0 by exactly
    the block the corresponding join added, and refactorize the (smaller)
    certificate chain.  No gain of any remaining agent changes."""
    if agent not in solution.agents:
        raise ValueError(f"agent {agent} not present")
    agents = {}
    for j, rec in solution.agents.items():
        if j == agent:
            continue
        blk = solution.K.get((j, agent))
        agents[j] = replace(rec, K0=rec.K0 - blk) if blk else rec
    k = {
        pair: blk
        for pair, blk in solution.K.items()
        if agent not in pair
    }
    out = TopologySolution(
        agents=agents,
        K=k,
        gamma=math.sqrt(max(r.gamma2_hat for r in agents.values())),
        provenance=solution.provenance,
        backend=solution.backend,
        tolerances=solution.tolerances,
    )
    return chain_from_solution(out)


def decentralized_codesign(
    profiles: Mapping[int, LocalProfile],
    edges: Iterable[tuple[int, int]],
    costs: CodesignCosts | None = None,
    *,
    backend: str | None = None,
    tolerances: ToleranceConfig | None = None,
    order: Sequence[int] | None = None,
) -> TopologySolution:
    """Build the network one agent at a time along ``order`` (default: sorted
    ids).  Each step solves only the new agent's program; the result is a
    valid network at every prefix."""
    ids = list(order) if order is not None else sorted(profiles)
    if sorted(ids) != sorted(profiles):
        raise ValueError("order must enumerate exactly the profiled agents")
    adjacency = _directed_pairs(ids, edges)
    solution: TopologySolution | None = None
    for i in ids:
        present = set(solution.agents) if solution else set()
        nbrs = [j for j in present if (i, j) in adjacency]
        msg = decentralized_step(
            solution,
            profiles[i],
            i,
            nbrs,
            costs,
            backend=backend,
            tolerances=tolerances,
        )
        solution = apply_join(solution, msg)
        if backend is not None:
            solution.backend = backend
    solution.provenance = "decentralized"
    return solution


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def gains_to_json(solution: TopologySolution) -> str:
    """Serialize to the gains JSON schema (floats keep full repr precision)."""
    agents = {}
    for i in solution.ids():
        rec = solution.agents[i]
        agents[str(i)] = {
            "nu": rec.nu,
            "rho": rec.rho,
            "p": rec.p,
            "epsilon": rec.epsilon,
            "mu": rec.mu,
            "delta_eff": rec.delta_eff,
            "gamma2_local": rec.gamma2_local,
            "gamma2_hat": rec.gamma2_hat,
            "position": rec.position,
            "R": rec.R.tolist(),
            "L_bar": rec.L_bar.rows().tolist(),
            "K0": rec.K0.rows().tolist(),
        }
    links = []
    for (i, j) in sorted(solution.K):
        blk = solution.K[(i, j)]
        links.append(
            {"i": i, "j": j, "k_x": blk.k_x.tolist(), "k_v": blk.k_v.tolist()}
        )
    payload = {
        "global": {
            "gamma": solution.gamma,
            "provenance": solution.provenance,
            "solver_backend": solution.backend,
            "tolerances": asdict(solution.tolerances),
        },
        "agents": agents,
        "links": links,
    }
    return json.dumps(payload, indent=2)


def profile_to_dict(profile: LocalProfile) -> dict:
    """JSON-ready dict of one synthesized local profile."""
    return {
        "nu": profile.nu,
        "rho": profile.rho,
        "p": profile.p,
        "gamma2_local": profile.gamma2_local,
        "P": profile.P.tolist(),
        "R": profile.R.tolist(),
        "L_bar": profile.L_bar.rows().tolist(),
        "sms": asdict(profile.sms),
        "P_tilde": profile.P_tilde.tolist(),
        "L_tilde": profile.L_tilde.tolist(),
        "nu_tilde": profile.nu_tilde,
        "p_tilde": profile.p_tilde,
        "gamma2_scaled": profile.gamma2_scaled,
        "backend": profile.backend,
    }


def profile_from_dict(data: Mapping) -> LocalProfile:
    """Inverse of :func:`profile_to_dict`."""
    return LocalProfile(
        nu=float(data["nu"]),
        rho=float(data["rho"]),
        p=float(data["p"]),
        gamma2_local=float(data["gamma2_local"]),
        P=np.array(data["P"], dtype=float),
        R=np.array(data["R"], dtype=float),
        L_bar=GainBlock.from_rows(np.array(data["L_bar"], dtype=float)),
        sms=SmsParameters(**data["sms"]),
        P_tilde=np.array(data["P_tilde"], dtype=float),
        L_tilde=np.array(data["L_tilde"], dtype=float),
        nu_tilde=float(data["nu_tilde"]),
        p_tilde=float(data["p_tilde"]),
        gamma2_scaled=float(data["gamma2_scaled"]),
        backend=str(data["backend"]),
    )


def gains_from_json(text: str) -> TopologySolution:
    """Inverse of :func:`gains_to_json`; the chain is rebuilt lazily."""
    payload = json.loads(text)
    agents = {}
    for key, rec in payload["agents"].items():
        agents[int(key)] = AgentRecord(
            nu=rec["nu"],
            rho=rec["rho"],
            p=rec["p"],
            epsilon=rec["epsilon"],
            mu=rec["mu"],
            delta_eff=rec["delta_eff"],
            gamma2_local=rec["gamma2_local"],
            gamma2_hat=rec["gamma2_hat"],
            position=rec["position"],
            R=np.array(rec["R"], dtype=float),
            L_bar=GainBlock.from_rows(np.array(rec["L_bar"], dtype=float)),
            K0=GainBlock.from_rows(np.array(rec["K0"], dtype=float)),
        )
    k = {}
    for link in payload["links"]:
        k[(int(link["i"]), int(link["j"]))] = GainBlock(
            k_x=np.array(link["k_x"], dtype=float),
            k_v=np.array(link["k_v"], dtype=float),
        )
    g = payload["global"]
    return TopologySolution(
        agents=agents,
        K=k,
        gamma=g["gamma"],
        provenance=g["provenance"],
        backend=g["solver_backend"],
        tolerances=ToleranceConfig(**g["tolerances"]),
    )
