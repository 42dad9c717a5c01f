"""Post-hoc run metrics: sup-norms, convergence, empirical gain, mesh report.

Everything here is computed from logged traces; nothing feeds back into the
simulation.  The empirical L2 estimate treats the stacked translation errors
as the performance output and the logged residual channel w_v as the input,
so the certificate gamma must dominate it on every seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Mapping, Sequence

import numpy as np

from ..certificates import coupling_budget_ratio, iss_upper_bound
from ..codesign import TopologySolution

if TYPE_CHECKING:  # avoid a circular import; simulate.py imports this module
    from .simulate import AgentTrace, SimOutput

__all__ = [
    "ZeroDisturbance",
    "AgentMetrics",
    "Metrics",
    "SmsReport",
    "compute_metrics",
    "estimate_l2_gain",
    "check_sms",
]

# w-energy below this is treated as an undisturbed run (pure roundoff)
_W_ENERGY_FLOOR = 1e-24


class ZeroDisturbance(ValueError):
    """The run carries no disturbance energy; a gain ratio is undefined."""


@dataclass
class AgentMetrics:
    """Per-agent summary over the agent's whole presence."""

    agent: int
    sup_outer: float
    sup_inner: float
    sup_e_x: np.ndarray
    sup_e_v: np.ndarray
    sup_e_R: np.ndarray
    sup_e_Omega: np.ndarray
    convergence_time: float
    iss_residual: float
    r_norm: float

    def to_dict(self) -> dict:
        return {
            "agent": self.agent,
            "sup_outer": self.sup_outer,
            "sup_inner": self.sup_inner,
            "sup_e_x": self.sup_e_x.tolist(),
            "sup_e_v": self.sup_e_v.tolist(),
            "sup_e_R": self.sup_e_R.tolist(),
            "sup_e_Omega": self.sup_e_Omega.tolist(),
            "convergence_time": self.convergence_time,
            "iss_residual": self.iss_residual,
            "r_norm": self.r_norm,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "AgentMetrics":
        return cls(
            agent=int(data["agent"]),
            sup_outer=float(data["sup_outer"]),
            sup_inner=float(data["sup_inner"]),
            sup_e_x=np.array(data["sup_e_x"], dtype=float),
            sup_e_v=np.array(data["sup_e_v"], dtype=float),
            sup_e_R=np.array(data["sup_e_R"], dtype=float),
            sup_e_Omega=np.array(data["sup_e_Omega"], dtype=float),
            convergence_time=float(data["convergence_time"]),
            iss_residual=float(data["iss_residual"]),
            r_norm=float(data["r_norm"]),
        )


@dataclass
class Metrics:
    """Network-level summary of one run."""

    scenario: str
    n_agents: int
    gamma: float
    band: float
    l2_estimate: float | None
    sup_outer_network: float
    per_agent: dict[int, AgentMetrics]

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "n_agents": self.n_agents,
            "gamma": self.gamma,
            "band": self.band,
            "l2_estimate": self.l2_estimate,
            "sup_outer_network": self.sup_outer_network,
            "per_agent": {str(i): m.to_dict() for i, m in sorted(self.per_agent.items())},
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "Metrics":
        l2 = data["l2_estimate"]
        return cls(
            scenario=str(data["scenario"]),
            n_agents=int(data["n_agents"]),
            gamma=float(data["gamma"]),
            band=float(data["band"]),
            l2_estimate=None if l2 is None else float(l2),
            sup_outer_network=float(data["sup_outer_network"]),
            per_agent={
                int(k): AgentMetrics.from_dict(v)
                for k, v in data["per_agent"].items()
            },
        )


def _row_norms(arr: np.ndarray) -> np.ndarray:
    return np.linalg.norm(arr, axis=-1)


def _convergence_time(trace: "AgentTrace", band: float) -> float:
    """Time of the first sample after which every |e_x| component stays
    within the band; t[0] if it never leaves, inf if it still violates at
    the end of the trace."""
    violating = np.any(np.abs(trace.e_x) > band, axis=-1)
    if not violating.any():
        return float(trace.t[0])
    last = int(np.flatnonzero(violating)[-1])
    if last == len(trace.t) - 1:
        return float("inf")
    return float(trace.t[last + 1])


def estimate_l2_gain(output: "SimOutput") -> float:
    """Finite-horizon gain estimate sqrt(sum_i int |e_i|^2 / sum_i int |w_i|^2)
    with trapezoidal quadrature over each agent's logged span.

    Raises
    ------
    ZeroDisturbance
        If the residual channel carries (numerically) no energy.
    """
    z_energy = 0.0
    w_energy = 0.0
    for trace in output.traces.values():
        if len(trace) < 2:
            continue
        z_energy += float(np.trapezoid(_row_norms(trace.outer) ** 2, trace.t))
        w_energy += float(np.trapezoid(_row_norms(trace.w_v) ** 2, trace.t))
    if w_energy <= _W_ENERGY_FLOOR:
        raise ZeroDisturbance(f"residual-channel energy {w_energy:.3e} is zero")
    return float(np.sqrt(z_energy / w_energy))


def compute_metrics(output: "SimOutput", band: float = 0.7) -> Metrics:
    """Summarize a run: per-agent sup-norms, convergence into a +/-band on
    each position-error component, the per-agent exponential envelope
    residual, and the network gain estimate."""
    sups = {a: float(np.max(_row_norms(tr.outer))) for a, tr in output.traces.items()}

    per_agent: dict[int, AgentMetrics] = {}
    for agent, trace in output.traces.items():
        rec, k_row = output.record_for(agent)
        coupling_sum = coupling_budget_ratio(agent, rec.R, k_row, 1.0)
        neighbor_sup = max(
            (sups[j] for j in k_row if j != agent and j in sups),
            default=0.0,
        )
        w_sup = float(np.max(_row_norms(trace.w_v))) if len(trace) else 0.0
        outer_norms = _row_norms(trace.outer)
        bound = iss_upper_bound(
            trace.t - trace.t[0],
            R=rec.R,
            mu=rec.mu,
            delta=rec.delta_eff,
            coupling_norm_sum=coupling_sum,
            neighbor_sup=neighbor_sup,
            w_sup=w_sup,
            e0_norm=float(outer_norms[0]),
        )
        per_agent[agent] = AgentMetrics(
            agent=agent,
            sup_outer=sups[agent],
            sup_inner=float(np.max(_row_norms(trace.inner))),
            sup_e_x=np.max(np.abs(trace.e_x), axis=0),
            sup_e_v=np.max(np.abs(trace.e_v), axis=0),
            sup_e_R=np.max(np.abs(trace.e_R), axis=0),
            sup_e_Omega=np.max(np.abs(trace.e_Omega), axis=0),
            convergence_time=_convergence_time(trace, band),
            iss_residual=float(np.max(outer_norms - bound)),
            r_norm=float(np.linalg.norm(rec.R, 2)),
        )

    try:
        l2 = estimate_l2_gain(output)
    except ZeroDisturbance:
        l2 = None

    return Metrics(
        scenario=output.scenario.name,
        n_agents=len(output.traces),
        gamma=output.gains_final.gamma,
        band=band,
        l2_estimate=l2,
        sup_outer_network=max(sups.values(), default=0.0),
        per_agent=per_agent,
    )


@dataclass
class SmsReport:
    """Three-part mesh-stability report over a family of runs."""

    weak_coupling_ok: bool
    scaling_ok: bool
    iss_ok: bool
    details: list[str]

    @property
    def passed(self) -> bool:
        return self.weak_coupling_ok and self.scaling_ok and self.iss_ok

    def lines(self) -> list[str]:
        mark = {True: "PASS", False: "FAIL"}
        out = [
            f"weak coupling   {mark[self.weak_coupling_ok]}",
            f"scaling         {mark[self.scaling_ok]}",
            f"iss envelope    {mark[self.iss_ok]}",
        ]
        out += [f"  {line}" for line in self.details]
        out.append(f"overall         {mark[self.passed]}")
        return out


def check_sms(
    runs: Sequence[tuple[TopologySolution, Metrics]],
    tol_sms: float = 0.10,
) -> SmsReport:
    """Mesh-stability check over runs at several network sizes.

    (a) every agent's coupling budget ratio sum_j ||R_i K_ij|| / delta_i < 1;
    (b) the network sup-norm is non-increasing as N grows, within a relative
        band of ``tol_sms``;
    (c) every agent's error stays under its exponential envelope
        (iss_residual <= 0).
    """
    if not runs:
        raise ValueError("need at least one run")
    details: list[str] = []

    worst_ratio = 0.0
    for solution, _ in runs:
        for i, rec in solution.agents.items():
            ratio = coupling_budget_ratio(i, rec.R, solution.k_row(i), rec.delta_eff)
            worst_ratio = max(worst_ratio, ratio)
    weak_ok = worst_ratio < 1.0
    details.append(f"max coupling budget ratio {worst_ratio:.4f} (need < 1)")

    ordered = sorted(runs, key=lambda pair: pair[1].n_agents)
    sups = [(m.n_agents, m.sup_outer_network) for _, m in ordered]
    scaling_ok = all(
        nxt <= prev * (1.0 + tol_sms)
        for (_, prev), (_, nxt) in zip(sups, sups[1:])
    )
    lo = min(s for _, s in sups)
    hi = max(s for _, s in sups)
    spread = (hi - lo) / lo if lo > 0 else 0.0
    details.append(
        "network sup-norm by N: "
        + ", ".join(f"N={n}: {s:.4f}" for n, s in sups)
        + f" (spread {100 * spread:.1f}%, band {100 * tol_sms:.0f}%)"
    )

    worst_residual = -np.inf
    for _, metrics in runs:
        for m in metrics.per_agent.values():
            worst_residual = max(worst_residual, m.iss_residual)
    iss_ok = worst_residual <= 0.0
    details.append(f"max envelope residual {worst_residual:.4e} (need <= 0)")

    return SmsReport(
        weak_coupling_ok=weak_ok,
        scaling_ok=scaling_ok,
        iss_ok=iss_ok,
        details=details,
    )
