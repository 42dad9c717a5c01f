"""Scenario configuration: parsing, validation, seed resolution.

A scenario is a YAML mapping with strict schema checking (unknown keys are
rejected at every level, all violations are reported together).  Randomness
is resolved per agent id from the master seed, so an agent's formation
offsets, parameter draws, and synthesis options do not depend on when it
joins or on how many other agents exist.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import yaml

from ..codesign import CodesignCosts, SynthesisOptions, randomized_options
from ..control import InnerLoopGains
from ..dynamics import (
    DT_MAX,
    ConstantTrajectory,
    DisturbanceModel,
    RigidBodyParams,
    SinusoidTrajectory,
    Trajectory,
)

__all__ = [
    "ScenarioError",
    "ParseError",
    "ValidationError",
    "AgentDefaults",
    "FormationSpec",
    "TrajectorySpec",
    "SynthesisSpec",
    "SimSpec",
    "OutputSpec",
    "JoinEvent",
    "LeaveEvent",
    "ScenarioConfig",
    "load_scenario",
    "loads_scenario",
    "builtin_scenario",
    "builtin_scenario_names",
]

# seed-stream tags (third SeedSequence entropy word)
_STREAM_OFFSETS = 0
_STREAM_PARAMS = 1
_STREAM_OPTIONS = 2


class ScenarioError(Exception):
    """Base class for configuration failures."""


class ParseError(ScenarioError):
    """The file is not parseable as a config document."""


class ValidationError(ScenarioError):
    """The document parsed but violates the schema; lists every problem."""

    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("invalid scenario:\n  " + "\n  ".join(self.problems))


@dataclass(frozen=True)
class AgentDefaults:
    """Physical parameters shared by every vehicle (per-agent draws add the
    ±uncertainty perturbation on top)."""

    count: int
    mass: float = 0.55
    inertia: np.ndarray = field(
        default_factory=lambda: np.diag([2.2e-3, 2.9e-3, 5.3e-3])
    )
    uncertainty_pct: float = 0.10


@dataclass(frozen=True)
class FormationSpec:
    """Grid formation: cell (r, c) sits at base + (r+1) row_i + c col_i, with
    row_i / col_i drawn per agent around the configured means.

    Links exist between agents whose grid cells are within
    ``adjacency_radius`` (Euclidean), unless an explicit ``links`` list is
    given.
    """

    rows: int
    cols: int
    base: np.ndarray = field(default_factory=lambda: np.zeros(3))
    row_offset_mean: float = -2.0
    row_offset_var: float = 0.5
    col_offset_mean: float = 2.5
    col_offset_var: float = 0.5
    adjacency_radius: float = 2.0
    links: tuple[tuple[int, int], ...] | None = None

    def cell_of(self, agent: int) -> tuple[int, int]:
        """Row-major grid cell of an initial agent (ids start at 1)."""
        k = agent - 1
        return divmod(k, self.cols)


@dataclass(frozen=True)
class TrajectorySpec:
    kind: str = "sinusoid"
    forward_speed: float = 1.0
    lateral_amplitude: float = 2.0
    frequency: float = 2.0
    position: np.ndarray | None = None
    velocity: np.ndarray | None = None

    def build(self, base: np.ndarray) -> Trajectory:
        if self.kind == "sinusoid":
            return SinusoidTrajectory(
                x0=base,
                forward_speed=self.forward_speed,
                lateral_amplitude=self.lateral_amplitude,
                frequency=self.frequency,
            )
        x0 = base if self.position is None else self.position
        return ConstantTrajectory(x0=x0, v0=self.velocity)


@dataclass(frozen=True)
class SynthesisSpec:
    mode: str = "decentralized"
    options: str | SynthesisOptions = "default"
    costs: CodesignCosts = field(default_factory=CodesignCosts)


@dataclass(frozen=True)
class SimSpec:
    horizon: float = 20.0
    dt: float = 1e-3
    initial: str = "rest"

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))


@dataclass(frozen=True)
class OutputSpec:
    log_every: int = 1


@dataclass(frozen=True)
class JoinEvent:
    time: float
    agent: int
    row: int
    col: int
    neighbors: tuple[int, ...] | None = None

    action = "join"


@dataclass(frozen=True)
class LeaveEvent:
    time: float
    agent: int

    action = "leave"


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    seed: int
    agents: AgentDefaults
    formation: FormationSpec
    trajectory: TrajectorySpec
    inner_loop: InnerLoopGains
    disturbance: DisturbanceModel
    synthesis: SynthesisSpec
    sim: SimSpec
    events: tuple[JoinEvent | LeaveEvent, ...] = ()
    output: OutputSpec = field(default_factory=OutputSpec)

    # ---- derived views -----------------------------------------------------

    def initial_ids(self) -> list[int]:
        return list(range(1, self.agents.count + 1))

    def cell(self, agent: int) -> tuple[int, int]:
        """Grid cell of any agent mentioned in the scenario."""
        for ev in self.events:
            if isinstance(ev, JoinEvent) and ev.agent == agent:
                return (ev.row, ev.col)
        if 1 <= agent <= self.agents.count:
            return self.formation.cell_of(agent)
        raise KeyError(f"agent {agent} is not part of this scenario")

    def _rng(self, agent: int, stream: int) -> np.random.Generator:
        return np.random.default_rng(
            np.random.SeedSequence([self.seed, agent, stream])
        )

    def offset(self, agent: int) -> np.ndarray:
        """Formation offset of one agent from the leader path (seeded)."""
        r, c = self.cell(agent)
        rng = self._rng(agent, _STREAM_OFFSETS)
        f = self.formation
        row_vec = (f.row_offset_mean + rng.uniform(-f.row_offset_var, f.row_offset_var)) * np.array([1.0, 0.0, 0.0])
        col_vec = (f.col_offset_mean + rng.uniform(-f.col_offset_var, f.col_offset_var)) * np.array([0.0, 1.0, 0.0])
        return (r + 1) * row_vec + c * col_vec

    def params_for(self, agent: int) -> tuple[RigidBodyParams, RigidBodyParams]:
        """(nominal, perturbed) rigid-body parameters of one agent."""
        nominal = RigidBodyParams(
            mass=self.agents.mass,
            inertia=self.agents.inertia,
            uncertainty_pct=self.agents.uncertainty_pct,
        )
        return nominal, nominal.perturbed(self._rng(agent, _STREAM_PARAMS))

    def options_for(self, agent: int) -> SynthesisOptions:
        if isinstance(self.synthesis.options, SynthesisOptions):
            return self.synthesis.options
        if self.synthesis.options == "randomized":
            seed = int(self._rng(agent, _STREAM_OPTIONS).integers(0, 2**31 - 1))
            return randomized_options(seed)
        return SynthesisOptions()

    def adjacency(self, ids: Sequence[int]) -> list[tuple[int, int]]:
        """Undirected allowed links among ``ids`` (formation rule or explicit)."""
        present = sorted(ids)
        if self.formation.links is not None:
            keep = set(present)
            return [
                (i, j)
                for (i, j) in self.formation.links
                if i in keep and j in keep
            ]
        out = []
        cells = {i: np.array(self.cell(i), dtype=float) for i in present}
        for a, i in enumerate(present):
            for j in present[a + 1 :]:
                if np.linalg.norm(cells[i] - cells[j]) <= self.formation.adjacency_radius:
                    out.append((i, j))
        return out

    def neighbors_for_join(self, event: JoinEvent, present: Sequence[int]) -> list[int]:
        if event.neighbors is not None:
            return [j for j in event.neighbors if j in set(present)]
        cell = np.array([event.row, event.col], dtype=float)
        out = []
        for j in sorted(present):
            other = np.array(self.cell(j), dtype=float)
            if np.linalg.norm(cell - other) <= self.formation.adjacency_radius:
                out.append(j)
        return out

    def leader(self) -> Trajectory:
        return self.trajectory.build(self.formation.base)


# ---------------------------------------------------------------------------
# parsing helpers
# ---------------------------------------------------------------------------


def _check_keys(section: Mapping, path: str, allowed: set[str], problems: list[str]) -> None:
    for key in section:
        if key not in allowed:
            problems.append(f"{path}: unknown key {key!r}")


def _section(doc: Mapping, key: str, problems: list[str]) -> Mapping:
    node = doc.get(key)
    if node is None:
        return {}
    if not isinstance(node, Mapping):
        problems.append(f"{key}: expected a mapping")
        return {}
    return node


def _num(node: Mapping, path: str, key: str, default: float, problems: list[str]) -> float:
    val = node.get(key, default)
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        problems.append(f"{path}.{key}: expected a number, got {val!r}")
        return default
    return float(val)


def _intval(node: Mapping, path: str, key: str, default: int, problems: list[str]) -> int:
    val = node.get(key, default)
    if isinstance(val, bool) or not isinstance(val, int):
        problems.append(f"{path}.{key}: expected an integer, got {val!r}")
        return default
    return val


def _vec3(node: Mapping, path: str, key: str, default, problems: list[str]):
    val = node.get(key, None)
    if val is None:
        return default
    arr = np.asarray(val, dtype=float) if isinstance(val, (list, tuple)) else None
    if arr is None or arr.shape != (3,):
        problems.append(f"{path}.{key}: expected a list of 3 numbers")
        return default
    return arr


def _inertia(node: Mapping, path: str, problems: list[str]) -> np.ndarray:
    val = node.get("inertia")
    default = np.diag([2.2e-3, 2.9e-3, 5.3e-3])
    if val is None:
        return default
    arr = np.asarray(val, dtype=float)
    if arr.shape == (3,):
        arr = np.diag(arr)
    if arr.shape != (3, 3):
        problems.append(f"{path}.inertia: expected 3 diagonal entries or a 3x3 matrix")
        return default
    return arr


def _parse_events(doc: Mapping, problems: list[str]) -> list[JoinEvent | LeaveEvent]:
    raw = doc.get("events")
    if raw is None:
        return []
    if not isinstance(raw, list):
        problems.append("events: expected a list")
        return []
    out: list[JoinEvent | LeaveEvent] = []
    for k, item in enumerate(raw):
        path = f"events[{k}]"
        if not isinstance(item, Mapping):
            problems.append(f"{path}: expected a mapping")
            continue
        action = item.get("action")
        if action == "join":
            _check_keys(item, path, {"time", "action", "agent", "row", "col", "neighbors"}, problems)
            nbrs = item.get("neighbors")
            if nbrs is not None and (
                not isinstance(nbrs, list) or not all(isinstance(j, int) for j in nbrs)
            ):
                problems.append(f"{path}.neighbors: expected a list of agent ids")
                nbrs = None
            out.append(
                JoinEvent(
                    time=_num(item, path, "time", 0.0, problems),
                    agent=_intval(item, path, "agent", 0, problems),
                    row=_intval(item, path, "row", 0, problems),
                    col=_intval(item, path, "col", 0, problems),
                    neighbors=tuple(nbrs) if nbrs is not None else None,
                )
            )
        elif action == "leave":
            _check_keys(item, path, {"time", "action", "agent"}, problems)
            out.append(
                LeaveEvent(
                    time=_num(item, path, "time", 0.0, problems),
                    agent=_intval(item, path, "agent", 0, problems),
                )
            )
        else:
            problems.append(f"{path}.action: expected 'join' or 'leave', got {action!r}")
    return out


def _parse_links(node: Mapping, problems: list[str]) -> tuple[tuple[int, int], ...] | None:
    raw = node.get("links")
    if raw is None:
        return None
    ok = isinstance(raw, list) and all(
        isinstance(pair, list) and len(pair) == 2 and all(isinstance(x, int) for x in pair)
        for pair in raw
    )
    if not ok:
        problems.append("formation.links: expected a list of [i, j] id pairs")
        return None
    return tuple((pair[0], pair[1]) for pair in raw)


def _parse_options(node: Mapping, problems: list[str]) -> str | SynthesisOptions:
    raw = node.get("options", "default")
    if raw in ("default", "randomized"):
        return raw
    if isinstance(raw, Mapping):
        try:
            spread = raw.get("axis_spread")
            kwargs = dict(raw)
            if spread is not None:
                kwargs["axis_spread"] = tuple(spread)
            return SynthesisOptions(**kwargs)
        except (TypeError, ValueError) as exc:
            problems.append(f"synthesis.options: {exc}")
            return "default"
    problems.append(
        f"synthesis.options: expected 'default', 'randomized', or a mapping, got {raw!r}"
    )
    return "default"


def loads_scenario(text: str, *, name_hint: str = "scenario") -> ScenarioConfig:
    """Parse and validate a scenario document from a string."""
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ParseError(f"config is not valid YAML{where}: {exc}") from exc
    if doc is None:
        raise ParseError("config is empty")
    if not isinstance(doc, Mapping):
        raise ParseError("config top level must be a mapping")

    problems: list[str] = []
    _check_keys(
        doc,
        "top level",
        {
            "name", "seed", "agents", "formation", "trajectory", "inner_loop",
            "disturbance", "synthesis", "sim", "events", "output",
        },
        problems,
    )

    name = doc.get("name", name_hint)
    if not isinstance(name, str):
        problems.append(f"name: expected a string, got {name!r}")
        name = name_hint
    seed = _intval(doc, "top level", "seed", 0, problems)

    ag = _section(doc, "agents", problems)
    _check_keys(ag, "agents", {"count", "mass", "inertia", "uncertainty_pct"}, problems)
    count = _intval(ag, "agents", "count", 0, problems)
    agents = AgentDefaults(
        count=count,
        mass=_num(ag, "agents", "mass", 0.55, problems),
        inertia=_inertia(ag, "agents", problems),
        uncertainty_pct=_num(ag, "agents", "uncertainty_pct", 0.10, problems),
    )

    fo = _section(doc, "formation", problems)
    _check_keys(
        fo,
        "formation",
        {
            "rows", "cols", "base", "row_offset_mean", "row_offset_var",
            "col_offset_mean", "col_offset_var", "adjacency_radius", "links",
        },
        problems,
    )
    default_cols = max(1, math.ceil(math.sqrt(max(count, 1))))
    cols = _intval(fo, "formation", "cols", default_cols, problems)
    rows = _intval(fo, "formation", "rows", max(1, math.ceil(max(count, 1) / max(cols, 1))), problems)
    formation = FormationSpec(
        rows=rows,
        cols=cols,
        base=_vec3(fo, "formation", "base", np.zeros(3), problems),
        row_offset_mean=_num(fo, "formation", "row_offset_mean", -2.0, problems),
        row_offset_var=_num(fo, "formation", "row_offset_var", 0.5, problems),
        col_offset_mean=_num(fo, "formation", "col_offset_mean", 2.5, problems),
        col_offset_var=_num(fo, "formation", "col_offset_var", 0.5, problems),
        adjacency_radius=_num(fo, "formation", "adjacency_radius", 2.0, problems),
        links=_parse_links(fo, problems),
    )

    tr = _section(doc, "trajectory", problems)
    _check_keys(
        tr,
        "trajectory",
        {"kind", "forward_speed", "lateral_amplitude", "frequency", "position", "velocity"},
        problems,
    )
    kind = tr.get("kind", "sinusoid")
    if kind not in ("sinusoid", "constant"):
        problems.append(f"trajectory.kind: expected 'sinusoid' or 'constant', got {kind!r}")
        kind = "sinusoid"
    trajectory = TrajectorySpec(
        kind=kind,
        forward_speed=_num(tr, "trajectory", "forward_speed", 1.0, problems),
        lateral_amplitude=_num(tr, "trajectory", "lateral_amplitude", 2.0, problems),
        frequency=_num(tr, "trajectory", "frequency", 2.0, problems),
        position=_vec3(tr, "trajectory", "position", None, problems),
        velocity=_vec3(tr, "trajectory", "velocity", None, problems),
    )

    il = _section(doc, "inner_loop", problems)
    _check_keys(il, "inner_loop", {"k_R", "k_Omega"}, problems)
    inner = InnerLoopGains(
        k_R=_num(il, "inner_loop", "k_R", 50.0, problems),
        k_Omega=_num(il, "inner_loop", "k_Omega", 50.0, problems),
    )

    di = _section(doc, "disturbance", problems)
    _check_keys(di, "disturbance", {"sigma", "seed", "enabled"}, problems)
    enabled = di.get("enabled", True)
    if not isinstance(enabled, bool):
        problems.append(f"disturbance.enabled: expected true/false, got {enabled!r}")
        enabled = True
    disturbance = DisturbanceModel(
        sigma=_num(di, "disturbance", "sigma", 0.1, problems),
        seed=_intval(di, "disturbance", "seed", 0, problems),
        enabled=enabled,
    )

    sy = _section(doc, "synthesis", problems)
    _check_keys(sy, "synthesis", {"mode", "options", "costs"}, problems)
    mode = sy.get("mode", "decentralized")
    if mode not in ("centralized", "decentralized"):
        problems.append(f"synthesis.mode: expected 'centralized' or 'decentralized', got {mode!r}")
        mode = "decentralized"
    co = _section(sy, "costs", problems)
    _check_keys(co, "synthesis.costs", {"edge_l1", "gamma", "anchor", "gamma_max"}, problems)
    base_costs = CodesignCosts()
    costs = CodesignCosts(
        edge_l1=_num(co, "synthesis.costs", "edge_l1", base_costs.edge_l1, problems),
        gamma=_num(co, "synthesis.costs", "gamma", base_costs.gamma, problems),
        anchor=_num(co, "synthesis.costs", "anchor", base_costs.anchor, problems),
        gamma_max=_num(co, "synthesis.costs", "gamma_max", base_costs.gamma_max, problems),
    )
    synthesis = SynthesisSpec(mode=mode, options=_parse_options(sy, problems), costs=costs)

    si = _section(doc, "sim", problems)
    _check_keys(si, "sim", {"horizon", "dt", "initial"}, problems)
    initial = si.get("initial", "rest")
    if initial not in ("rest", "on_trajectory"):
        problems.append(f"sim.initial: expected 'rest' or 'on_trajectory', got {initial!r}")
        initial = "rest"
    sim = SimSpec(
        horizon=_num(si, "sim", "horizon", 20.0, problems),
        dt=_num(si, "sim", "dt", 1e-3, problems),
        initial=initial,
    )

    ou = _section(doc, "output", problems)
    _check_keys(ou, "output", {"log_every"}, problems)
    output = OutputSpec(log_every=_intval(ou, "output", "log_every", 1, problems))

    events = _parse_events(doc, problems)

    _validate(agents, formation, sim, output, events, problems)
    if problems:
        raise ValidationError(problems)

    return ScenarioConfig(
        name=name,
        seed=seed,
        agents=agents,
        formation=formation,
        trajectory=trajectory,
        inner_loop=inner,
        disturbance=disturbance,
        synthesis=synthesis,
        sim=sim,
        events=tuple(events),
        output=output,
    )


def _validate(
    agents: AgentDefaults,
    formation: FormationSpec,
    sim: SimSpec,
    output: OutputSpec,
    events: list[JoinEvent | LeaveEvent],
    problems: list[str],
) -> None:
    if agents.count < 1:
        problems.append("agents.count: need at least one agent")
    if agents.mass <= 0.0:
        problems.append("agents.mass: must be positive")
    if not 0.0 <= agents.uncertainty_pct < 1.0:
        problems.append("agents.uncertainty_pct: must be in [0, 1)")
    eigs = np.linalg.eigvalsh(0.5 * (agents.inertia + agents.inertia.T))
    if eigs.min() <= 0.0 or not np.allclose(agents.inertia, agents.inertia.T):
        problems.append("agents.inertia: must be symmetric positive definite")

    if formation.rows < 1 or formation.cols < 1:
        problems.append("formation: rows and cols must be positive")
    elif formation.rows * formation.cols < agents.count:
        problems.append(
            f"formation: grid {formation.rows}x{formation.cols} cannot hold "
            f"{agents.count} agents"
        )
    if formation.adjacency_radius <= 0.0:
        problems.append("formation.adjacency_radius: must be positive")
    if formation.row_offset_var < 0.0 or formation.col_offset_var < 0.0:
        problems.append("formation: offset variances must be nonnegative")

    if sim.dt <= 0.0:
        problems.append("sim.dt: must be positive")
    elif sim.dt > DT_MAX:
        problems.append(f"sim.dt: {sim.dt} exceeds the integrator limit {DT_MAX}")
    if sim.horizon <= 0.0:
        problems.append("sim.horizon: must be positive")
    elif sim.dt > 0.0 and sim.horizon < sim.dt:
        problems.append("sim.horizon: must cover at least one step")

    if output.log_every < 1:
        problems.append("output.log_every: must be >= 1")

    if formation.links is not None:
        known = set(range(1, agents.count + 1)) | {
            ev.agent for ev in events if isinstance(ev, JoinEvent)
        }
        for i, j in formation.links:
            if i == j:
                problems.append(f"formation.links: self link [{i}, {j}]")
            if i not in known or j not in known:
                problems.append(f"formation.links: [{i}, {j}] references an unknown agent")

    last_t = 0.0
    present = set(range(1, max(agents.count, 0) + 1))
    cells = {formation.cell_of(i): i for i in present}
    for k, ev in enumerate(events):
        path = f"events[{k}]"
        if ev.time < 0.0:
            problems.append(f"{path}: time must be nonnegative")
        if ev.time < last_t:
            problems.append(f"{path}: events must be time-ordered")
        last_t = max(last_t, ev.time)
        if ev.time > sim.horizon:
            problems.append(f"{path}: time {ev.time} is beyond the horizon {sim.horizon}")
        if isinstance(ev, JoinEvent):
            if ev.agent in present:
                problems.append(f"{path}: agent {ev.agent} already exists at t={ev.time}")
            cell_owner = cells.get((ev.row, ev.col))
            if cell_owner is not None:
                problems.append(
                    f"{path}: cell ({ev.row}, {ev.col}) is occupied by agent {cell_owner}"
                )
            if ev.neighbors is not None:
                for j in ev.neighbors:
                    if j not in present:
                        problems.append(
                            f"{path}: neighbor {j} is not present at t={ev.time}"
                        )
            present.add(ev.agent)
            cells[(ev.row, ev.col)] = ev.agent
        else:
            if ev.agent not in present:
                problems.append(f"{path}: agent {ev.agent} is not present at t={ev.time}")
            else:
                present.discard(ev.agent)
                cells = {cell: a for cell, a in cells.items() if a != ev.agent}


def load_scenario(path: str | Path) -> ScenarioConfig:
    """Load and validate a scenario file."""
    p = Path(path)
    if not p.is_file():
        raise ParseError(f"{p}: no such file")
    return loads_scenario(p.read_text(encoding="utf-8"), name_hint=p.stem)


def builtin_scenario_names() -> list[str]:
    """Names of the scenarios shipped inside the package."""
    pkg = resources.files("meshnet.scenarios")
    return sorted(
        entry.name.removesuffix(".yaml")
        for entry in pkg.iterdir()
        if entry.name.endswith(".yaml")
    )


def builtin_scenario(name: str) -> ScenarioConfig:
    """Load one of the shipped scenarios by name."""
    pkg = resources.files("meshnet.scenarios")
    entry = pkg.joinpath(f"{name}.yaml")
    if not entry.is_file():
        raise ParseError(
            f"no builtin scenario {name!r}; available: {', '.join(builtin_scenario_names())}"
        )
    return loads_scenario(entry.read_text(encoding="utf-8"), name_hint=name)
