"""Scenario configuration, closed-loop network simulation, metrics, CLI."""

from .scenario import (
    AgentDefaults,
    FormationSpec,
    JoinEvent,
    LeaveEvent,
    OutputSpec,
    ParseError,
    ScenarioConfig,
    ScenarioError,
    SimSpec,
    SynthesisSpec,
    TrajectorySpec,
    ValidationError,
    builtin_scenario,
    builtin_scenario_names,
    load_scenario,
    loads_scenario,
)
from .simulate import AgentTrace, EventRecord, SimOutput, run
from .metrics import (
    AgentMetrics,
    Metrics,
    SmsReport,
    ZeroDisturbance,
    check_sms,
    compute_metrics,
    estimate_l2_gain,
)
from .reporting import (
    CSV_COLUMNS,
    read_timeseries,
    write_events,
    write_gains,
    write_metrics,
    write_plotdata,
    write_run,
    write_timeseries,
)

__all__ = [
    "AgentDefaults",
    "FormationSpec",
    "JoinEvent",
    "LeaveEvent",
    "OutputSpec",
    "ParseError",
    "ScenarioConfig",
    "ScenarioError",
    "SimSpec",
    "SynthesisSpec",
    "TrajectorySpec",
    "ValidationError",
    "builtin_scenario",
    "builtin_scenario_names",
    "load_scenario",
    "loads_scenario",
    "AgentTrace",
    "EventRecord",
    "SimOutput",
    "run",
    "AgentMetrics",
    "Metrics",
    "SmsReport",
    "ZeroDisturbance",
    "check_sms",
    "compute_metrics",
    "estimate_l2_gain",
    "CSV_COLUMNS",
    "read_timeseries",
    "write_events",
    "write_gains",
    "write_metrics",
    "write_plotdata",
    "write_run",
    "write_timeseries",
]
