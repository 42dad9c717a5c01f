"""Command-line front end.

Subcommands: synth-local, codesign, simulate, check-sms, report.  Configs are
file paths or ``builtin:<name>`` for a shipped scenario.  Exit codes: 0 on
success, 2 infeasible synthesis, 3 bad input (usage, config, missing file),
4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from ..codesign import (
    centralized_codesign,
    decentralized_codesign,
    gains_from_json,
    gains_to_json,
    local_synthesis,
    profile_to_dict,
)
from ..dynamics import IntegrationDiverged
from ..lmi import Infeasible, NumericalFailure, PriorNotPD
from .metrics import Metrics, check_sms
from .reporting import read_timeseries, write_plotdata, write_run
from .scenario import (
    ParseError,
    ScenarioConfig,
    ValidationError,
    builtin_scenario,
    load_scenario,
)
from .simulate import run

__all__ = ["main", "UsageError"]

EXIT_OK = 0
EXIT_INFEASIBLE = 2
EXIT_VALIDATION = 3
EXIT_NUMERICAL = 4


class UsageError(Exception):
    """Bad command line (argparse would normally sys.exit on this)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # keep exit-code control in main()
        raise UsageError(message)


def _load_config(source: str) -> ScenarioConfig:
    if source.startswith("builtin:"):
        return builtin_scenario(source[len("builtin:"):])
    return load_scenario(source)


def _cmd_synth_local(args) -> int:
    config = _load_config(args.config)
    payload = {}
    for agent in config.initial_ids():
        profile = local_synthesis(config.options_for(agent))
        payload[str(agent)] = profile_to_dict(profile)
    out = Path(args.output)
    out.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    print(f"wrote {len(payload)} local profiles to {out}")
    return EXIT_OK


def _cmd_codesign(args) -> int:
    config = _load_config(args.config)
    mode = args.mode or config.synthesis.mode
    ids = config.initial_ids()
    profiles = {i: local_synthesis(config.options_for(i)) for i in ids}
    links = config.adjacency(ids)
    synth = centralized_codesign if mode == "centralized" else decentralized_codesign
    solution = synth(profiles, links, config.synthesis.costs)
    out = Path(args.output)
    out.write_text(gains_to_json(solution) + "\n", encoding="utf-8")
    print(
        f"{mode} co-design for {len(ids)} agents, {len(links)} links: "
        f"gamma = {solution.gamma:.4f}, wrote {out}"
    )
    return EXIT_OK


def _cmd_simulate(args) -> int:
    config = _load_config(args.config)
    gains_path = Path(args.gains)
    if not gains_path.is_file():
        raise FileNotFoundError(f"{gains_path}: no such gains file")
    gains = gains_from_json(gains_path.read_text(encoding="utf-8"))
    output, metrics = run(config, gains)
    paths = write_run(output, metrics, args.output)
    print(
        f"simulated '{config.name}': {output.n_steps} steps, "
        f"{len(output.traces)} agents, {len(output.events)} events"
    )
    l2 = "n/a" if metrics.l2_estimate is None else f"{metrics.l2_estimate:.4f}"
    print(
        f"sup |e| = {metrics.sup_outer_network:.4f}, "
        f"empirical gain = {l2}, certified gamma = {metrics.gamma:.4f}"
    )
    for name in ("timeseries", "metrics", "events", "gains"):
        print(f"  {paths[name]}")
    return EXIT_OK


def _cmd_check_sms(args) -> int:
    runs = []
    for outdir in args.outdirs:
        d = Path(outdir)
        metrics_path = d / "metrics.json"
        gains_path = d / "gains-final.json"
        if not metrics_path.is_file():
            raise FileNotFoundError(f"{metrics_path}: no such file (run simulate first)")
        if not gains_path.is_file():
            raise FileNotFoundError(f"{gains_path}: no such file (run simulate first)")
        metrics = Metrics.from_dict(json.loads(metrics_path.read_text(encoding="utf-8")))
        solution = gains_from_json(gains_path.read_text(encoding="utf-8"))
        runs.append((solution, metrics))
    report = check_sms(runs, tol_sms=args.tol)
    for line in report.lines():
        print(line)
    return EXIT_OK


def _cmd_report(args) -> int:
    d = Path(args.outdir)
    if args.format == "csv":
        target = d / "timeseries.csv"
        if not target.is_file():
            raise FileNotFoundError(f"{target}: no such file (run simulate first)")
        print(target)
        return EXIT_OK
    if args.format == "json":
        target = d / "metrics.json"
        if not target.is_file():
            raise FileNotFoundError(f"{target}: no such file (run simulate first)")
        print(target)
        return EXIT_OK
    series = d / "timeseries.csv"
    if not series.is_file():
        raise FileNotFoundError(f"{series}: no such file (run simulate first)")
    traces = read_timeseries(series)
    for path in write_plotdata(traces, d):
        print(path)
    return EXIT_OK


def _build_parser() -> _Parser:
    parser = _Parser(
        prog="meshnet",
        description="Passivity-based formation co-design and simulation.",
    )
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser(
        "synth-local",
        help="synthesize per-agent local gains and certificates",
        description="Run local synthesis for every initial agent of a scenario.",
    )
    p.add_argument("config", help="scenario file or builtin:<name>")
    p.add_argument("-o", "--output", default="gains-local.json",
                   help="output JSON path (default gains-local.json)")
    p.set_defaults(func=_cmd_synth_local)

    p = sub.add_parser(
        "codesign",
        help="co-design the coupling topology and gains",
        description="Synthesize the full network gain set for a scenario.",
    )
    p.add_argument("config", help="scenario file or builtin:<name>")
    p.add_argument("--mode", choices=("centralized", "decentralized"), default=None,
                   help="override the scenario's synthesis mode")
    p.add_argument("-o", "--output", default="gains.json",
                   help="output JSON path (default gains.json)")
    p.set_defaults(func=_cmd_codesign)

    p = sub.add_parser(
        "simulate",
        help="run the closed-loop scenario",
        description="Simulate a scenario under a synthesized gain set and "
                    "write the run bundle.",
    )
    p.add_argument("config", help="scenario file or builtin:<name>")
    p.add_argument("--gains", required=True, help="gains JSON from codesign")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser(
        "check-sms",
        help="mesh-stability report over completed runs",
        description="Evaluate the weak-coupling, scaling, and envelope "
                    "criteria over one or more run directories.",
    )
    p.add_argument("outdirs", nargs="+", help="simulate output directories")
    p.add_argument("--tol", type=float, default=0.10,
                   help="relative scaling tolerance band (default 0.10)")
    p.set_defaults(func=_cmd_check_sms)

    p = sub.add_parser(
        "report",
        help="export run files in a chosen format",
        description="Point at the main artifact of a run, or regenerate "
                    "plot-data tables from the time series.",
    )
    p.add_argument("outdir", help="simulate output directory")
    p.add_argument("--format", choices=("csv", "json", "plotdata"), default="csv")
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "func", None) is None:
            raise UsageError("a subcommand is required (see --help)")
        return args.func(args)
    except (UsageError, ParseError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Infeasible as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (IntegrationDiverged, NumericalFailure, PriorNotPD,
            np.linalg.LinAlgError, ArithmeticError, RuntimeError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    raise SystemExit(main())
