"""File outputs: time-series CSV, metrics/events/gains JSON, plot data.

The CSV schema is fixed (one row per logged step per agent, sorted by
(step, agent)); floats are written with shortest-roundtrip repr so identical
runs produce byte-identical files.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from ..codesign import gains_to_json
from .metrics import Metrics
from .simulate import AgentTrace, EventRecord, SimOutput

__all__ = [
    "CSV_COLUMNS",
    "write_timeseries",
    "read_timeseries",
    "write_metrics",
    "write_events",
    "write_gains",
    "write_plotdata",
    "write_run",
]

CSV_COLUMNS = (
    "step", "t", "agent",
    "x0", "x1", "x2",
    "v0", "v1", "v2",
    "R00", "R01", "R02", "R10", "R11", "R12", "R20", "R21", "R22",
    "Omega0", "Omega1", "Omega2",
    "e_x0", "e_x1", "e_x2",
    "e_v0", "e_v1", "e_v2",
    "e_R0", "e_R1", "e_R2",
    "e_Omega0", "e_Omega1", "e_Omega2",
    "f",
    "M0", "M1", "M2",
    "d_v0", "d_v1", "d_v2",
    "d_Omega0", "d_Omega1", "d_Omega2",
    "X_norm",
    "w_v0", "w_v1", "w_v2",
)


def _trace_rows(trace: AgentTrace) -> list[tuple]:
    n = len(trace)
    cols = [
        trace.steps.tolist(),
        trace.t.tolist(),
        [trace.agent] * n,
    ]
    for arr in (trace.x, trace.v):
        cols += [arr[:, k].tolist() for k in range(3)]
    flat_r = trace.R.reshape(n, 9)
    cols += [flat_r[:, k].tolist() for k in range(9)]
    for arr in (trace.Omega, trace.e_x, trace.e_v, trace.e_R, trace.e_Omega):
        cols += [arr[:, k].tolist() for k in range(3)]
    cols.append(trace.f.tolist())
    for arr in (trace.M, trace.d_v, trace.d_Omega):
        cols += [arr[:, k].tolist() for k in range(3)]
    cols.append(trace.coupling_mag.tolist())
    cols += [trace.w_v[:, k].tolist() for k in range(3)]
    return list(zip(*cols))


def write_timeseries(output: SimOutput, path: str | Path) -> Path:
    """One row per logged step per agent, sorted by (step, agent)."""
    rows: list[tuple] = []
    for agent in sorted(output.traces):
        rows.extend(_trace_rows(output.traces[agent]))
    rows.sort(key=lambda row: (row[0], row[2]))
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        writer.writerows(rows)
    return path


def read_timeseries(path: str | Path) -> dict[int, AgentTrace]:
    """Rebuild per-agent traces from a time-series CSV."""
    path = Path(path)
    with path.open("r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader, ()))
        if header != CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected column schema")
        by_agent: dict[int, list[list[float]]] = {}
        for row in reader:
            by_agent.setdefault(int(row[2]), []).append(
                [float(cell) for cell in row]
            )
    traces = {}
    for agent, rows in sorted(by_agent.items()):
        rows.sort(key=lambda r: r[0])
        data = np.asarray(rows, dtype=float)
        traces[agent] = AgentTrace(
            agent=agent,
            steps=data[:, 0].astype(int),
            t=data[:, 1],
            x=data[:, 3:6],
            v=data[:, 6:9],
            R=data[:, 9:18].reshape(-1, 3, 3),
            Omega=data[:, 18:21],
            e_x=data[:, 21:24],
            e_v=data[:, 24:27],
            e_R=data[:, 27:30],
            e_Omega=data[:, 30:33],
            f=data[:, 33],
            M=data[:, 34:37],
            d_v=data[:, 37:40],
            d_Omega=data[:, 40:43],
            coupling_mag=data[:, 43],
            w_v=data[:, 44:47],
        )
    return traces


def write_metrics(metrics: Metrics, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(
        json.dumps(metrics.to_dict(), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    return path


def write_events(events: Iterable[EventRecord], path: str | Path) -> Path:
    payload = [
        {
            "step": ev.step,
            "time": ev.time,
            "action": ev.action,
            "agent": ev.agent,
            "neighbors": list(ev.neighbors),
            "gamma": ev.gamma,
        }
        for ev in events
    ]
    path = Path(path)
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    return path


def write_gains(solution, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(gains_to_json(solution) + "\n", encoding="utf-8")
    return path


def write_plotdata(traces: Mapping[int, AgentTrace], outdir: str | Path) -> list[Path]:
    """Tabular per-panel data: translation tracking, attitude errors, and the
    network error envelope over time."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []

    trans = outdir / "translation.csv"
    with trans.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ("step", "t", "agent")
            + tuple(f"x{k}" for k in range(3))
            + tuple(f"v{k}" for k in range(3))
            + tuple(f"e_x{k}" for k in range(3))
            + tuple(f"e_v{k}" for k in range(3))
        )
        rows = []
        for agent in sorted(traces):
            tr = traces[agent]
            cols = [tr.steps.tolist(), tr.t.tolist(), [agent] * len(tr)]
            for arr in (tr.x, tr.v, tr.e_x, tr.e_v):
                cols += [arr[:, k].tolist() for k in range(3)]
            rows.extend(zip(*cols))
        rows.sort(key=lambda row: (row[0], row[2]))
        writer.writerows(rows)
    written.append(trans)

    att = outdir / "attitude.csv"
    with att.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ("step", "t", "agent")
            + tuple(f"e_R{k}" for k in range(3))
            + tuple(f"e_Omega{k}" for k in range(3))
        )
        rows = []
        for agent in sorted(traces):
            tr = traces[agent]
            cols = [tr.steps.tolist(), tr.t.tolist(), [agent] * len(tr)]
            for arr in (tr.e_R, tr.e_Omega):
                cols += [arr[:, k].tolist() for k in range(3)]
            rows.extend(zip(*cols))
        rows.sort(key=lambda row: (row[0], row[2]))
        writer.writerows(rows)
    written.append(att)

    env = outdir / "envelope.csv"
    outer_sup: dict[int, float] = {}
    inner_sup: dict[int, float] = {}
    step_t: dict[int, float] = {}
    for tr in traces.values():
        outer = np.linalg.norm(tr.outer, axis=-1)
        inner = np.linalg.norm(tr.inner, axis=-1)
        for k, s in enumerate(tr.steps.tolist()):
            step_t[s] = tr.t[k]
            outer_sup[s] = max(outer_sup.get(s, 0.0), float(outer[k]))
            inner_sup[s] = max(inner_sup.get(s, 0.0), float(inner[k]))
    with env.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("step", "t", "outer_sup", "inner_sup"))
        for s in sorted(step_t):
            writer.writerow((s, step_t[s], outer_sup[s], inner_sup[s]))
    written.append(env)
    return written


def write_run(output: SimOutput, metrics: Metrics, outdir: str | Path) -> dict[str, Path]:
    """Standard run bundle: timeseries.csv, metrics.json, events.json,
    gains-final.json."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    return {
        "timeseries": write_timeseries(output, outdir / "timeseries.csv"),
        "metrics": write_metrics(metrics, outdir / "metrics.json"),
        "events": write_events(output.events, outdir / "events.json"),
        "gains": write_gains(output.gains_final, outdir / "gains-final.json"),
    }
