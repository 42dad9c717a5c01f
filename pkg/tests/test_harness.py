"""Closed-loop harness tests: runs, membership events, metrics, file
outputs, and the command-line surface.

The two workhorse fixtures are a disturbance-free hover (exact equilibrium,
so every error channel must be identically zero) and a seeded 1-second run
with one join and one leave, compared against an event-free twin sharing the
same synthesized gains.  Disturbances are counter-based, so equality checks
between runs are bitwise, not approximate.
"""

from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest

from meshnet.codesign import decentralized_codesign, local_synthesis
from meshnet.dynamics import DisturbanceModel
from meshnet.harness.cli import (
    EXIT_INFEASIBLE,
    EXIT_NUMERICAL,
    EXIT_OK,
    EXIT_VALIDATION,
    main,
)
from meshnet.harness.metrics import (
    AgentMetrics,
    Metrics,
    ZeroDisturbance,
    _convergence_time,
    check_sms,
    estimate_l2_gain,
)
from meshnet.harness.reporting import (
    CSV_COLUMNS,
    read_timeseries,
    write_events,
    write_metrics,
    write_plotdata,
    write_run,
    write_timeseries,
)
from meshnet.harness.scenario import builtin_scenario, loads_scenario
from meshnet.harness.simulate import AgentTrace, run

JOIN_DOC = """
name: joinrun
seed: 5
agents: {count: 3}
formation: {rows: 2, cols: 2}
disturbance: {sigma: 0.1, seed: 5, enabled: true}
sim: {horizon: 1.0, dt: 0.001}
events:
  - {action: join, agent: 4, time: 0.5, row: 1, col: 1}
  - {action: leave, agent: 2, time: 0.8}
"""

# identical plant, trajectory, and noise stream; no membership changes
BASE_DOC = """
name: baserun
seed: 5
agents: {count: 3}
formation: {rows: 2, cols: 2}
disturbance: {sigma: 0.1, seed: 5, enabled: true}
sim: {horizon: 1.0, dt: 0.001}
"""


def _synthesize(config):
    ids = config.initial_ids()
    profiles = {i: local_synthesis(config.options_for(i)) for i in ids}
    return decentralized_codesign(
        profiles, config.adjacency(ids), config.synthesis.costs
    )


@pytest.fixture(scope="module")
def hover():
    config = builtin_scenario("hover_smoke")
    solution = _synthesize(config)
    output, metrics = run(config, solution)
    return SimpleNamespace(
        config=config, solution=solution, output=output, metrics=metrics
    )


@pytest.fixture(scope="module")
def joinrun():
    config = loads_scenario(JOIN_DOC)
    solution = _synthesize(config)
    output, metrics = run(config, solution)
    return SimpleNamespace(
        config=config, solution=solution, output=output, metrics=metrics
    )


@pytest.fixture(scope="module")
def baserun(joinrun):
    config = loads_scenario(BASE_DOC)
    output, metrics = run(config, joinrun.solution)
    return SimpleNamespace(config=config, output=output, metrics=metrics)


def mktrace(agent, t, e_x=None, e_v=None, w_v=None):
    """Minimal synthetic trace; unspecified channels are zero."""
    t = np.asarray(t, dtype=float)
    n = len(t)
    z = np.zeros((n, 3))

    def pick(arr):
        return z.copy() if arr is None else np.asarray(arr, dtype=float)

    return AgentTrace(
        agent=agent,
        steps=np.arange(n),
        t=t,
        x=z.copy(),
        v=z.copy(),
        R=np.broadcast_to(np.eye(3), (n, 3, 3)).copy(),
        Omega=z.copy(),
        e_x=pick(e_x),
        e_v=pick(e_v),
        e_R=z.copy(),
        e_Omega=z.copy(),
        f=np.zeros(n),
        M=z.copy(),
        d_v=z.copy(),
        d_Omega=z.copy(),
        coupling_mag=np.zeros(n),
        w_v=pick(w_v),
    )


class TestHoverRun:
    def test_equilibrium_is_exact(self, hover):
        # hover at the leader point with zero noise never leaves equilibrium
        assert hover.metrics.sup_outer_network == 0.0
        for m in hover.metrics.per_agent.values():
            assert m.sup_inner == 0.0
            assert m.iss_residual == 0.0
            assert m.convergence_time == 0.0

    def test_zero_disturbance_has_no_gain_estimate(self, hover):
        assert hover.metrics.l2_estimate is None
        with pytest.raises(ZeroDisturbance):
            estimate_l2_gain(hover.output)

    def test_residual_channel_is_zero(self, hover):
        for trace in hover.output.traces.values():
            assert np.all(trace.w_v == 0.0)
            assert np.all(trace.d_v == 0.0)

    def test_trace_shapes(self, hover):
        assert sorted(hover.output.traces) == [1, 2]
        for trace in hover.output.traces.values():
            assert len(trace) == 2000
            assert np.array_equal(trace.steps, np.arange(2000))
            assert np.array_equal(trace.t, trace.steps * hover.config.sim.dt)
            assert trace.outer.shape == (2000, 6)
            assert trace.inner.shape == (2000, 6)
            assert trace.coupling_mag.shape == (2000,)
            assert trace.R.shape == (2000, 3, 3)

    def test_metrics_carry_certified_gamma(self, hover):
        assert hover.metrics.gamma == hover.solution.gamma
        assert hover.metrics.n_agents == 2
        assert hover.metrics.scenario == "hover_smoke"

    def test_gains_missing_an_initial_agent(self, hover):
        config = hover.config
        prof = local_synthesis(config.options_for(1))
        partial = decentralized_codesign({1: prof}, [], config.synthesis.costs)
        with pytest.raises(ValueError, match=r"missing initial agents \[2\]"):
            run(config, partial)


class TestDisturbanceModel:
    def test_draws_are_counter_based(self):
        model = DisturbanceModel(sigma=0.3, seed=11)
        a = model.sample(4, 250)
        b = model.sample(4, 250)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_draws_ignore_sampling_order(self):
        model = DisturbanceModel(sigma=0.3, seed=11)
        before = model.sample(2, 7)
        model.sample(99, 7)
        model.sample(2, 8)
        after = model.sample(2, 7)
        assert np.array_equal(before[0], after[0])

    def test_stack_matches_individual_draws(self):
        model = DisturbanceModel(sigma=0.5, seed=3)
        d_v, d_om = model.sample_stack([5, 1, 9], 42)
        for row, agent in enumerate([5, 1, 9]):
            one_v, one_om = model.sample(agent, 42)
            assert np.array_equal(d_v[row], one_v)
            assert np.array_equal(d_om[row], one_om)

    def test_disabled_and_zero_sigma_are_silent(self):
        for model in (
            DisturbanceModel(sigma=0.5, enabled=False),
            DisturbanceModel(sigma=0.0, enabled=True),
        ):
            d_v, d_om = model.sample(1, 0)
            assert np.all(d_v == 0.0) and np.all(d_om == 0.0)


class TestEventsAndSegments:
    def test_segment_lengths(self, joinrun):
        traces = joinrun.output.traces
        assert sorted(traces) == [1, 2, 3, 4]
        assert len(traces[1]) == 1000
        assert len(traces[3]) == 1000
        # leaver logs its last sample the step before the event fires
        assert len(traces[2]) == 800
        assert traces[2].steps[-1] == 799
        # joiner's first sample is the event step itself
        assert len(traces[4]) == 500
        assert traces[4].steps[0] == 500
        assert traces[4].t[0] == pytest.approx(0.5)

    def test_event_log(self, joinrun):
        ev_join, ev_leave = joinrun.output.events
        assert (ev_join.step, ev_join.time) == (500, pytest.approx(0.5))
        assert (ev_join.action, ev_join.agent) == ("join", 4)
        assert ev_join.neighbors == (1, 2, 3)
        assert (ev_leave.step, ev_leave.time) == (800, pytest.approx(0.8))
        assert (ev_leave.action, ev_leave.agent) == ("leave", 2)
        assert ev_leave.neighbors == (1, 3, 4)
        assert ev_join.gamma > 0.0 and np.isfinite(ev_leave.gamma)

    def test_final_roster(self, joinrun):
        assert joinrun.output.gains_final.ids() == [1, 3, 4]
        assert list(joinrun.output.departed) == [2]

    def test_record_for_reaches_departed_agents(self, joinrun):
        rec, k_row = joinrun.output.record_for(2)
        assert rec.R.shape == (6, 6)
        assert 2 in k_row
        rec4, k_row4 = joinrun.output.record_for(4)
        assert rec4.position > 0
        with pytest.raises(KeyError, match="never appeared"):
            joinrun.output.record_for(99)

    def test_join_converges_immediately(self, joinrun):
        # rendezvous spawn: the entrant starts inside the band
        m = joinrun.metrics.per_agent[4]
        assert m.convergence_time == pytest.approx(0.5)
        assert m.sup_outer < 1.0

    def test_iss_envelopes_hold_under_noise(self, joinrun):
        for m in joinrun.metrics.per_agent.values():
            assert m.iss_residual <= 0.0

    def test_gain_estimate_under_certified_budget(self, joinrun):
        assert joinrun.metrics.l2_estimate is not None
        assert joinrun.metrics.l2_estimate <= joinrun.metrics.gamma


class TestMergeNonInterference:
    PREJOIN = 500
    STATE = ("x", "v", "R", "Omega", "e_x", "e_v", "e_R", "e_Omega")
    CONTROL = ("f", "M", "w_v", "d_v", "d_Omega")

    def test_prejoin_samples_bitwise_equal(self, joinrun, baserun):
        for agent in (1, 2, 3):
            tr = joinrun.output.traces[agent]
            base = baserun.output.traces[agent]
            for name in self.STATE + self.CONTROL:
                assert np.array_equal(
                    getattr(tr, name)[: self.PREJOIN],
                    getattr(base, name)[: self.PREJOIN],
                ), f"agent {agent} field {name} diverged before the join"

    def test_join_step_state_is_prejoin_history(self, joinrun, baserun):
        # the sample at the event step is still produced by the old roster
        for agent in (1, 2, 3):
            tr = joinrun.output.traces[agent]
            base = baserun.output.traces[agent]
            for name in self.STATE:
                assert np.array_equal(
                    getattr(tr, name)[self.PREJOIN],
                    getattr(base, name)[self.PREJOIN],
                )

    def test_join_leaves_existing_blocks_alone(self, joinrun):
        sol = joinrun.solution
        final = joinrun.output.gains_final
        # the pre-run solution object was not touched by the run
        assert sol.ids() == [1, 2, 3]
        for agent in (1, 3):
            assert np.array_equal(
                final.agents[agent].L_bar.rows(), sol.agents[agent].L_bar.rows()
            )
            assert np.array_equal(
                final.agents[agent].R, sol.agents[agent].R
            )
        assert np.array_equal(final.K[(1, 3)].rows(), sol.K[(1, 3)].rows())
        assert np.array_equal(final.K[(3, 1)].rows(), sol.K[(3, 1)].rows())

    def test_leave_removes_all_traffic_to_leaver(self, joinrun):
        final = joinrun.output.gains_final
        assert 2 not in final.agents
        for i, j in final.K:
            assert 2 not in (i, j)
        assert final.k0_invariant_violation() < 1e-9


class TestDeterminism:
    def test_repeated_run_is_byte_identical(self, joinrun, tmp_path):
        first = write_timeseries(joinrun.output, tmp_path / "a.csv")
        output2, _ = run(joinrun.config, joinrun.solution)
        second = write_timeseries(output2, tmp_path / "b.csv")
        assert first.read_bytes() == second.read_bytes()


class TestConvergenceTime:
    def test_never_violating_reports_presence_start(self):
        trace = mktrace(1, 5.0 + np.arange(4) * 0.5, e_x=np.full((4, 3), 0.1))
        assert _convergence_time(trace, band=0.7) == 5.0

    def test_recovery_reports_first_clean_sample(self):
        e = np.zeros((5, 3))
        e[0, 0] = 2.0
        e[1, 2] = 0.9
        trace = mktrace(1, np.arange(5) * 0.1, e_x=e)
        assert _convergence_time(trace, band=0.7) == pytest.approx(0.2)

    def test_violating_at_the_end_is_inf(self):
        e = np.zeros((3, 3))
        e[-1, 1] = 1.0
        trace = mktrace(1, np.arange(3) * 0.1, e_x=e)
        assert _convergence_time(trace, band=0.7) == float("inf")


class TestL2Estimate:
    def test_unit_ratio(self):
        t = np.linspace(0.0, 1.0, 11)
        w = np.tile([0.5, 0.0, 0.0], (11, 1))
        out = SimpleNamespace(traces={1: mktrace(1, t, e_x=w, w_v=w)})
        assert estimate_l2_gain(out) == pytest.approx(1.0, rel=1e-12)

    def test_doubled_output_doubles_the_gain(self):
        t = np.linspace(0.0, 1.0, 11)
        w = np.tile([0.0, 0.3, 0.4], (11, 1))
        out = SimpleNamespace(
            traces={
                1: mktrace(1, t, e_x=2.0 * w, w_v=w),
                2: mktrace(2, t, e_x=2.0 * w, w_v=w),
            }
        )
        assert estimate_l2_gain(out) == pytest.approx(2.0, rel=1e-12)

    def test_single_sample_traces_are_skipped(self):
        t = np.linspace(0.0, 1.0, 11)
        w = np.tile([0.5, 0.0, 0.0], (11, 1))
        loud = mktrace(9, [0.0], e_x=np.full((1, 3), 1e6), w_v=np.full((1, 3), 1e6))
        out = SimpleNamespace(traces={9: loud, 1: mktrace(1, t, e_x=w, w_v=w)})
        assert estimate_l2_gain(out) == pytest.approx(1.0, rel=1e-12)

    def test_zero_disturbance_raises(self):
        t = np.linspace(0.0, 1.0, 11)
        out = SimpleNamespace(
            traces={1: mktrace(1, t, e_x=np.ones((11, 3)))}
        )
        with pytest.raises(ZeroDisturbance):
            estimate_l2_gain(out)


class TestMetricsRoundtrip:
    def test_json_roundtrip_with_inf_and_arrays(self, joinrun):
        met = joinrun.metrics
        back = Metrics.from_dict(json.loads(json.dumps(met.to_dict())))
        assert back.scenario == met.scenario
        assert back.n_agents == met.n_agents
        assert back.gamma == met.gamma
        assert back.band == met.band
        assert back.l2_estimate == met.l2_estimate
        assert back.sup_outer_network == met.sup_outer_network
        assert sorted(back.per_agent) == sorted(met.per_agent)
        for agent, m in met.per_agent.items():
            b = back.per_agent[agent]
            # initial agents have not settled within the 1 s horizon
            assert b.convergence_time == m.convergence_time
            assert b.iss_residual == m.iss_residual
            for name in ("sup_e_x", "sup_e_v", "sup_e_R", "sup_e_Omega"):
                assert np.array_equal(getattr(b, name), getattr(m, name))
        assert any(
            m.convergence_time == float("inf") for m in back.per_agent.values()
        )

    def test_none_gain_estimate_survives(self, hover):
        back = Metrics.from_dict(json.loads(json.dumps(hover.metrics.to_dict())))
        assert back.l2_estimate is None


def _scaled_metrics(template: Metrics, n_agents: int, sup: float) -> Metrics:
    return replace(template, n_agents=n_agents, sup_outer_network=sup)


class TestCheckSms:
    def test_single_run_passes(self, joinrun):
        report = check_sms([(joinrun.solution, joinrun.metrics)])
        assert report.passed
        assert report.weak_coupling_ok and report.scaling_ok and report.iss_ok

    def test_scaling_within_band_passes(self, joinrun):
        met = joinrun.metrics
        runs = [
            (joinrun.solution, _scaled_metrics(met, 3, 1.0)),
            (joinrun.solution, _scaled_metrics(met, 5, 1.05)),
        ]
        assert check_sms(runs, tol_sms=0.10).scaling_ok

    def test_amplifying_scaling_fails(self, joinrun):
        met = joinrun.metrics
        runs = [
            (joinrun.solution, _scaled_metrics(met, 3, 1.0)),
            (joinrun.solution, _scaled_metrics(met, 5, 1.2)),
        ]
        report = check_sms(runs, tol_sms=0.10)
        assert not report.scaling_ok
        assert not report.passed

    def test_positive_envelope_residual_fails(self, joinrun):
        met = joinrun.metrics
        broken_agent = replace(met.per_agent[1], iss_residual=1.0)
        per_agent = dict(met.per_agent)
        per_agent[1] = broken_agent
        bad = replace(met, per_agent=per_agent)
        report = check_sms([(joinrun.solution, bad)])
        assert not report.iss_ok
        assert not report.passed

    def test_report_lines_name_every_criterion(self, joinrun):
        lines = check_sms([(joinrun.solution, joinrun.metrics)]).lines()
        text = "\n".join(lines)
        for label in ("weak coupling", "scaling", "iss envelope", "overall"):
            assert label in text
        assert "PASS" in text

    def test_no_runs_is_an_error(self):
        with pytest.raises(ValueError, match="at least one run"):
            check_sms([])


class TestReporting:
    def test_timeseries_roundtrip_is_exact(self, joinrun, tmp_path):
        path = write_timeseries(joinrun.output, tmp_path / "ts.csv")
        traces = read_timeseries(path)
        assert sorted(traces) == sorted(joinrun.output.traces)
        for agent, original in joinrun.output.traces.items():
            back = traces[agent]
            assert np.array_equal(back.steps, original.steps)
            assert np.array_equal(back.t, original.t)
            for name in (
                "x", "v", "R", "Omega", "e_x", "e_v", "e_R", "e_Omega",
                "f", "M", "d_v", "d_Omega", "coupling_mag", "w_v",
            ):
                assert np.array_equal(
                    getattr(back, name), getattr(original, name)
                ), f"agent {agent} column group {name}"

    def test_csv_layout(self, joinrun, tmp_path):
        path = write_timeseries(joinrun.output, tmp_path / "ts.csv")
        lines = path.read_text(encoding="utf-8").splitlines()
        assert tuple(lines[0].split(",")) == CSV_COLUMNS
        assert len(CSV_COLUMNS) == 47
        assert len(lines) - 1 == 1000 + 800 + 1000 + 500
        keys = []
        for line in lines[1:]:
            first, _, rest = line.partition(",")
            agent = rest.split(",", 2)[1]
            keys.append((int(first), int(agent)))
        assert keys == sorted(keys)

    def test_rejects_foreign_header(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("step,t,agent\n0,0.0,1\n", encoding="utf-8")
        with pytest.raises(ValueError, match="column schema"):
            read_timeseries(bad)

    def test_metrics_file_roundtrip(self, joinrun, tmp_path):
        path = write_metrics(joinrun.metrics, tmp_path / "metrics.json")
        back = Metrics.from_dict(json.loads(path.read_text(encoding="utf-8")))
        assert back.sup_outer_network == joinrun.metrics.sup_outer_network

    def test_events_file(self, joinrun, tmp_path):
        path = write_events(joinrun.output.events, tmp_path / "events.json")
        payload = json.loads(path.read_text(encoding="utf-8"))
        assert [item["action"] for item in payload] == ["join", "leave"]
        assert payload[0]["agent"] == 4
        assert payload[0]["neighbors"] == [1, 2, 3]
        assert payload[1]["step"] == 800

    def test_plotdata_files_and_envelope(self, joinrun, tmp_path):
        written = write_plotdata(joinrun.output.traces, tmp_path)
        names = {p.name for p in written}
        assert names == {"translation.csv", "attitude.csv", "envelope.csv"}
        rows = (tmp_path / "envelope.csv").read_text(encoding="utf-8").splitlines()
        assert rows[0] == "step,t,outer_sup,inner_sup"
        assert len(rows) - 1 == 1000  # one row per distinct global step
        first = rows[1].split(",")
        expect = max(
            float(np.linalg.norm(tr.outer[0]))
            for a, tr in joinrun.output.traces.items()
            if tr.steps[0] == 0
        )
        assert float(first[2]) == pytest.approx(expect, rel=1e-12)

    def test_run_bundle_file_names(self, joinrun, tmp_path):
        paths = write_run(joinrun.output, joinrun.metrics, tmp_path / "bundle")
        assert {p.name for p in paths.values()} == {
            "timeseries.csv", "metrics.json", "events.json", "gains-final.json",
        }
        for p in paths.values():
            assert p.is_file()


@pytest.fixture(scope="module")
def cli_workflow(tmp_path_factory):
    """Full happy-path command chain against the builtin hover scenario."""
    root = tmp_path_factory.mktemp("cli")
    gains_local = root / "gains-local.json"
    gains = root / "gains.json"
    rundir = root / "out"
    codes = {
        "synth-local": main(
            ["synth-local", "builtin:hover_smoke", "-o", str(gains_local)]
        ),
        "codesign": main(["codesign", "builtin:hover_smoke", "-o", str(gains)]),
    }
    codes["simulate"] = main(
        ["simulate", "builtin:hover_smoke", "--gains", str(gains), "-o", str(rundir)]
    )
    return SimpleNamespace(
        root=root, gains_local=gains_local, gains=gains, rundir=rundir, codes=codes
    )


class TestCli:
    def test_happy_chain_exits_clean(self, cli_workflow):
        assert cli_workflow.codes == {
            "synth-local": EXIT_OK, "codesign": EXIT_OK, "simulate": EXIT_OK,
        }

    def test_synth_local_payload(self, cli_workflow):
        payload = json.loads(cli_workflow.gains_local.read_text(encoding="utf-8"))
        assert sorted(payload) == ["1", "2"]
        assert "P_tilde" in payload["1"]

    def test_simulate_writes_run_bundle(self, cli_workflow):
        for name in ("timeseries.csv", "metrics.json", "events.json",
                     "gains-final.json"):
            assert (cli_workflow.rundir / name).is_file()

    def test_report_formats(self, cli_workflow, capsys):
        assert main(["report", str(cli_workflow.rundir)]) == EXIT_OK
        assert main(["report", str(cli_workflow.rundir), "--format", "json"]) == EXIT_OK
        assert main(
            ["report", str(cli_workflow.rundir), "--format", "plotdata"]
        ) == EXIT_OK
        capsys.readouterr()
        for name in ("translation.csv", "attitude.csv", "envelope.csv"):
            assert (cli_workflow.rundir / name).is_file()

    def test_check_sms_over_run_dir(self, cli_workflow, capsys):
        assert main(["check-sms", str(cli_workflow.rundir)]) == EXIT_OK
        assert "overall" in capsys.readouterr().out

    def test_no_command_is_usage_error(self, capsys):
        assert main([]) == EXIT_VALIDATION
        capsys.readouterr()

    def test_missing_config_file(self, tmp_path):
        rc = main(["codesign", str(tmp_path / "nope.yaml")])
        assert rc == EXIT_VALIDATION

    def test_broken_config(self, tmp_path):
        cfg = tmp_path / "broken.yaml"
        cfg.write_text("agents: {count: 0}\n", encoding="utf-8")
        assert main(["codesign", str(cfg)]) == EXIT_VALIDATION

    def test_unknown_builtin(self):
        assert main(["simulate", "builtin:nope", "--gains", "x", "-o", "y"]) \
            == EXIT_VALIDATION

    def test_simulate_needs_gains_file(self, cli_workflow, tmp_path):
        rc = main([
            "simulate", "builtin:hover_smoke",
            "--gains", str(tmp_path / "missing.json"),
            "-o", str(tmp_path / "out"),
        ])
        assert rc == EXIT_VALIDATION

    def test_impossible_budget_reports_infeasible(self, tmp_path):
        cfg = tmp_path / "tight.yaml"
        cfg.write_text(
            "name: tight\n"
            "agents: {count: 1}\n"
            "formation: {rows: 1, cols: 1}\n"
            "synthesis: {costs: {gamma_max: 0.01}}\n",
            encoding="utf-8",
        )
        rc = main(["codesign", str(cfg), "-o", str(tmp_path / "g.json")])
        assert rc == EXIT_INFEASIBLE

    def test_divergent_run_reports_numerical(self, cli_workflow, tmp_path):
        cfg = tmp_path / "blowup.yaml"
        cfg.write_text(
            "name: blowup\n"
            "agents: {count: 2}\n"
            "formation: {rows: 1, cols: 2}\n"
            "disturbance: {sigma: 1.0e+9, seed: 3, enabled: true}\n"
            "sim: {horizon: 0.5, dt: 0.001}\n",
            encoding="utf-8",
        )
        rc = main([
            "simulate", str(cfg),
            "--gains", str(cli_workflow.gains),
            "-o", str(tmp_path / "out"),
        ])
        assert rc == EXIT_NUMERICAL
