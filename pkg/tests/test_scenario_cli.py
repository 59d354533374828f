import json
import math
import shutil
from pathlib import Path

import numpy as np
import pytest

from qsdcsim.cli import fitted_decay_rate, main, settling_time, summarize
from qsdcsim.consensus import Trajectory, convergence_rate, run_consensus
from qsdcsim.scenario import (
    ScenarioError,
    parse_scenario,
    scenario_from_dict,
    serialize_scenario,
)

PI = math.pi
SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


def minimal_consensus_doc(**extra):
    doc = {
        "schema_version": 1,
        "kind": "consensus",
        "horizon": 1.0,
        "graph": {"nodes": 2, "edges": [[0, 1]]},
        "consensus": {"initial_phi": [0.2, 0.4], "pinner": 0.3},
    }
    doc.update(extra)
    return doc


# -- parsing -----------------------------------------------------------------


def test_parse_shipped_consensus3():
    sc = parse_scenario(SCENARIOS / "consensus3.json")
    assert sc.kind == "consensus"
    g = sc.graph()
    assert g.node_count == 3 and len(g.edges) == 3
    assert sc.raw["consensus"]["pinner"] == pytest.approx(PI / 3)
    cfg = sc.protocol()
    assert cfg.backend == "full" and cfg.exact
    assert cfg.theta.values == (1.96, 1.49, 2.07)


def test_parse_all_shipped_scenarios():
    for path in sorted(SCENARIOS.glob("*.json")):
        sc = parse_scenario(path)
        assert sc.raw["schema_version"] == 1


def test_parse_missing_file():
    with pytest.raises(ScenarioError, match="not found"):
        parse_scenario("/nonexistent/nowhere.json")


def test_parse_rejects_unknown_key_with_path():
    doc = minimal_consensus_doc()
    doc["consensus"]["pinnner"] = 0.3
    with pytest.raises(ScenarioError, match=r"\$\.consensus"):
        scenario_from_dict(doc)


def test_parse_rejects_bad_kind():
    doc = minimal_consensus_doc(kind="quantum_teleport")
    with pytest.raises(ScenarioError, match="kind"):
        scenario_from_dict(doc)


def test_parse_rejects_scaling_violation():
    doc = {
        "schema_version": 1,
        "kind": "ac",
        "horizon": 5.0,
        "graph": {"nodes": 2, "edges": [[0, 1]]},
        "ac": {
            "ders": [{"droop": 5e-3, "rated_kw": 40.0, "bus_load_kw": 10.0},
                     {"droop": 5e-3, "rated_kw": 40.0, "bus_load_kw": 10.0}],
            "lines": [[0, 1, 200.0]],
            "k": 8.5,  # k * max = 1.7 >= pi/2
        },
    }
    with pytest.raises(ScenarioError, match="pi/2"):
        scenario_from_dict(doc)


def test_parse_empty_events_valid():
    doc = {
        "schema_version": 1,
        "kind": "dc",
        "horizon": 2.0,
        "graph": {"nodes": 2, "edges": [[0, 1]]},
        "dc": {"ders": [{"droop_m": 1.0, "line_r": 0.01, "rated_current": 5.0}] * 2,
               "events": []},
    }
    sc = scenario_from_dict(doc)
    assert sc.plant_events() == []


def test_parse_consensus_theta_bounds():
    doc = minimal_consensus_doc(
        protocol={"theta": {"kind": "uniform", "lo": 0.0, "hi": PI}})
    with pytest.raises(ScenarioError, match="theta"):
        scenario_from_dict(doc)


def test_parse_eve_full_theta_range_allowed():
    sc = parse_scenario(SCENARIOS / "eve_pi6.json")
    assert sc.raw["eve"]["theta"]["lo"] == 0.0
    assert sc.raw["eve"]["theta"]["hi"] == pytest.approx(PI)


def test_parse_event_payload_checked():
    doc = {
        "schema_version": 1,
        "kind": "dc",
        "horizon": 5.0,
        "graph": {"nodes": 2, "edges": [[0, 1]]},
        "dc": {"ders": [{"droop_m": 1.0, "line_r": 0.01, "rated_current": 5.0}] * 2,
               "events": [{"time": 1.0, "kind": "unplug"}]},
    }
    with pytest.raises(ScenarioError, match="node"):
        scenario_from_dict(doc)


def test_parse_mixing_window_must_fit_horizon():
    doc = minimal_consensus_doc()
    doc["consensus"]["mixing"] = [
        {"nodes": [0], "t_start": 0.5, "t_end": 99.0, "p": 0.1}]
    with pytest.raises(ScenarioError, match="horizon"):
        scenario_from_dict(doc)


def test_roundtrip_identity():
    sc = parse_scenario(SCENARIOS / "ac15.json")
    text = serialize_scenario(sc)
    sc2 = scenario_from_dict(json.loads(text))
    assert sc2.raw == sc.raw
    assert serialize_scenario(sc2) == text


# -- summaries ---------------------------------------------------------------


def test_settling_time_basics():
    t = np.array([0.0, 1.0, 2.0, 3.0])
    assert settling_time(t, np.array([1.0, 0.5, 1e-3, 1e-4]), 1e-2) == 2.0
    assert settling_time(t, np.array([1e-3] * 4), 1e-2) == 0.0
    assert settling_time(t, np.array([1.0, 1.0, 1.0, 1.0]), 1e-2) is None
    assert settling_time(t, np.array([1e-3, 1.0, 1e-3, 1e-3]), 1e-2) == 2.0


def test_summarize_constant_trajectory():
    n = 40
    traj = Trajectory(
        times=np.linspace(0.0, 1.0, n),
        phis=np.full((n, 2), 0.7),
        pinners=np.full((n, 2), 0.7),
        lyapunov=np.zeros(n),
        backend="phase", mode="qsdc", seed=0, dt=0.01,
    )
    s = summarize(traj)
    assert s["settling_time"] == 0.0
    assert s["fitted_decay_rate"] == 0.0
    assert s["steady_max_abs_zeta"] == 0.0


def test_summarize_requires_window():
    traj = Trajectory(
        times=np.linspace(0.0, 1.0, 5),
        phis=np.full((5, 1), 0.7),
        pinners=np.full((5, 1), 0.7),
        lyapunov=np.zeros(5),
        backend="phase", mode="qsdc", seed=0, dt=0.01,
    )
    with pytest.raises(ValueError, match="short"):
        summarize(traj)


def test_fitted_rate_matches_convergence_bound():
    sc = parse_scenario(SCENARIOS / "consensus3.json")
    traj = run_consensus(
        sc.raw["consensus"]["initial_phi"], sc.raw["consensus"]["pinner"],
        sc.graph(), sc.protocol(backend="phase"), sc.horizon)
    mu = convergence_rate(sc.graph(), PI / 3)
    rate = fitted_decay_rate(traj.times, traj.lyapunov)
    assert rate >= 0.95 * 2.0 * mu


# -- CLI ---------------------------------------------------------------------


def run_cli(args, tmp_path, capsys):
    code = main(args + ["--out", str(tmp_path)])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_cli_consensus_end_to_end(tmp_path, capsys):
    code, out, _ = run_cli(
        ["consensus", "--scenario", str(SCENARIOS / "consensus3.json"),
         "--backend", "phase", "--exact"], tmp_path, capsys)
    assert code == 0
    assert "consensus3" in out
    csv = tmp_path / "consensus3_trajectory.csv"
    summary = tmp_path / "consensus3_trajectory_summary.json"
    assert csv.exists() and summary.exists()
    payload = json.loads(summary.read_text())
    assert payload["steady_max_abs_zeta"] <= 1e-3
    header = csv.read_text().splitlines()[0]
    assert header == "t,phi_0,phi_1,phi_2,pinner_0,pinner_1,pinner_2,V"


def test_cli_determinism_byte_identical(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    for out_dir in (a, b):
        code = main(["consensus", "--scenario", str(SCENARIOS / "consensus3.json"),
                     "--backend", "phase", "--shots", "400", "--seed", "9",
                     "--out", str(out_dir)])
        capsys.readouterr()
        assert code == 0
    csv_a = (a / "consensus3_trajectory.csv").read_bytes()
    csv_b = (b / "consensus3_trajectory.csv").read_bytes()
    assert csv_a == csv_b
    assert (a / "consensus3_trajectory_summary.json").read_bytes() == \
        (b / "consensus3_trajectory_summary.json").read_bytes()


def test_cli_seed_changes_sampled_output(tmp_path, capsys):
    outs = []
    for seed in ("9", "10"):
        out_dir = tmp_path / seed
        code = main(["consensus", "--scenario", str(SCENARIOS / "consensus3.json"),
                     "--backend", "phase", "--shots", "400", "--seed", seed,
                     "--out", str(out_dir)])
        capsys.readouterr()
        assert code == 0
        outs.append((out_dir / "consensus3_trajectory.csv").read_bytes())
    assert outs[0] != outs[1]


def test_cli_rate_subcommand(tmp_path, capsys):
    code, out, _ = run_cli(
        ["rate", "--scenario", str(SCENARIOS / "consensus3.json"),
         "--epsilon", "1.047"], tmp_path, capsys)
    assert code == 0
    assert "mu = 0.827" in out
    payload = json.loads((tmp_path / "consensus3_rate.json").read_text())
    assert payload["mu"] == pytest.approx(0.8270, abs=1e-3)


def test_cli_rate_rejects_bad_epsilon(tmp_path, capsys):
    code, _, err = run_cli(
        ["rate", "--scenario", str(SCENARIOS / "consensus3.json"),
         "--epsilon", "1.7"], tmp_path, capsys)
    assert code == 1
    assert "epsilon" in err


def test_cli_eve_report(tmp_path, capsys):
    code, out, _ = run_cli(
        ["eve", "--scenario", str(SCENARIOS / "eve_pi6.json"), "--seed", "7"],
        tmp_path, capsys)
    assert code == 0
    payload = json.loads((tmp_path / "eve_pi6_eve.json").read_text())
    assert set(payload["bases"]) == {"X", "Y", "Z"}
    assert abs(payload["naive_phi"] - PI / 6) >= 0.3
    assert payload["entropy_bits"]["Z"] >= 0.99


def test_cli_validation_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"schema_version": 1, "kind": "consensus"}))
    code, _, err = run_cli(["consensus", "--scenario", str(bad)], tmp_path, capsys)
    assert code == 1
    assert "validation error" in err


def test_cli_wrong_kind_exit_code(tmp_path, capsys):
    code, _, err = run_cli(
        ["ac", "--scenario", str(SCENARIOS / "consensus3.json")], tmp_path, capsys)
    assert code == 1
    assert "expected ac" in err


def test_cli_partition_exit_code(tmp_path, capsys):
    doc = {
        "schema_version": 1,
        "kind": "dc",
        "horizon": 3.0,
        "graph": {"nodes": 3, "edges": [[0, 1], [1, 2]]},
        "protocol": {"dt": 0.01, "backend": "phase", "seed": 1},
        "dc": {
            "ders": [{"droop_m": 1.0, "line_r": 0.01, "rated_current": 5.0}] * 3,
            "r_load": 10.0,
            "events": [{"time": 1.0, "kind": "unplug", "node": 1}],
        },
    }
    path = tmp_path / "partition.json"
    path.write_text(json.dumps(doc))
    code, _, err = run_cli(["dc", "--scenario", str(path)], tmp_path, capsys)
    assert code == 2
    assert "disconnected" in err


def test_cli_env_overrides_out(tmp_path, capsys, monkeypatch):
    env_dir = tmp_path / "env_dir"
    monkeypatch.setenv("QSDC_OUT_DIR", str(env_dir))
    code = main(["rate", "--scenario", str(SCENARIOS / "consensus3.json"),
                 "--epsilon", "0.5", "--out", str(tmp_path / "flag_dir")])
    capsys.readouterr()
    assert code == 0
    assert (env_dir / "consensus3_rate.json").exists()
    assert not (tmp_path / "flag_dir").exists()


def test_cli_format_csv_only(tmp_path, capsys):
    code, _, _ = run_cli(
        ["consensus", "--scenario", str(SCENARIOS / "consensus3.json"),
         "--backend", "phase", "--format", "csv"], tmp_path, capsys)
    assert code == 0
    assert (tmp_path / "consensus3_trajectory.csv").exists()
    assert not (tmp_path / "consensus3_trajectory_summary.json").exists()
