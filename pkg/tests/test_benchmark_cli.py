import csv
import json

import numpy as np
import pytest

from psfilter.benchmark import ConfigError, RunConfig, emit_plot_data, parse_angle, run_benchmark
from psfilter.cli import main
from psfilter.plant import EPISODE_LENGTH


def write_config(tmp_path, overrides):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(overrides))
    return str(path)


def test_parse_angle():
    assert parse_angle("30deg") == pytest.approx(np.pi / 6)
    assert parse_angle(0.5) == 0.5
    with pytest.raises(ConfigError):
        parse_angle("30 furlongs")


def test_config_validation():
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"schedule": {"eps": 0.2}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"mode": "reckless"})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"episodes": {"x0": ["-90deg", 0.0]}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"confidence": {"p_s": 1.5}})
    with pytest.raises(ConfigError):
        RunConfig.load("/nonexistent/cfg.json")
    cfg = RunConfig.from_dict({})
    assert cfg.schedule.horizon == 20 and cfg.radius == 0.02
    assert cfg.state_set.bounds()[1][0] == pytest.approx(np.deg2rad(185))


@pytest.fixture(scope="module")
def two_episodes():
    return run_benchmark(RunConfig.from_dict({}), episodes=2)


def test_benchmark_is_deterministic(two_episodes):
    again = run_benchmark(RunConfig.from_dict({}), episodes=2)
    assert [lg.canonical() for lg in again.logs] == [lg.canonical() for lg in two_episodes.logs]
    assert json.dumps([lg.canonical() for lg in again.logs]) == json.dumps([lg.canonical() for lg in two_episodes.logs])


def test_logs_are_complete(two_episodes):
    for lg in two_episodes.logs:
        assert [r["k"] for r in lg.rows] == list(range(EPISODE_LENGTH))
        assert all(r["intervened"] == (r["magnitude"] > 1e-6) for r in lg.rows)
    assert len(two_episodes.beliefs) == 3
    assert two_episodes.beliefs[1].n_obs == two_episodes.beliefs[0].n_obs + EPISODE_LENGTH


def test_emit_plot_data(tmp_path, two_episodes):
    path = emit_plot_data(two_episodes.logs, tmp_path / "t.csv")
    rows = list(csv.DictReader(open(path)))
    assert len(rows) == 2 * EPISODE_LENGTH
    assert "magnitude" in rows[0] and float(rows[5]["alpha"]) == two_episodes.logs[0].rows[5]["alpha"]
    empty = emit_plot_data([], tmp_path / "empty.csv")
    lines = empty.read_text().splitlines()
    assert len(lines) == 1 and lines[0].startswith("episode,k,alpha")


def test_unfiltered_mode_runs_without_filter():
    res = run_benchmark(RunConfig.from_dict({}), mode="unfiltered", episodes=1)
    assert all(r["status"] == "unfiltered" for r in res.logs[0].rows)


def test_cli_run_writes_outputs(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", "--episodes", "1", "--out", str(out), "--trace"]) == 0
    for name in ("episodes.json", "trajectory.csv", "belief.json", "summary.json", "trace.jsonl"):
        assert (out / name).exists()
    assert "episode  0" in capsys.readouterr().out
    first = json.loads((out / "trace.jsonl").read_text().splitlines()[0])
    assert {"episode", "k", "phase", "iter"} <= set(first)
    assert main(["emit-plots", "--logs", str(out / "episodes.json"), "--out", str(tmp_path / "p.csv")]) == 0
    assert len((tmp_path / "p.csv").read_text().splitlines()) == EPISODE_LENGTH + 1


def test_cli_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["run", "--config", str(bad)]) == 2
    assert main(["run", "--config", write_config(tmp_path, {"schedule": {"eps": 0.5}})]) == 2
    # a radius below the noise floor leaves no admissible first step
    tiny = write_config(tmp_path, {"confidence": {"radius": 1e-5}})
    assert main(["run", "--config", tiny, "--episodes", "1", "--out", str(tmp_path / "o")]) == 3
    # a schedule rate below the certified contraction fails verification
    fast = write_config(tmp_path, {"schedule": {"rho": 0.5}})
    assert main(["verify-stab", "--config", fast, "--samples", "500"]) == 4
    capsys.readouterr()


def test_cli_verify_stab_reports_json(capsys):
    assert main(["verify-stab", "--samples", "3000"]) == 0
    out = capsys.readouterr().out
    block = json.loads(out.split("--- certificate (json) ---")[1])
    assert block["rho"] <= 0.99 and block["margin_c"] > 0 and block["max_dare_residual"] < 1e-8


def test_cli_tune_report_block(tmp_path, capsys):
    cfg = write_config(tmp_path, {"tuning": {"samples": 3, "episode_length": 10, "r0": 0.1, "r_min": 0.05}})
    code = main(["tune", "--config", cfg])
    out = capsys.readouterr()
    assert code in (0, 4)
    if code == 0:
        block = json.loads(out.out.split("--- report (json) ---")[1])
        assert block["confidence"]["radius"] == block["tuning_report"]["radius"]
    else:
        assert "tuning failed" in out.err and "radius 0.1" in out.out


def test_cli_seed_changes_run(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--episodes", "1", "--seed", "1", "--out", str(a)]) == 0
    assert main(["run", "--episodes", "1", "--seed", "1", "--out", str(b)]) == 0
    strip = lambda p: [[{k: v for k, v in r.items() if k != "solve_ms"} for r in e["rows"]]
                       for e in json.loads((p / "episodes.json").read_text())]
    assert strip(a) == strip(b)
