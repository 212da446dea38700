import json

import pytest

from asyncpqp.cli import main
from asyncpqp.harness import ExperimentConfig
from asyncpqp.problem import load_problem


@pytest.fixture
def tiny(get_data_folder):
    return str(get_data_folder / "tiny.json")


@pytest.mark.parametrize(
    "argv",
    [
        ["bogus"],
        [],
        ["survey", "--p", "3"],
        ["survey", "--gate", "maybe"],
        ["survey", "--runs", "0"],
        ["survey", "--alpha", "-1"],
    ],
)
def test_invalid_input_exits_one(argv):
    assert main(argv) == 1


def test_unknown_config_field_exits_one(tmp_path, capsys):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"runs": 2, "colour": "blue"}))
    assert main(["survey", "--config", str(config)]) == 1
    assert "colour" in capsys.readouterr().err


@pytest.mark.parametrize(
    "content",
    [
        [1, 2],
        {"dims": [10, 4, 3]},
        {"delay_spec": {"kind": "markov", "transitions": [[[1.0]]] * 10}},
        {"q": 3, "delay_spec": {"kind": "iid", "pmf": [0.5, 0.5]}},
    ],
)
def test_malformed_config_exits_one(tmp_path, capsys, content):
    config = tmp_path / "config.json"
    config.write_text(json.dumps(content))
    assert main(["survey", "--config", str(config)]) == 1
    err = capsys.readouterr().err
    assert err.startswith("asyncpqp: error:")
    assert "Traceback" not in err


def test_q_flag_must_match_delay_law(tmp_path):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"q": 2, "delay_spec": {"kind": "iid", "pmf": [0.5, 0.5]}}))
    assert main(["survey", "--config", str(config)]) == 0
    assert main(["survey", "--config", str(config), "--q", "3"]) == 1


def test_missing_config_file_exits_one(tmp_path):
    assert main(["survey", "--config", str(tmp_path / "missing.json")]) == 1


def test_help_lists_config_fields(capsys):
    assert main(["survey", "--help"]) == 0
    out = capsys.readouterr().out
    for name in ExperimentConfig.field_help():
        assert name in out


def test_survey(tiny, capsys):
    assert main(["survey", "--config", tiny, "--p", "inf"]) == 0
    out = capsys.readouterr().out
    assert "bertsekas_rho" in out
    assert "sync_rho" in out
    assert "fraction<1" in out


def test_generate(tiny, tmp_path, capsys):
    assert main(["generate", "--config", tiny, "--out", str(tmp_path)]) == 0
    problem = load_problem(tmp_path / "problem.json")
    assert (problem.N, problem.m) == (2, 2)
    assert "problem.json" in capsys.readouterr().out


@pytest.mark.parametrize("fmt", ["csv", "json"])
def test_run_sync_writes_trajectory(tiny, tmp_path, fmt):
    assert main(["run-sync", "--config", tiny, "--out", str(tmp_path), "--format", fmt]) == 0
    assert (tmp_path / f"sync.{fmt}").exists()


def test_run_async_writes_trajectory(tiny, tmp_path, capsys):
    assert main(["run-async", "--config", tiny, "--out", str(tmp_path)]) == 0
    assert (tmp_path / "run_0000_seed_1000.csv").exists()
    assert "status" in capsys.readouterr().out


def test_run_async_stall_is_failure_only_when_strict(tiny, capsys):
    argv = ["run-async", "--config", tiny, "--alpha", "100", "--gate", "on"]
    assert main(argv) == 0
    assert "stalled" in capsys.readouterr().out
    assert main(argv + ["--strict"]) == 2


def test_monte_carlo_exports(tiny, tmp_path, capsys):
    out = tmp_path / "results"
    assert main(["monte-carlo", "--config", tiny, "--out", str(out), "--seed", "4"]) == 0
    assert len(list(out.glob("*.csv"))) == 4
    assert (out / "aggregate.csv").exists()

    with open(out / "summary.json") as f:
        summary = json.load(f)
    assert summary["config"]["problem_seed"] == 4
    assert "runs 3" in capsys.readouterr().out


def test_monte_carlo_runs_override(tiny, tmp_path):
    out = tmp_path / "results"
    assert main(["monte-carlo", "--config", tiny, "--out", str(out), "--runs", "2",
                 "--format", "json"]) == 0
    assert len(list(out.glob("run_*.json"))) == 2


def test_enumerate_modes_q2_n2(tiny, capsys):
    assert main(["enumerate-modes", "--config", tiny]) == 0
    out = capsys.readouterr().out
    assert "4 modes, 4 verified" in out
    assert "delays (1,0)" in out
    assert "FAILED" not in out


def test_enumerate_modes_q3(tiny, capsys):
    assert main(["enumerate-modes", "--config", tiny, "--q", "3"]) == 0
    assert "9 modes, 9 verified" in capsys.readouterr().out


def test_enumerate_modes_overflow(capsys):
    assert main(["enumerate-modes", "--q", "5"]) == 2
    assert "ModeOverflowError" in capsys.readouterr().err
