import json
from dataclasses import replace

import pytest

from robust_mfsc import cli
from robust_mfsc.cli import main, parse_args
from robust_mfsc.config import serialize_config
from robust_mfsc.errors import EXIT_CHECKS, EXIT_CONFIG, EXIT_OK, EXIT_RANK, EXIT_SOLVER

INFEASIBLE = """
[model]
a = 1.0
b = 0.0
g = 0.0
c = 0.0
d = 0.0

[cost]
q = 1.0
r = 1.0
gamma_matrix = 0.0
gamma = 1.0
"""


def test_parse_args_requires_command():
    with pytest.raises(SystemExit):
        parse_args([])
    args = parse_args(["robust", "--grid", "0,1e-3", "--mode", "both"])
    assert args.grid == "0,1e-3"
    assert args.mode == "both"


def test_solve_writes_matrices_and_traces(tmp_path):
    out = tmp_path / "solve"
    assert main(["solve", "--out", str(out)]) == EXIT_OK
    for name in ("P_star.csv", "S_star.csv", "Pi_star.csv", "A_mean_field.csv", "trace_sare.csv", "manifest.txt"):
        assert (out / name).exists(), name
    payload = json.loads((out / "solve.json").read_text(encoding="utf-8"))
    assert payload["residuals"]["sare"] < 1e-6
    assert payload["mean_field_abscissa"] < 0
    assert "config_sha256" in (out / "manifest.txt").read_text(encoding="utf-8")


def test_unstabilizable_model_exits_with_solver_code(tmp_path):
    config = tmp_path / "bad.ini"
    config.write_text(INFEASIBLE, encoding="utf-8")
    out = tmp_path / "run"
    assert main(["solve", "--config", str(config), "--out", str(out)]) == EXIT_SOLVER
    diagnostic = (out / "diagnostic.txt").read_text(encoding="utf-8")
    assert "StabilizerError" in diagnostic


def test_unreadable_config_exits_with_config_code(tmp_path):
    config = tmp_path / "broken.ini"
    config.write_text("[model]\na = 1\n", encoding="utf-8")
    assert main(["solve", "--config", str(config), "--out", str(tmp_path / "run")]) == EXIT_CONFIG
    assert main(["solve", "--config", str(tmp_path / "absent.ini")]) == EXIT_CONFIG


def test_bad_grid_exits_with_config_code(tmp_path):
    assert main(["robust", "--grid", "1e-2,oops", "--out", str(tmp_path)]) == EXIT_CONFIG


def test_robust_with_zero_magnitude(tmp_path):
    out = tmp_path / "robust"
    assert main(["robust", "--grid", "0", "--out", str(out)]) == EXIT_OK
    lines = (out / "iss_summary.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "magnitude,steady_error_outer,steady_error_inner,breakdown_outer,breakdown_inner"
    assert len(lines) == 2
    report = json.loads((out / "iss_report.json").read_text(encoding="utf-8"))
    assert report["violations"] == []


def test_learning_without_exploration_exits_with_rank_code(tmp_path, small_learning_config):
    config = small_learning_config
    config.irl = replace(config.irl, exploration=False)
    path = tmp_path / "no_exploration.ini"
    path.write_text(serialize_config(config), encoding="utf-8")
    out = tmp_path / "learn"
    assert main(["learn", "--config", str(path), "--out", str(out)]) == EXIT_RANK
    diagnostic = (out / "diagnostic.txt").read_text(encoding="utf-8")
    assert "phase: rank" in diagnostic
    assert "insufficient" in diagnostic or "excitation" in diagnostic


def test_reproduce_with_model_gains(tmp_path, small_learning_config):
    config = small_learning_config
    config.sim = replace(config.sim, N=5, Ns=5, dt=1e-3, horizon=1.0)
    path = tmp_path / "small.ini"
    path.write_text(serialize_config(config), encoding="utf-8")
    out = tmp_path / "reproduce"
    assert main(["reproduce", "--skip-learn", "--config", str(path), "--out", str(out)]) == EXIT_OK
    summary = json.loads((out / "summary.json").read_text(encoding="utf-8"))
    assert summary["metrics"]["skip_learn"] is True
    header = (out / "population_average.csv").read_text(encoding="utf-8").splitlines()[0]
    assert header == "t,avg1,avg2,xbar1,xbar2,ode1,ode2"
    assert (out / "agents.csv").exists()


def test_reproduce_fails_when_an_acceptance_check_fails(tmp_path, small_learning_config, monkeypatch):
    config = small_learning_config
    config.sim = replace(config.sim, N=5, Ns=5, dt=1e-3, horizon=1.0)
    path = tmp_path / "small.ini"
    path.write_text(serialize_config(config), encoding="utf-8")
    out = tmp_path / "reproduce"
    monkeypatch.setattr(cli, "SOLVE_ITERATION_LIMIT", 0)
    assert main(["reproduce", "--skip-learn", "--config", str(path), "--out", str(out)]) == EXIT_CHECKS
    summary = json.loads((out / "summary.json").read_text(encoding="utf-8"))
    assert summary["passed"] is False
    failed = {check["name"] for check in summary["checks"] if not check["passed"]}
    assert "sare_outer_iterations" in failed
