import json

import pytest
from click.testing import CliRunner

from src.utils.config import ExperimentConfig

from tests.conftest import small_scene_config

STAGE_COMMANDS = ["emulate", "train-regressor", "attack", "attribute", "train-detector", "evaluate", "export-sft"]


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def config_file(tmp_path):
    config = ExperimentConfig(
        seed=5,
        scene=small_scene_config(nx=16, ny=10, seed=None),
        attack={"epsilon": 0.5, "fract": 0.5},
        attribution={"samples": 10, "background_size": 32},
        split={"test_count": 40},
        detector={"epochs": 50},
        report_dir=str(tmp_path / "default-run"),
    )
    path = tmp_path / "experiment.json"
    path.write_text(config.model_dump_json(indent=2), encoding="utf-8")
    return path


def test_run_experiment(runner, cli_module, config_file, tmp_path):
    out = tmp_path / "run"
    result = runner.invoke(cli_module.cli, ["run-experiment", "--config", str(config_file), "--out", str(out)])
    assert result.exit_code == 0, result.output
    assert "Detection" in result.output
    report = json.loads((out / "report.json").read_text(encoding="utf-8"))
    assert report["llm"] == {"status": "skipped"}
    assert report["seeds"]["master"] == 5


def test_run_experiment_defaults_to_report_dir(runner, cli_module, config_file, tmp_path):
    result = runner.invoke(cli_module.cli, ["run-experiment", "--config", str(config_file)])
    assert result.exit_code == 0, result.output
    assert (tmp_path / "default-run" / "report.md").exists()


def test_seed_override_changes_the_scene(runner, cli_module, config_file, tmp_path):
    for seed, name in [("5", "a"), ("6", "b")]:
        result = runner.invoke(cli_module.cli, ["emulate", "--config", str(config_file), "--seed", seed, "--out", str(tmp_path / name)])
        assert result.exit_code == 0, result.output
    assert (tmp_path / "a" / "records.csv").read_bytes() != (tmp_path / "b" / "records.csv").read_bytes()


def test_stage_commands_then_report(runner, cli_module, config_file, tmp_path):
    out = tmp_path / "staged"
    for command in STAGE_COMMANDS:
        result = runner.invoke(cli_module.cli, [command, "--config", str(config_file), "--out", str(out)])
        assert result.exit_code == 0, f"{command}: {result.output}"
    result = runner.invoke(cli_module.cli, ["report", "--config", str(config_file), "--out", str(out)])
    assert result.exit_code == 0, result.output
    assert (out / "sft_test.jsonl").exists()
    assert (out / "report.md").exists()


def test_mock_backend_flag(runner, cli_module, config_file, tmp_path):
    out = tmp_path / "mock"
    for command in ["emulate", "train-regressor", "attack", "train-detector"]:
        assert runner.invoke(cli_module.cli, [command, "--config", str(config_file), "--out", str(out)]).exit_code == 0
    result = runner.invoke(cli_module.cli, ["classify-llm", "--config", str(config_file), "--out", str(out), "--backend", "mock"])
    assert result.exit_code == 0, result.output
    assert "LLM verdicts" in result.output
    assert (out / "llm_metrics.json").exists()

    result = runner.invoke(cli_module.cli, ["explain", "--config", str(config_file), "--out", str(out), "--backend", "mock"])
    assert result.exit_code == 0, result.output
    assert (out / "explanations.md").exists()


def test_classify_without_gateway_is_a_no_op(runner, cli_module, config_file, tmp_path):
    result = runner.invoke(cli_module.cli, ["classify-llm", "--config", str(config_file), "--out", str(tmp_path / "none")])
    assert result.exit_code == 0
    assert "No gateway configured" in result.output


def test_invalid_config_exits_2(runner, cli_module, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"seed": 1, "unknown_section": {}}), encoding="utf-8")
    result = runner.invoke(cli_module.cli, ["run-experiment", "--config", str(bad)])
    assert result.exit_code == 2

    result = runner.invoke(cli_module.cli, ["emulate", "--config", str(tmp_path / "missing.json")])
    assert result.exit_code == 2


def test_stage_failure_exit_code(runner, cli_module, config_file, tmp_path):
    result = runner.invoke(cli_module.cli, ["evaluate", "--config", str(config_file), "--out", str(tmp_path / "empty")])
    assert result.exit_code == 15
    assert "evaluate" in result.output


def test_out_of_range_seed_is_a_usage_error(runner, cli_module, config_file):
    result = runner.invoke(cli_module.cli, ["emulate", "--config", str(config_file), "--seed", "-1"])
    assert result.exit_code == 2
