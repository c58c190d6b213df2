import json
import re
import threading

import numpy as np
import pytest
import requests

from src.core.adversary import MALICIOUS, LabeledSample
from src.core.errors import DetectorError, StageError
from src.core.pipeline import ExperimentRun, regression_split, run_experiment, split_dataset
from src.utils.artifacts import read_json
from src.utils.config import ExperimentConfig, GatewayConfig, SplitConfig, load_experiment_config

from tests.conftest import REPO_ROOT, small_scene_config

NUMERIC_ARTIFACTS = [
    "records.csv",
    "labeled.csv",
    "attributions.csv",
    "global_importance.csv",
    "split_train.csv",
    "split_test.csv",
    "detector_predictions.csv",
    "regressor.json",
    "detector.json",
    "degradation.json",
    "detector_metrics.json",
    "attribution.json",
]


def _tiny_config(**overrides) -> ExperimentConfig:
    document = {
        "seed": 123,
        "scene": small_scene_config(nx=20, ny=15, seed=None).model_dump(),
        "attack": {"epsilon": 0.5, "fract": 0.5},
        "attribution": {"samples": 20, "background_size": 64},
        "split": {"test_count": 60},
        "detector": {"epochs": 100},
        "gateway": {"backend": "mock", "max_parallel_requests": 2},
    }
    document.update(overrides)
    return ExperimentConfig.model_validate(document)


class _VerdictResponse:
    status_code = 200

    def json(self):
        return {"choices": [{"message": {"role": "assistant", "content": "(Benign)"}}]}


class _RecordingSession:
    """Session answering every request with a benign verdict while keeping the headers it was sent"""

    def __init__(self):
        self.headers = []
        self._lock = threading.Lock()

    def post(self, url, json=None, headers=None, timeout=None):
        with self._lock:
            self.headers.append(dict(headers or {}))
        return _VerdictResponse()


def _significant_digits(field):
    mantissa = re.split("[eE]", field)[0].lstrip("+-").replace(".", "")
    return len(mantissa.lstrip("0"))


def _labeled(n, malicious_every=2):
    return [LabeledSample(x=np.full(11, float(i)), y=float(i), label=int(i % malicious_every == 0), source_index=i) for i in range(n)]


def test_split_is_a_seeded_partition():
    labeled = _labeled(1000)
    split = split_dataset(labeled, SplitConfig(test_count=500, seed=4))
    assert len(split.test) == 500 and len(split.train) == 500
    assert set(split.train_index).isdisjoint(split.test_index)
    assert set(split.train_index) | set(split.test_index) == set(range(1000))
    again = split_dataset(labeled, SplitConfig(test_count=500, seed=4))
    assert np.array_equal(again.test_index, split.test_index)


def test_split_needs_enough_rows():
    with pytest.raises(DetectorError) as exc:
        split_dataset(_labeled(10), SplitConfig(test_count=9, seed=0))
    assert exc.value.code == "insufficient_rows"


def test_regression_split_shares():
    train, test = regression_split(100, 0.8, seed=3)
    assert len(train) == 80 and len(test) == 20
    assert set(train).isdisjoint(test)


def test_seeds_cascade_from_master():
    run = ExperimentRun(_tiny_config(), out_dir="unused")
    seeds = run.seeds()
    assert seeds["master"] == 123
    assert len({seeds[s] for s in ("emulate", "train-regressor", "attack", "attribute", "split", "train-detector")}) == 6

    pinned = _tiny_config(attack={"epsilon": 0.5, "fract": 0.5, "seed": 77})
    other = ExperimentRun(pinned, out_dir="unused").seeds()
    assert other["attack"] == 77
    assert {k: v for k, v in other.items() if k != "attack"} == {k: v for k, v in seeds.items() if k != "attack"}


def test_mock_gateway_run_writes_every_section(tmp_path):
    report = run_experiment(_tiny_config(), str(tmp_path))

    for name in NUMERIC_ARTIFACTS + ["sft_train.jsonl", "sft_test.jsonl", "classify_prompt.txt", "llm_predictions.csv", "llm_metrics.json", "explanations.md", "report.json", "report.md"]:
        assert (tmp_path / name).exists(), name
    assert (tmp_path / "transcripts" / "classify.jsonl").exists()

    assert report.llm["metrics"] == report.detector["metrics"]
    assert report.llm["unparseable_count"] == 0
    assert [s["kind"] for s in report.explanations["sections"]] == ["explain_reasoning", "explain_feature_importance", "explain_pair_comparison"]
    assert report.degradation["delta_mse_pct"] > 0

    stored = read_json(tmp_path / "report.json")
    assert stored["detector"] == read_json(tmp_path / "detector_metrics.json")
    assert stored["degradation"] == read_json(tmp_path / "degradation.json")
    assert "api_key" not in json.dumps(stored["config"])
    assert "report.json" not in stored["artifacts"]

    markdown = (tmp_path / "report.md").read_text(encoding="utf-8")
    assert "| Precision | Recall | F1-score | Training loss |" in markdown
    assert "LLM (mock)" in markdown


def test_sft_export_matches_split(tmp_path):
    run = ExperimentRun(_tiny_config(gateway=None), str(tmp_path))
    run.emulate()
    run.train_regressor()
    run.attack()
    run.train_detector()
    counts = run.export_sft()
    lines = (tmp_path / "sft_test.jsonl").read_text(encoding="utf-8").splitlines()
    assert counts["test"] == len(lines) == 60
    outputs = [json.loads(line)["output"] for line in lines]
    assert outputs.count("(Malicious)") == sum(s.label == MALICIOUS for s in run.split.test)


def test_stages_resume_from_artifacts(tmp_path):
    config = _tiny_config(gateway=None)
    ExperimentRun(config, str(tmp_path)).emulate()
    ExperimentRun(config, str(tmp_path)).train_regressor()
    ExperimentRun(config, str(tmp_path)).attack()
    ExperimentRun(config, str(tmp_path)).attribute()
    ExperimentRun(config, str(tmp_path)).train_detector()
    staged = ExperimentRun(config, str(tmp_path)).evaluate()

    fresh = tmp_path / "fresh"
    report = run_experiment(config, str(fresh))
    assert staged["metrics"] == report.detector["metrics"]
    for name in ["labeled.csv", "split_test.csv", "detector.json"]:
        assert (tmp_path / name).read_bytes() == (fresh / name).read_bytes()


def test_records_table_keeps_nine_significant_digits(tmp_path):
    run = ExperimentRun(_tiny_config(gateway=None), str(tmp_path))
    records = run.emulate()
    lines = (tmp_path / "records.csv").read_text(encoding="utf-8").splitlines()
    assert len(lines) == len(records) + 1
    digits = [_significant_digits(field) for line in lines[1:] for field in line.split(",")]
    assert max(digits) == 9

    resumed = ExperimentRun(_tiny_config(gateway=None), str(tmp_path))
    assert [r.values().tolist() for r in resumed._records()] == [r.values().tolist() for r in run.records]


def test_staged_report_reads_attribution_summary(tmp_path):
    config = _tiny_config(gateway=None)
    for stage in ("emulate", "train_regressor", "attack", "attribute", "train_detector", "evaluate"):
        getattr(ExperimentRun(config, str(tmp_path)), stage)()
    report = ExperimentRun(config, str(tmp_path)).report()

    assert report.attribution == read_json(tmp_path / "attribution.json")
    assert report.attribution["method"] == "exact"
    assert report.attribution["samples"] == 20
    assert report.attribution["background_rows"] == 64
    assert len(report.attribution["ranking"]) == 11
    assert "exact" in (tmp_path / "report.md").read_text(encoding="utf-8")


def test_api_key_stays_out_of_artifacts(tmp_path, monkeypatch):
    key = "sk-airshield-test-key"
    monkeypatch.setenv("AIRSHIELD_API_KEY", key)
    session = _RecordingSession()
    monkeypatch.setattr(requests, "Session", lambda: session)
    config = _tiny_config(gateway={"backend": "remote", "endpoint_url": "http://testserver/v1", "max_parallel_requests": 2})

    report = run_experiment(config, str(tmp_path))
    assert report.llm["transport_failures"] == 0
    assert session.headers and all(h["Authorization"] == f"Bearer {key}" for h in session.headers)
    written = [p for p in tmp_path.rglob("*") if p.is_file()]
    assert any(p.name == "classify.jsonl" for p in written)
    for path in written:
        assert key.encode("utf-8") not in path.read_bytes(), path.name


def test_offline_quick_config_skips_llm_sections(tmp_path):
    config = load_experiment_config(REPO_ROOT / "configs" / "offline_quick.json")
    assert config.gateway is None
    report = run_experiment(config, str(tmp_path / "a"))
    assert len(report.detector["metrics"]) and report.detector["composition"] == "paired"
    assert report.llm == {"status": "skipped"}
    assert report.explanations == {"status": "skipped"}
    assert not (tmp_path / "a" / "llm_metrics.json").exists()
    assert "LLM classification: skipped" in (tmp_path / "a" / "report.md").read_text(encoding="utf-8")

    run_experiment(config, str(tmp_path / "b"))
    for name in NUMERIC_ARTIFACTS + ["report.json", "sft_train.jsonl"]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_mock_run_is_reproducible(tmp_path):
    config = _tiny_config()
    run_experiment(config, str(tmp_path / "a"))
    run_experiment(config, str(tmp_path / "b"))
    for name in NUMERIC_ARTIFACTS + ["llm_predictions.csv", "llm_metrics.json", "explanations.md"]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_failed_stage_keeps_earlier_artifacts(tmp_path):
    config = _tiny_config(split={"test_count": 5000})
    with pytest.raises(StageError) as exc:
        run_experiment(config, str(tmp_path))
    assert exc.value.stage == "train-detector"
    assert exc.value.exit_code == 14
    assert exc.value.code == "train-detector:insufficient_rows"
    assert (tmp_path / "records.csv").exists()
    assert (tmp_path / "labeled.csv").exists()


def test_remote_failures_abort_classification(tmp_path):
    gateway = GatewayConfig(backend="remote", endpoint_url="http://127.0.0.1:9/v1", request_timeout=0.5, retry_policy={"max_retries": 0})
    run = ExperimentRun(_tiny_config(gateway=gateway.model_dump()), str(tmp_path))
    for stage in (run.emulate, run.train_regressor, run.attack, run.train_detector):
        stage()
    with pytest.raises(StageError) as exc:
        run.classify_llm()
    assert exc.value.stage == "classify-llm"
    assert exc.value.exit_code == 17


@pytest.mark.slow
def test_reference_config_detects_poisoning(tmp_path):
    config = load_experiment_config(REPO_ROOT / "configs" / "reference_experiment.json")
    report = run_experiment(config, str(tmp_path))
    assert report.detector["test_rows"] == 500
    assert report.detector["metrics"]["macro_f1"] >= 0.80
    assert report.degradation["delta_mse_pct"] > 0
    assert report.degradation["delta_r2_pct"] < 0
    assert report.llm["metrics"] == report.detector["metrics"]
