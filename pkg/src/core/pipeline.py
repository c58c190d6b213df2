"""
End-to-end experiment runner.

Stages run in a fixed order, each writing its artifacts into the run
directory:

    emulate -> train-regressor -> attack -> attribute -> train-detector
    -> evaluate -> export-sft -> classify-llm -> explain -> report

`ExperimentRun` keeps stage outputs in memory and falls back to the
artifact files of earlier stages when a stage is invoked on its own (this is
how the CLI subcommands work). Any stage failure is raised as a StageError
carrying the stage name; files already written stay in place.
"""

import hashlib
import json
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Optional, Sequence

import numpy as np
import pandas as pd

from src import __version__
from src.api.llm_gateway import (
    ExplanationTranscript,
    LlmEvaluation,
    TranscriptStore,
    classify_with_llm,
    explain_all,
    make_backend,
    transcripts_to_markdown,
)
from src.core.adversary import (
    MALICIOUS,
    LabeledSample,
    degradation_report,
    frame_to_labeled,
    labeled_to_frame,
    pair_with_clean,
    poison_dataset,
    retraining_report,
    samples_to_dataset,
)
from src.core.attribution import attribute_dataset, attributions_to_frame, global_importance, importance_to_frame, select_background
from src.core.detector import DetectorModel, detector_from_document, detector_to_document, evaluate_detector, train_detector
from src.core.errors import AirShieldError, DetectorError, StageError
from src.core.prompt_codec import CLASSIFY_PROMPT, TEMPLATE_VERSION, Verdict, build_sft_dataset, export_sft_jsonl, serialize_record
from src.core.regressor import Dataset, RegressionModel, evaluate_regression, fit_regressor, model_from_document, model_to_document
from src.core.signal_emulator import ChannelRecord, frame_to_records, generate_scene, records_to_frame
from src.utils.artifacts import RECORD_FLOAT_FORMAT, read_json, read_table, read_text, write_json, write_table, write_text
from src.utils.config import ExperimentConfig, SplitConfig

logger = logging.getLogger(__name__)

STAGES = [
    "emulate",
    "train-regressor",
    "attack",
    "attribute",
    "train-detector",
    "evaluate",
    "export-sft",
    "classify-llm",
    "explain",
]

SKIPPED = {"status": "skipped"}


class Split(NamedTuple):
    train: List[LabeledSample]
    test: List[LabeledSample]
    train_index: np.ndarray
    test_index: np.ndarray


def split_dataset(labeled: Sequence[LabeledSample], split: SplitConfig) -> Split:
    """Seeded partition into exactly `test_count` test rows and the rest for training"""
    n = len(labeled)
    if n < split.test_count + 2:
        raise DetectorError(f"need at least {split.test_count + 2} labeled rows, got {n}", code="insufficient_rows")
    order = np.random.default_rng(split.seed if split.seed is not None else 0).permutation(n)
    test_index, train_index = order[: split.test_count], order[split.test_count :]
    return Split(
        train=[labeled[i] for i in train_index],
        test=[labeled[i] for i in test_index],
        train_index=train_index,
        test_index=test_index,
    )


def regression_split(n: int, train_fraction: float, seed: int):
    """Train/test row indices of the clean records for fitting the regressor"""
    order = np.random.default_rng([seed, 0]).permutation(n)
    cut = min(max(int(round(train_fraction * n)), 2), n - 2)
    return np.sort(order[:cut]), np.sort(order[cut:])


@dataclass
class IncidentReport:
    config: Dict[str, Any]
    seeds: Dict[str, int]
    versions: Dict[str, str]
    regression: Dict[str, Any]
    degradation: Dict[str, Any]
    attribution: Dict[str, Any]
    detector: Dict[str, Any]
    llm: Dict[str, Any] = field(default_factory=lambda: dict(SKIPPED))
    explanations: Dict[str, Any] = field(default_factory=lambda: dict(SKIPPED))
    artifacts: List[str] = field(default_factory=list)

    def as_dict(self) -> Dict[str, Any]:
        return {
            "config": self.config,
            "seeds": self.seeds,
            "versions": self.versions,
            "regression": self.regression,
            "degradation": self.degradation,
            "attribution": self.attribution,
            "detector": self.detector,
            "llm": self.llm,
            "explanations": self.explanations,
            "artifacts": self.artifacts,
        }

    def to_markdown(self) -> str:
        lines = ["# AirShield incident report", ""]
        lines += ["## Degradation", "", "| metric | clean | poisoned | change % |", "|---|---|---|---|"]
        d = self.degradation
        lines.append(f"| MSE | {d['mse_clean']:.6g} | {d['mse_poisoned']:.6g} | {d['delta_mse_pct']:+.2f} |")
        lines.append(f"| R² | {d['r2_clean']:.6g} | {d['r2_poisoned']:.6g} | {d['delta_r2_pct']:+.2f} |")
        if "retrained" in d:
            r = d["retrained"]
            lines += ["", f"Retrained on poisoned rows: MSE {r['delta_mse_pct']:+.2f} %, R² {r['delta_r2_pct']:+.2f} %"]

        lines += ["", "## Feature attribution", "", f"Computed on {self.attribution['data']} rows ({self.attribution['method']}).", ""]
        lines += ["| rank | feature | mean abs Shapley (dB) |", "|---|---|---|"]
        # the JSON artifact sorts keys, so rank order comes from the ranking list
        for rank, name in enumerate(self.attribution["ranking"], start=1):
            lines.append(f"| {rank} | {name} | {self.attribution['mean_abs_shapley'][name]:.6g} |")

        lines += ["", "## Detection", "", "| source | Precision | Recall | F1-score | Training loss |", "|---|---|---|---|---|"]
        row = self.detector["table_row"]
        lines.append(f"| detector ({self.detector['kind']}) | {row['Precision']:.4f} | {row['Recall']:.4f} | {row['F1-score']:.4f} | {row['Training loss']:.4f} |")
        if self.llm.get("status") != "skipped":
            m = self.llm["metrics"]
            lines.append(f"| LLM ({self.llm['backend']}) | {m['macro_precision']:.4f} | {m['macro_recall']:.4f} | {m['macro_f1']:.4f} | |")
            lines += ["", f"Unparseable answers: {self.llm['unparseable_count']}; transport failures: {self.llm['transport_failures']}."]
        else:
            lines += ["", "LLM classification: skipped (no gateway configured)."]
        lines += ["", "Scores are macro averages over the benign and malicious classes."]

        lines += ["", "## Explanations", ""]
        if self.explanations.get("status") == "skipped":
            lines.append("Skipped.")
        else:
            lines.append(f"{len(self.explanations['sections'])} sections in explanations.md.")

        lines += ["", "## Seeds", ""]
        lines += [f"- {stage}: {seed}" for stage, seed in self.seeds.items()]
        return "\n".join(lines) + "\n"


@contextmanager
def _stage(name: str):
    logger.info(f"🔧 Stage {name}")
    try:
        yield
    except StageError:
        raise
    except (AirShieldError, ValueError, OSError, KeyError) as e:
        logger.error(f"❌ Stage {name} failed: {e}")
        raise StageError(name, e) from e


class ExperimentRun:
    """One experiment's stages over a run directory"""

    def __init__(self, config: ExperimentConfig, out_dir: Optional[str] = None):
        self.config = config.resolved()
        self.out = Path(out_dir or self.config.report_dir)
        self.records: Optional[List[ChannelRecord]] = None
        self.regressor: Optional[RegressionModel] = None
        self.poisoned: Optional[List[LabeledSample]] = None
        self.split: Optional[Split] = None
        self.detector: Optional[DetectorModel] = None
        self.sections: Dict[str, Any] = {}
        self._llm_verdicts: Optional[List[Verdict]] = None

    # -- helpers ---------------------------------------------------------------

    def path(self, name: str) -> Path:
        return self.out / name

    @property
    def run_id(self) -> str:
        digest = hashlib.sha256(json.dumps(self.config.snapshot(), sort_keys=True).encode("utf-8")).hexdigest()
        return digest[:12]

    def seeds(self) -> Dict[str, int]:
        c = self.config
        return {
            "master": c.seed,
            "emulate": c.scene.rng_seed,
            "train-regressor": c.regressor.seed,
            "attack": c.attack.seed,
            "attribute": c.attribution.seed,
            "split": c.split.seed,
            "train-detector": c.detector.seed,
        }

    def _clean(self) -> Dataset:
        return Dataset.from_records(self._records())

    def _regression_indices(self, n: int):
        return regression_split(n, self.config.split.train_fraction, self.config.split.seed)

    def _records(self) -> List[ChannelRecord]:
        if self.records is None:
            self.records = frame_to_records(read_table(self.path("records.csv")))
        return self.records

    def _regressor(self) -> RegressionModel:
        if self.regressor is None:
            self.regressor = model_from_document(read_text(self.path("regressor.json")))
        return self.regressor

    def _poisoned(self) -> List[LabeledSample]:
        if self.poisoned is None:
            self.poisoned = frame_to_labeled(read_table(self.path("labeled.csv")))
        return self.poisoned

    def _split(self) -> Split:
        if self.split is None:
            train = frame_to_labeled(read_table(self.path("split_train.csv")))
            test = frame_to_labeled(read_table(self.path("split_test.csv")))
            self.split = Split(train, test, np.arange(len(train)), np.arange(len(test)))
        return self.split

    def _detector(self) -> DetectorModel:
        if self.detector is None:
            self.detector = detector_from_document(read_text(self.path("detector.json")))
        return self.detector

    # -- stages ----------------------------------------------------------------

    def emulate(self) -> List[ChannelRecord]:
        with _stage("emulate"):
            records = generate_scene(self.config.scene)
            write_table(records_to_frame(records), self.path("records.csv"), float_format=RECORD_FLOAT_FORMAT)
            # later stages see the 9-digit values, as they do when resuming from the file
            self.records = frame_to_records(read_table(self.path("records.csv")))
        return self.records

    def train_regressor(self) -> RegressionModel:
        with _stage("train-regressor"):
            clean = self._clean()
            train_index, test_index = self._regression_indices(len(clean))
            self.regressor = fit_regressor(clean.subset(train_index), self.config.regressor)
            metrics = {
                "family": self.regressor.family.value,
                "train": evaluate_regression(self.regressor, clean.subset(train_index)),
                "test": evaluate_regression(self.regressor, clean.subset(test_index)),
                "train_rows": len(train_index),
                "test_rows": len(test_index),
            }
            write_text(model_to_document(self.regressor) + "\n", self.path("regressor.json"))
            write_json(metrics, self.path("regression_metrics.json"))
            self.sections["regression"] = metrics
        return self.regressor

    def attack(self) -> List[LabeledSample]:
        with _stage("attack"):
            clean = self._clean()
            model = self._regressor()
            self.poisoned = poison_dataset(clean, model, self.config.attack)
            write_table(labeled_to_frame(self.poisoned), self.path("labeled.csv"))

            report: Dict[str, Any] = dict(degradation_report(model, clean, self.poisoned))
            report.update({"epsilon": self.config.attack.epsilon, "fract": self.config.attack.fract, "space": self.config.attack.space})
            report["malicious_rows"] = sum(s.label == MALICIOUS for s in self.poisoned)
            if self.config.attack.retrain:
                train_index, test_index = self._regression_indices(len(clean))
                in_train = set(int(i) for i in train_index)
                poisoned_train = [s for s in self.poisoned if s.source_index in in_train]
                report["retrained"] = retraining_report(clean.subset(train_index), poisoned_train, clean.subset(test_index), self.config.regressor)
            write_json(report, self.path("degradation.json"))
            self.sections["degradation"] = report
        return self.poisoned

    def attribute(self) -> Dict[str, Any]:
        with _stage("attribute"):
            cfg = self.config.attribution
            clean = self._clean()
            model = self._regressor()
            train_index, _ = self._regression_indices(len(clean))
            background = select_background(clean.subset(train_index), cfg.background_size, cfg.seed)

            data = clean if cfg.data == "clean" else samples_to_dataset(self._poisoned())
            count = min(cfg.samples, len(data))
            rows = np.sort(np.random.default_rng([cfg.seed, 1]).choice(len(data), size=count, replace=False))
            explained = data.subset(rows)

            attributions = attribute_dataset(model, explained, background, cfg.method, cfg.n_permutations, cfg.seed)
            importance = global_importance(attributions, explained)
            write_table(attributions_to_frame(importance, [a.base_value for a in attributions]), self.path("attributions.csv"))
            ranking = importance_to_frame(importance)
            write_table(ranking, self.path("global_importance.csv"))

            method = cfg.method if cfg.method != "auto" else ("exact" if model.family.value == "linear" else "sampling")
            summary = {
                "data": cfg.data,
                "method": method,
                "samples": count,
                "background_rows": len(background),
                "ranking": list(ranking["feature"]),
                "mean_abs_shapley": dict(zip(ranking["feature"], (float(v) for v in ranking["mean_abs_shapley"]))),
            }
            write_json(summary, self.path("attribution.json"))
            self.sections["attribution"] = summary
        return summary

    def train_detector(self) -> DetectorModel:
        with _stage("train-detector"):
            poisoned = self._poisoned()
            if self.config.split.composition == "paired":
                labeled = pair_with_clean(self._clean(), poisoned)
            else:
                labeled = poisoned
            self.split = split_dataset(labeled, self.config.split)
            write_table(labeled_to_frame(self.split.train), self.path("split_train.csv"))
            write_table(labeled_to_frame(self.split.test), self.path("split_test.csv"))
            self.detector = train_detector(self.split.train, self.config.detector)
            write_text(detector_to_document(self.detector) + "\n", self.path("detector.json"))
        return self.detector

    def evaluate(self) -> Dict[str, Any]:
        with _stage("evaluate"):
            detector = self._detector()
            test = self._split().test
            metrics, predictions, probabilities = evaluate_detector(detector, test)
            summary = {
                "kind": detector.kind.value,
                "composition": self.config.split.composition,
                "train_rows": len(self._split().train),
                "test_rows": len(test),
                "metrics": metrics.as_dict(),
                "table_row": metrics.table_row(detector.training_loss),
                "averaging": "macro",
            }
            write_json(summary, self.path("detector_metrics.json"))
            write_table(
                pd.DataFrame(
                    {
                        "test_index": np.arange(len(test)),
                        "label": [s.label for s in test],
                        "predicted": predictions,
                        "probability": probabilities,
                    }
                ),
                self.path("detector_predictions.csv"),
            )
            self.sections["detector"] = summary
        return summary

    def export_sft(self) -> Dict[str, int]:
        with _stage("export-sft"):
            split = self._split()
            export_sft_jsonl(build_sft_dataset(split.train), self.path("sft_train.jsonl"))
            export_sft_jsonl(build_sft_dataset(split.test), self.path("sft_test.jsonl"))
            write_text(CLASSIFY_PROMPT + "\n", self.path("classify_prompt.txt"))
        return {"train": len(split.train), "test": len(split.test)}

    def classify_llm(self) -> Optional[LlmEvaluation]:
        gateway = self.config.gateway
        if gateway is None:
            logger.info("⏭️ classify-llm skipped (no gateway configured)")
            self.sections["llm"] = dict(SKIPPED)
            return None
        with _stage("classify-llm"):
            test = self._split().test
            backend = make_backend(gateway, self._detector() if gateway.backend == "mock" else None)
            transcript = Path(gateway.transcript_dir) / "classify.jsonl" if gateway.transcript_dir else self.path("transcripts/classify.jsonl")
            evaluation = classify_with_llm(gateway, test, backend=backend, run_id=self.run_id, transcript_path=transcript)
            write_table(
                pd.DataFrame(
                    {
                        "test_index": np.arange(len(test)),
                        "label": evaluation.labels,
                        "verdict": [v.value for v in evaluation.verdicts],
                        "scored_prediction": evaluation.scored_predictions,
                        "transport_status": [s.value for s in evaluation.statuses],
                    }
                ),
                self.path("llm_predictions.csv"),
            )
            summary = {"backend": gateway.backend, "model_name": gateway.model_name if gateway.backend == "remote" else "mock-verdict"}
            summary.update(evaluation.summary())
            write_json(summary, self.path("llm_metrics.json"))
            self.sections["llm"] = summary
            self._llm_verdicts = evaluation.verdicts
        return evaluation

    def explain(self) -> Optional[List[ExplanationTranscript]]:
        gateway = self.config.gateway
        if gateway is None or not gateway.explain:
            self.sections["explanations"] = dict(SKIPPED)
            return None
        with _stage("explain"):
            test = self._split().test
            benign = next((i for i, s in enumerate(test) if s.label != MALICIOUS), None)
            malicious = next((i for i, s in enumerate(test) if s.label == MALICIOUS), None)
            if benign is None or malicious is None:
                logger.warning("⚠️ Test set lacks one of the classes; explanations skipped")
                self.sections["explanations"] = {"status": "skipped", "reason": "single-class test set"}
                return None

            verdicts = self._llm_verdicts
            if verdicts is None and self.path("llm_predictions.csv").exists():
                verdicts = [Verdict(v) for v in read_table(self.path("llm_predictions.csv"))["verdict"]]
            predicted = f"({verdicts[malicious].value})" if verdicts else "(Malicious)"
            backend = make_backend(gateway, self._detector() if gateway.backend == "mock" else None)
            transcripts = explain_all(gateway, serialize_record(test[benign]), serialize_record(test[malicious]), predicted, backend=backend)

            write_text(transcripts_to_markdown(transcripts), self.path("explanations.md"))
            store = TranscriptStore(self.path("transcripts/explain.jsonl"))
            store.path.unlink(missing_ok=True)
            for transcript in transcripts:
                store.append({"run_id": self.run_id, **transcript.as_dict()})
            self.sections["explanations"] = {
                "benign_test_index": benign,
                "malicious_test_index": malicious,
                "sections": [{"kind": t.kind, "transport_status": t.transport_status} for t in transcripts],
            }
        return transcripts

    def report(self) -> IncidentReport:
        if "degradation" not in self.sections and self.path("degradation.json").exists():
            self.sections["degradation"] = read_json(self.path("degradation.json"))
        for key, name in [
            ("regression", "regression_metrics.json"),
            ("attribution", "attribution.json"),
            ("detector", "detector_metrics.json"),
            ("llm", "llm_metrics.json"),
        ]:
            if key not in self.sections and self.path(name).exists():
                self.sections[key] = read_json(self.path(name))

        artifacts = sorted(str(p.relative_to(self.out)) for p in self.out.rglob("*") if p.is_file() and p.name not in ("report.json", "report.md"))
        report = IncidentReport(
            config=self.config.snapshot(),
            seeds=self.seeds(),
            versions={"airshield": __version__, "prompt_template": TEMPLATE_VERSION, "numpy": np.__version__, "pandas": pd.__version__},
            regression=self.sections.get("regression", dict(SKIPPED)),
            degradation=self.sections["degradation"],
            attribution=self.sections["attribution"],
            detector=self.sections["detector"],
            llm=self.sections.get("llm", dict(SKIPPED)),
            explanations=self.sections.get("explanations", dict(SKIPPED)),
            artifacts=artifacts,
        )
        write_json(report.as_dict(), self.path("report.json"))
        write_text(report.to_markdown(), self.path("report.md"))
        logger.info(f"✅ Report written to {self.path('report.md')}")
        return report


def run_experiment(config: ExperimentConfig, out_dir: Optional[str] = None) -> IncidentReport:
    """Run every stage in order and write the incident report"""
    run = ExperimentRun(config, out_dir)
    logger.info(f"🚀 Experiment {run.run_id} -> {run.out}")
    run.emulate()
    run.train_regressor()
    run.attack()
    run.attribute()
    run.train_detector()
    run.evaluate()
    run.export_sft()
    run.classify_llm()
    run.explain()
    return run.report()
