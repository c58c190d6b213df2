"""
Benign/malicious record classifier and the metric harness.

The detector reads a record exactly as the text renderer shows it: the 12
record values at 2-decimal resolution, plus a few consistency features
derived from them. Anything that scores records from their rendered text
therefore sees the same inputs as the detector itself.
"""

import json
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.core.adversary import LabeledSample
from src.core.errors import DetectorError
from src.core.features import PHYSICAL_BOUNDS, RECORD_COLUMNS, column_index, quantize, wrap_azimuth
from src.utils.config import DetectorHyper

logger = logging.getLogger(__name__)

DETECTOR_FORMAT = "airshield.detector"
DETECTOR_VERSION = 1

ENGINEERED_FEATURES = ["los_fraction", "azimuth_antipodal_gap", "zenith_complement_gap", "out_of_range"]
DETECTOR_FEATURES: List[str] = RECORD_COLUMNS + ENGINEERED_FEATURES

ENGINEERED_DESCRIPTIONS = {
    "los_fraction": "Distance of the line of sight status from a whole state",
    "azimuth_antipodal_gap": "Mismatch between arrival and reversed departure azimuth",
    "zenith_complement_gap": "Mismatch between arrival and reversed departure zenith",
    "out_of_range": "Total excursion of values outside their physical ranges",
}

_EPS = 1e-12


class DetectorKind(Enum):
    LOGISTIC = "logistic"
    MLP = "mlp-1-hidden"


@dataclass(frozen=True)
class DetectorModel:
    kind: DetectorKind
    theta: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    decision_threshold: float = 0.5
    hidden_units: int = 0
    training_loss: float = float("nan")
    feature_names: Tuple[str, ...] = tuple(DETECTOR_FEATURES)


@dataclass(frozen=True)
class Metrics:
    tp: int
    fp: int
    tn: int
    fn: int
    precision: float
    recall: float
    f1: float
    per_class: Dict[int, Dict[str, float]] = field(default_factory=dict)
    macro_precision: float = 0.0
    macro_recall: float = 0.0
    macro_f1: float = 0.0

    @property
    def support(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def as_dict(self) -> dict:
        return {
            "tp": self.tp,
            "fp": self.fp,
            "tn": self.tn,
            "fn": self.fn,
            "support": self.support,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "per_class": {str(k): v for k, v in self.per_class.items()},
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
        }

    def table_row(self, training_loss: Optional[float] = None) -> Dict[str, float]:
        """Macro scores under the usual report column names"""
        row = {"Precision": self.macro_precision, "Recall": self.macro_recall, "F1-score": self.macro_f1}
        if training_loss is not None:
            row["Training loss"] = training_loss
        return row


# -- features ------------------------------------------------------------------


def detector_features(records: np.ndarray) -> np.ndarray:
    """(n, 12) record values -> (n, 16) detector inputs at text resolution"""
    records = np.atleast_2d(np.asarray(records, dtype=float))
    if records.shape[1] != len(RECORD_COLUMNS):
        raise DetectorError(f"expected {len(RECORD_COLUMNS)} record values, got {records.shape[1]}", code="wrong_dimension")
    if not np.all(np.isfinite(records)):
        raise DetectorError("record values must be finite", code="non_finite_values")
    q = np.vstack([quantize(row) for row in records])

    def col(name: str) -> np.ndarray:
        return q[:, column_index(name)]

    los = col("los")
    los_fraction = np.abs(los - np.rint(los))
    azimuth_gap = np.abs(wrap_azimuth(col("doa_phi") - col("dod_phi") - 180.0))
    zenith_gap = np.abs(col("doa_theta") + col("dod_theta") - 180.0)
    lower = np.array([PHYSICAL_BOUNDS[c][0] for c in RECORD_COLUMNS])
    upper = np.array([PHYSICAL_BOUNDS[c][1] for c in RECORD_COLUMNS])
    out_of_range = (np.maximum(0.0, lower - q) + np.maximum(0.0, q - upper)).sum(axis=1)

    return np.column_stack([q, los_fraction, azimuth_gap, zenith_gap, out_of_range])


def _samples_to_arrays(samples: Sequence[LabeledSample]) -> Tuple[np.ndarray, np.ndarray]:
    if not samples:
        raise DetectorError("no samples", code="empty_samples")
    return np.vstack([s.record_values() for s in samples]), np.array([s.label for s in samples], dtype=int)


# -- model ---------------------------------------------------------------------


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _unpack_mlp(theta: np.ndarray, d: int, h: int):
    W1 = theta[: h * d].reshape(h, d)
    b1 = theta[h * d : h * d + h]
    w2 = theta[h * d + h : h * d + 2 * h]
    b2 = theta[h * d + 2 * h]
    return W1, b1, w2, b2


def _logits(model: DetectorModel, Z: np.ndarray) -> np.ndarray:
    d = Z.shape[1]
    if model.kind is DetectorKind.LOGISTIC:
        return Z @ model.theta[:d] + model.theta[d]
    W1, b1, w2, b2 = _unpack_mlp(model.theta, d, model.hidden_units)
    return np.tanh(Z @ W1.T + b1) @ w2 + b2


def _standardize(model: DetectorModel, F: np.ndarray) -> np.ndarray:
    if F.shape[1] != model.mean.shape[0]:
        raise DetectorError(f"expected {model.mean.shape[0]} detector inputs, got {F.shape[1]}", code="wrong_dimension")
    return (F - model.mean) / model.std


def predict_proba(model: DetectorModel, records: np.ndarray) -> np.ndarray:
    return _sigmoid(_logits(model, _standardize(model, detector_features(records))))


def classify(model: DetectorModel, x: Sequence[float]) -> Dict[str, float]:
    """Score one 12-value record; a probability exactly at the threshold is malicious"""
    probability = float(predict_proba(model, np.asarray(x, dtype=float)[None, :])[0])
    return {"label": int(probability >= model.decision_threshold), "probability": probability}


def classify_batch(model: DetectorModel, records: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    probabilities = predict_proba(model, records)
    return (probabilities >= model.decision_threshold).astype(int), probabilities


def feature_contributions(model: DetectorModel, x: Sequence[float]) -> Dict[str, float]:
    """Per-input share of the logit: w_i * z_i (logistic) or gradient times input (MLP)"""
    z = _standardize(model, detector_features(np.asarray(x, dtype=float)[None, :]))[0]
    d = z.shape[0]
    if model.kind is DetectorKind.LOGISTIC:
        contributions = model.theta[:d] * z
    else:
        W1, b1, w2, _ = _unpack_mlp(model.theta, d, model.hidden_units)
        H = np.tanh(W1 @ z + b1)
        contributions = ((1.0 - H**2) * w2) @ W1 * z
    return dict(zip(model.feature_names, (float(c) for c in contributions)))


def _cross_entropy(p: np.ndarray, y: np.ndarray) -> float:
    p = np.clip(p, _EPS, 1.0 - _EPS)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


def train_detector(train: Sequence[LabeledSample], hyper: Optional[DetectorHyper] = None, history: Optional[List[float]] = None) -> DetectorModel:
    """Fit the detector on labeled samples; `history` receives the cross-entropy after each epoch"""
    records, labels = _samples_to_arrays(train)
    return train_detector_arrays(records, labels, hyper, history)


def train_detector_arrays(records: np.ndarray, labels: np.ndarray, hyper: Optional[DetectorHyper] = None, history: Optional[List[float]] = None) -> DetectorModel:
    hyper = hyper or DetectorHyper()
    labels = np.asarray(labels, dtype=float)
    if set(np.unique(labels)) != {0.0, 1.0}:
        raise DetectorError("training set must contain both classes", code="single_class")

    F = detector_features(records)
    mean = F.mean(axis=0)
    std = F.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    Z = (F - mean) / std
    n, d = Z.shape
    kind = DetectorKind(hyper.kind)
    rng = np.random.default_rng(hyper.seed if hyper.seed is not None else 0)
    batch = n if hyper.batch_size == 0 else min(hyper.batch_size, n)
    lr = hyper.learning_rate
    history = history if history is not None else []

    if kind is DetectorKind.LOGISTIC:
        theta = np.zeros(d + 1)
    else:
        h = hyper.hidden_units
        W1 = rng.uniform(-1.0 / np.sqrt(d), 1.0 / np.sqrt(d), size=(h, d))
        b1 = rng.uniform(-1.0 / np.sqrt(d), 1.0 / np.sqrt(d), size=h)
        w2 = rng.uniform(-1.0 / np.sqrt(h), 1.0 / np.sqrt(h), size=h)
        b2 = float(rng.uniform(-1.0 / np.sqrt(h), 1.0 / np.sqrt(h)))
        theta = np.concatenate([W1.ravel(), b1, w2, [b2]])

    model = DetectorModel(kind=kind, theta=theta, mean=mean, std=std, decision_threshold=hyper.decision_threshold, hidden_units=hyper.hidden_units if kind is DetectorKind.MLP else 0)

    for _ in range(hyper.epochs):
        order = np.arange(n) if batch == n else rng.permutation(n)
        for start in range(0, n, batch):
            rows = order[start : start + batch]
            theta = _gradient_step(model.kind, theta, Z[rows], labels[rows], lr, model.hidden_units)
        model = replace(model, theta=theta)
        history.append(_cross_entropy(_sigmoid(_logits(model, Z)), labels))

    if not np.all(np.isfinite(theta)):
        raise DetectorError("training diverged (non-finite parameters)", code="diverged")
    model = replace(model, training_loss=history[-1])
    logger.info(f"✅ Trained {kind.value} detector on {n} samples (loss={model.training_loss:.4f})")
    return model


def _gradient_step(kind: DetectorKind, theta: np.ndarray, Z: np.ndarray, y: np.ndarray, lr: float, h: int) -> np.ndarray:
    m, d = Z.shape
    if kind is DetectorKind.LOGISTIC:
        residual = _sigmoid(Z @ theta[:d] + theta[d]) - y
        grad = np.append(Z.T @ residual / m, residual.mean())
        return theta - lr * grad

    W1, b1, w2, b2 = _unpack_mlp(theta, d, h)
    H = np.tanh(Z @ W1.T + b1)
    residual = (_sigmoid(H @ w2 + b2) - y) / m
    g_pre = np.outer(residual, w2) * (1.0 - H**2)
    return np.concatenate(
        [
            (W1 - lr * g_pre.T @ Z).ravel(),
            b1 - lr * g_pre.sum(axis=0),
            w2 - lr * H.T @ residual,
            [b2 - lr * residual.sum()],
        ]
    )


# -- metrics -------------------------------------------------------------------


def _ratio(numerator: int, denominator: int) -> float:
    return numerator / denominator if denominator > 0 else 0.0


def _f1(precision: float, recall: float) -> float:
    return 2.0 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0


def compute_metrics(predictions: Sequence[int], truth: Sequence[int]) -> Metrics:
    """
    Confusion counts with malicious (1) as the positive class, per-class scores
    and macro averages. Zero denominators give 0.
    """
    predictions = np.asarray(predictions)
    truth = np.asarray(truth)
    if predictions.shape != truth.shape:
        raise DetectorError(f"{predictions.size} predictions for {truth.size} labels", code="length_mismatch")
    if truth.size == 0:
        raise DetectorError("cannot score an empty set", code="empty_samples")
    for values in (predictions, truth):
        if not np.all(np.isin(values, (0, 1))):
            raise DetectorError("labels must be 0 or 1", code="invalid_label")

    tp = int(np.sum((predictions == 1) & (truth == 1)))
    fp = int(np.sum((predictions == 1) & (truth == 0)))
    tn = int(np.sum((predictions == 0) & (truth == 0)))
    fn = int(np.sum((predictions == 0) & (truth == 1)))

    per_class = {}
    for label, (hit, false_pos, false_neg) in {1: (tp, fp, fn), 0: (tn, fn, fp)}.items():
        precision = _ratio(hit, hit + false_pos)
        recall = _ratio(hit, hit + false_neg)
        per_class[label] = {"precision": precision, "recall": recall, "f1": _f1(precision, recall), "support": hit + false_neg}

    return Metrics(
        tp=tp,
        fp=fp,
        tn=tn,
        fn=fn,
        precision=per_class[1]["precision"],
        recall=per_class[1]["recall"],
        f1=per_class[1]["f1"],
        per_class=per_class,
        macro_precision=(per_class[0]["precision"] + per_class[1]["precision"]) / 2.0,
        macro_recall=(per_class[0]["recall"] + per_class[1]["recall"]) / 2.0,
        macro_f1=(per_class[0]["f1"] + per_class[1]["f1"]) / 2.0,
    )


def evaluate_detector(model: DetectorModel, samples: Sequence[LabeledSample]) -> Tuple[Metrics, np.ndarray, np.ndarray]:
    """Metrics, predicted labels and probabilities over a labeled set"""
    records, labels = _samples_to_arrays(samples)
    predictions, probabilities = classify_batch(model, records)
    return compute_metrics(predictions, labels), predictions, probabilities


# -- persistence ---------------------------------------------------------------


def detector_to_document(model: DetectorModel) -> str:
    document = {
        "format": DETECTOR_FORMAT,
        "version": DETECTOR_VERSION,
        "kind": model.kind.value,
        "hidden_units": model.hidden_units,
        "decision_threshold": model.decision_threshold,
        "training_loss": model.training_loss,
        "feature_names": list(model.feature_names),
        "theta": [float(v) for v in model.theta],
        "mean": [float(v) for v in model.mean],
        "std": [float(v) for v in model.std],
    }
    return json.dumps(document, indent=2)


def detector_from_document(text: str) -> DetectorModel:
    try:
        document = json.loads(text)
    except json.JSONDecodeError as e:
        raise DetectorError(f"detector document is not valid JSON: {e}", code="bad_detector_document") from e
    if document.get("format") != DETECTOR_FORMAT or document.get("version") != DETECTOR_VERSION:
        raise DetectorError("unsupported detector document", code="bad_detector_document")
    return DetectorModel(
        kind=DetectorKind(document["kind"]),
        theta=np.array(document["theta"], dtype=float),
        mean=np.array(document["mean"], dtype=float),
        std=np.array(document["std"], dtype=float),
        decision_threshold=float(document["decision_threshold"]),
        hidden_units=int(document["hidden_units"]),
        training_loss=float(document["training_loss"]),
        feature_names=tuple(document["feature_names"]),
    )
