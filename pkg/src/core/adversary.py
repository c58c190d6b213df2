"""
FGSM data poisoning against the path-loss regressor.

The perturbation is the additive fast-gradient-sign step
x' = x + eps * scale * sign(dJ/dx), where scale is the training std of each
feature (standardized space) or 1 (raw space). Only features are perturbed;
the path-loss target is left as recorded.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np
import pandas as pd

from src.core.errors import AttackError
from src.core.features import INPUT_FEATURES, RECORD_COLUMNS, TARGET_COLUMN, clamp_to_physical, column_index
from src.core.regressor import Dataset, RegressionModel, evaluate_regression, fit_regressor, grad_input_batch
from src.utils.config import AttackConfig, RegressorHyper

logger = logging.getLogger(__name__)

BENIGN = 0
MALICIOUS = 1

LABELED_COLUMNS = RECORD_COLUMNS + ["label", "applied_epsilon"]


@dataclass(frozen=True)
class LabeledSample:
    x: np.ndarray
    y: float
    label: int
    source_index: int
    applied_epsilon: float = 0.0

    def __post_init__(self):
        if self.label not in (BENIGN, MALICIOUS):
            raise AttackError(f"label must be 0 or 1, got {self.label}", code="invalid_label")

    def record_values(self) -> np.ndarray:
        """The 12 values in record column order, target re-inserted"""
        return np.insert(np.asarray(self.x, dtype=float), column_index(TARGET_COLUMN), self.y)


def _step_scale(model: RegressionModel, space: str) -> np.ndarray:
    if space == "standardized":
        return model.norm_stats.std
    if space == "raw":
        return np.ones(model.n_features)
    raise AttackError(f"unknown attack space '{space}'", code="invalid_space")


def fgsm_perturb_batch(model: RegressionModel, X: np.ndarray, y: np.ndarray, epsilon: float, space: str = "standardized") -> np.ndarray:
    if not epsilon >= 0:
        raise AttackError(f"epsilon must be >= 0, got {epsilon}", code="invalid_epsilon")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if epsilon == 0:
        return X.copy()
    direction = np.sign(grad_input_batch(model, X, y))
    step = epsilon * _step_scale(model, space) * direction
    # sign(0) = 0: untouched coordinate
    return np.where(direction != 0, X + step, X)


def fgsm_perturb(model: RegressionModel, x: Sequence[float], y: float, epsilon: float, space: str = "standardized") -> np.ndarray:
    """One FGSM step on a single raw 11-feature vector"""
    x = np.asarray(x, dtype=float)
    return fgsm_perturb_batch(model, x[None, :], np.array([y]), epsilon, space)[0]


def poisoned_count(n: int, fract: float) -> int:
    """round(fract * n), halves rounded up"""
    return int(math.floor(fract * n + 0.5))


def poison_dataset(data: Dataset, model: RegressionModel, cfg: AttackConfig) -> List[LabeledSample]:
    """
    Perturb a seeded random share of rows and label them malicious.

    Exactly round(fract * N) rows are picked without replacement; the rest are
    copied unchanged as benign. The output order is a seeded shuffle of all
    rows. With epsilon = 0 nothing changes and every row stays benign.
    """
    if not 0.0 <= cfg.fract <= 1.0:
        raise AttackError(f"fract must be within [0, 1], got {cfg.fract}", code="invalid_fract")
    n = len(data)
    rng = np.random.default_rng(cfg.seed if cfg.seed is not None else 0)
    k = poisoned_count(n, cfg.fract)
    chosen = np.sort(rng.choice(n, size=k, replace=False))

    X = data.X.copy()
    labels = np.zeros(n, dtype=int)
    epsilons = np.zeros(n)
    if k and cfg.epsilon > 0:
        original = data.X[chosen]
        perturbed = fgsm_perturb_batch(model, original, data.y[chosen], cfg.epsilon, cfg.space)
        untouched = np.all(perturbed == original, axis=1)
        stuck = int(np.sum(untouched))
        if stuck:
            logger.warning(f"⚠️ {stuck} selected rows have a zero input gradient and were left unchanged (still labeled malicious)")
        if cfg.clamp_to_physical:
            perturbed = clamp_to_physical(perturbed, INPUT_FEATURES)
            restored = int(np.sum(np.all(perturbed == original, axis=1) & ~untouched))
            if restored:
                logger.warning(f"⚠️ {restored} selected rows were clamped back onto their clean values (still labeled malicious)")
        X[chosen] = perturbed
        labels[chosen] = MALICIOUS
        epsilons[chosen] = cfg.epsilon

    order = rng.permutation(n)
    samples = [
        LabeledSample(x=X[i], y=float(data.y[i]), label=int(labels[i]), source_index=int(i), applied_epsilon=float(epsilons[i]))
        for i in order
    ]
    logger.info(f"✅ Poisoned {int(labels.sum())}/{n} rows (epsilon={cfg.epsilon}, space={cfg.space})")
    return samples


def samples_to_dataset(samples: Sequence[LabeledSample]) -> Dataset:
    if not samples:
        raise AttackError("no samples", code="empty_samples")
    return Dataset(X=np.vstack([s.x for s in samples]), y=np.array([s.y for s in samples]), provenance=list(samples))


def _pct_change(before: float, after: float) -> float:
    if after == before:
        return 0.0
    if before == 0:
        raise AttackError("relative change from a zero baseline is undefined", code="zero_baseline")
    return 100.0 * (after - before) / abs(before)


def _delta_fields(clean: Dict[str, float], poisoned: Dict[str, float]) -> Dict[str, float]:
    return {
        "mse_clean": clean["mse"],
        "mse_poisoned": poisoned["mse"],
        "delta_mse_pct": _pct_change(clean["mse"], poisoned["mse"]),
        "r2_clean": clean["r_squared"],
        "r2_poisoned": poisoned["r_squared"],
        "delta_r2_pct": _pct_change(clean["r_squared"], poisoned["r_squared"]),
    }


def degradation_report(model: RegressionModel, clean: Dataset, poisoned: Sequence[LabeledSample]) -> Dict[str, float]:
    """Fixed-model comparison: the fitted regressor scored on clean vs poisoned rows"""
    # source order, so an untouched copy scores bit-identically
    ordered = sorted(poisoned, key=lambda s: s.source_index)
    try:
        report = _delta_fields(evaluate_regression(model, clean), evaluate_regression(model, samples_to_dataset(ordered)))
    except AttackError:
        raise
    except ValueError as e:
        raise AttackError(f"degradation report failed: {e}", code=getattr(e, "code", "degenerate_data")) from e
    logger.info(f"📉 MSE {report['mse_clean']:.4g} -> {report['mse_poisoned']:.4g} ({report['delta_mse_pct']:+.2f}%)")
    return report


def retraining_report(clean_train: Dataset, poisoned_train: Sequence[LabeledSample], clean_test: Dataset, hyper: RegressorHyper) -> Dict[str, float]:
    """Retrained comparison: one model fitted on clean rows, one on poisoned rows, both scored on clean test rows"""
    clean_model = fit_regressor(clean_train, hyper)
    poisoned_model = fit_regressor(samples_to_dataset(poisoned_train), hyper)
    return _delta_fields(evaluate_regression(clean_model, clean_test), evaluate_regression(poisoned_model, clean_test))


def pair_with_clean(clean: Dataset, poisoned: Sequence[LabeledSample]) -> List[LabeledSample]:
    """1:1 composition: every clean row as benign plus every malicious row of the poisoning output"""
    benign = [LabeledSample(x=clean.X[i].copy(), y=float(clean.y[i]), label=BENIGN, source_index=i) for i in range(len(clean))]
    malicious = [s for s in poisoned if s.label == MALICIOUS]
    return benign + malicious


def labeled_to_frame(samples: Sequence[LabeledSample]) -> pd.DataFrame:
    rows = [np.append(s.record_values(), [s.label, s.applied_epsilon]) for s in samples]
    frame = pd.DataFrame(rows, columns=LABELED_COLUMNS)
    frame["label"] = frame["label"].astype(int)
    return frame


def frame_to_labeled(frame: pd.DataFrame) -> List[LabeledSample]:
    """Inverse of labeled_to_frame; provenance becomes the row position"""
    missing = [c for c in LABELED_COLUMNS if c not in frame.columns]
    if missing:
        raise AttackError(f"labeled table is missing columns {missing}", code="bad_labeled_columns")
    values = frame[RECORD_COLUMNS].to_numpy(dtype=float)
    target = column_index(TARGET_COLUMN)
    return [
        LabeledSample(
            x=np.delete(row, target),
            y=float(row[target]),
            label=int(label),
            source_index=i,
            applied_epsilon=float(eps),
        )
        for i, (row, label, eps) in enumerate(zip(values, frame["label"], frame["applied_epsilon"]))
    ]
