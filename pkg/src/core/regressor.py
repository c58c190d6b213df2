"""
Path-loss regressor with analytic input gradients.

Predicts `pathloss` from the other 11 record features. Two families:

- ``linear``: affine map on standardized features, fitted in closed form
  (least squares) or by seeded mini-batch gradient descent
- ``mlp-1-hidden``: one tanh hidden layer over standardized features and a
  standardized target, fitted by seeded mini-batch gradient descent

`grad_input` returns the gradient of the squared error J = (f(x) - y)^2
with respect to the raw (unstandardized) inputs.
"""

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.core.errors import RegressionError
from src.core.features import INPUT_FEATURES, TARGET_COLUMN, column_index
from src.utils.config import RegressorHyper

logger = logging.getLogger(__name__)

MODEL_FORMAT = "airshield.regressor"
MODEL_VERSION = 1


class ModelFamily(Enum):
    LINEAR = "linear"
    MLP = "mlp-1-hidden"


@dataclass(frozen=True)
class NormStats:
    """Standardization statistics, computed from training data only"""

    mean: np.ndarray
    std: np.ndarray
    target_mean: float = 0.0
    target_scale: float = 1.0


@dataclass(frozen=True)
class Dataset:
    """Feature matrix (n, d) and targets (n,), optionally with record provenance"""

    X: np.ndarray
    y: np.ndarray
    provenance: Optional[Sequence] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        y = np.asarray(self.y, dtype=float).ravel()
        if X.shape[0] != y.shape[0]:
            raise RegressionError(f"{X.shape[0]} rows but {y.shape[0]} targets", code="shape_mismatch")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return self.y.shape[0]

    @classmethod
    def from_records(cls, records: Sequence) -> "Dataset":
        """Split 12-feature records into the 11 inputs and the path-loss target"""
        table = np.array([r.values() for r in records], dtype=float)
        target = column_index(TARGET_COLUMN)
        return cls(X=np.delete(table, target, axis=1), y=table[:, target], provenance=list(records))

    def subset(self, indices: Sequence[int]) -> "Dataset":
        indices = np.asarray(indices, dtype=int)
        provenance = [self.provenance[i] for i in indices] if self.provenance is not None else None
        return Dataset(X=self.X[indices], y=self.y[indices], provenance=provenance)

    def check(self, min_rows: int = 2) -> None:
        if len(self) < min_rows:
            raise RegressionError(f"need at least {min_rows} rows, got {len(self)}", code="too_few_rows")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.y))):
            raise RegressionError("dataset contains non-finite values", code="non_finite_values")
        if np.ptp(self.y) == 0:
            raise RegressionError("target is constant", code="constant_target")


@dataclass(frozen=True)
class RegressionModel:
    family: ModelFamily
    theta: np.ndarray
    norm_stats: NormStats
    feature_order: Tuple[str, ...] = tuple(INPUT_FEATURES)
    hidden_units: int = 0

    @property
    def n_features(self) -> int:
        return len(self.feature_order)


# -- parameter packing ---------------------------------------------------------


def _unpack_mlp(theta: np.ndarray, d: int, h: int):
    W1 = theta[: h * d].reshape(h, d)
    b1 = theta[h * d : h * d + h]
    w2 = theta[h * d + h : h * d + 2 * h]
    b2 = theta[h * d + 2 * h]
    return W1, b1, w2, b2


def _pack_mlp(W1, b1, w2, b2) -> np.ndarray:
    return np.concatenate([W1.ravel(), b1, w2, [b2]])


# -- standardization -----------------------------------------------------------


def standardize(model: RegressionModel, X: np.ndarray) -> np.ndarray:
    return (np.asarray(X, dtype=float) - model.norm_stats.mean) / model.norm_stats.std


def destandardize(model: RegressionModel, Z: np.ndarray) -> np.ndarray:
    return np.asarray(Z, dtype=float) * model.norm_stats.std + model.norm_stats.mean


def _check_input(model: RegressionModel, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.shape[-1] != model.n_features:
        raise RegressionError(f"expected {model.n_features} features, got {X.shape[-1]}", code="wrong_dimension")
    return X


# -- forward / backward --------------------------------------------------------


def _forward(model: RegressionModel, Z: np.ndarray):
    """Prediction and d(prediction)/dZ for standardized inputs Z (n, d)"""
    d = model.n_features
    if model.family is ModelFamily.LINEAR:
        w, b = model.theta[:d], model.theta[d]
        return Z @ w + b, np.broadcast_to(w, Z.shape)

    W1, b1, w2, b2 = _unpack_mlp(model.theta, d, model.hidden_units)
    H = np.tanh(Z @ W1.T + b1)
    out = H @ w2 + b2
    scale = model.norm_stats.target_scale
    dZ = ((1.0 - H**2) * w2) @ W1 * scale
    return model.norm_stats.target_mean + scale * out, dZ


def predict_batch(model: RegressionModel, X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(_check_input(model, X))
    prediction, _ = _forward(model, standardize(model, X))
    return prediction


def predict(model: RegressionModel, x: Sequence[float]) -> float:
    """Path-loss estimate (dB) for one raw 11-feature vector"""
    x = _check_input(model, x)
    if x.ndim != 1:
        raise RegressionError("predict takes a single feature vector", code="wrong_dimension")
    return float(predict_batch(model, x[None, :])[0])


def loss(model: RegressionModel, x: Sequence[float], y: float) -> float:
    """Per-sample squared error J"""
    return (predict(model, x) - float(y)) ** 2


def batch_loss(model: RegressionModel, X: np.ndarray, y: np.ndarray) -> float:
    residual = predict_batch(model, X) - np.asarray(y, dtype=float)
    return float(np.mean(residual**2))


def grad_input_batch(model: RegressionModel, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Row-wise gradients of J w.r.t. raw inputs, chain-ruled through standardization"""
    X = np.atleast_2d(_check_input(model, X))
    prediction, dZ = _forward(model, standardize(model, X))
    residual = prediction - np.asarray(y, dtype=float).ravel()
    return 2.0 * residual[:, None] * dZ / model.norm_stats.std


def grad_input(model: RegressionModel, x: Sequence[float], y: float) -> np.ndarray:
    x = _check_input(model, x)
    return grad_input_batch(model, x[None, :], np.array([y]))[0]


# -- fitting -------------------------------------------------------------------


def _norm_stats(data: Dataset, standardize_target: bool) -> NormStats:
    mean = data.X.mean(axis=0)
    std = data.X.std(axis=0)
    constant = [INPUT_FEATURES[i] if data.X.shape[1] == len(INPUT_FEATURES) else str(i) for i in np.flatnonzero(std == 0)]
    if constant:
        raise RegressionError(f"constant features cannot be standardized: {constant}", code="constant_feature")
    if standardize_target:
        return NormStats(mean=mean, std=std, target_mean=float(data.y.mean()), target_scale=float(data.y.std()))
    return NormStats(mean=mean, std=std)


def _linear_closed_form(Z: np.ndarray, y: np.ndarray) -> np.ndarray:
    design = np.column_stack([Z, np.ones(len(Z))])
    solution, *_ = np.linalg.lstsq(design, y, rcond=None)
    return solution


def _linear_gradient_descent(Z: np.ndarray, y: np.ndarray, hyper: RegressorHyper, rng: np.random.Generator, history: List[float]) -> np.ndarray:
    n, d = Z.shape
    theta = np.zeros(d + 1)
    batch = min(hyper.batch_size, n)
    for _ in range(hyper.epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch):
            rows = order[start : start + batch]
            residual = Z[rows] @ theta[:d] + theta[d] - y[rows]
            theta[:d] -= hyper.learning_rate * 2.0 * Z[rows].T @ residual / len(rows)
            theta[d] -= hyper.learning_rate * 2.0 * residual.mean()
        history.append(float(np.mean((Z @ theta[:d] + theta[d] - y) ** 2)))
    return theta


def _mlp_gradient_descent(Z: np.ndarray, t: np.ndarray, hyper: RegressorHyper, rng: np.random.Generator, history: List[float]) -> np.ndarray:
    n, d = Z.shape
    h = hyper.hidden_units
    W1 = rng.uniform(-1.0 / np.sqrt(d), 1.0 / np.sqrt(d), size=(h, d))
    b1 = rng.uniform(-1.0 / np.sqrt(d), 1.0 / np.sqrt(d), size=h)
    w2 = rng.uniform(-1.0 / np.sqrt(h), 1.0 / np.sqrt(h), size=h)
    b2 = float(rng.uniform(-1.0 / np.sqrt(h), 1.0 / np.sqrt(h)))
    batch = min(hyper.batch_size, n)
    lr = hyper.learning_rate

    for _ in range(hyper.epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch):
            rows = order[start : start + batch]
            Zb = Z[rows]
            H = np.tanh(Zb @ W1.T + b1)
            residual = H @ w2 + b2 - t[rows]
            g_out = 2.0 * residual / len(rows)
            g_pre = np.outer(g_out, w2) * (1.0 - H**2)
            w2 = w2 - lr * H.T @ g_out
            b2 = b2 - lr * g_out.sum()
            W1 = W1 - lr * g_pre.T @ Zb
            b1 = b1 - lr * g_pre.sum(axis=0)
        H = np.tanh(Z @ W1.T + b1)
        history.append(float(np.mean((H @ w2 + b2 - t) ** 2)))
    return _pack_mlp(W1, b1, w2, b2)


def fit_regressor(data: Dataset, hyper: Optional[RegressorHyper] = None, history: Optional[List[float]] = None) -> RegressionModel:
    """
    Fit a path-loss regressor.

    Args:
        data: training rows
        hyper: family and optimizer settings; seed None means 0
        history: if given, receives the training MSE after every epoch
            (gradient-descent solvers only; in target units for the linear
            family, standardized target units for the MLP)
    """
    hyper = hyper or RegressorHyper()
    data.check()
    family = ModelFamily(hyper.family)
    history = history if history is not None else []
    rng = np.random.default_rng(hyper.seed if hyper.seed is not None else 0)

    feature_order = tuple(INPUT_FEATURES) if data.X.shape[1] == len(INPUT_FEATURES) else tuple(f"f{i}" for i in range(data.X.shape[1]))

    if family is ModelFamily.LINEAR:
        stats = _norm_stats(data, standardize_target=False)
        Z = (data.X - stats.mean) / stats.std
        if hyper.solver == "closed_form":
            theta = _linear_closed_form(Z, data.y)
        else:
            theta = _linear_gradient_descent(Z, data.y, hyper, rng, history)
        model = RegressionModel(family=family, theta=theta, norm_stats=stats, feature_order=feature_order)
    else:
        stats = _norm_stats(data, standardize_target=True)
        Z = (data.X - stats.mean) / stats.std
        t = (data.y - stats.target_mean) / stats.target_scale
        theta = _mlp_gradient_descent(Z, t, hyper, rng, history)
        model = RegressionModel(family=family, theta=theta, norm_stats=stats, feature_order=feature_order, hidden_units=hyper.hidden_units)

    if not np.all(np.isfinite(model.theta)):
        raise RegressionError("training diverged (non-finite parameters); lower the learning rate", code="diverged")
    logger.info(f"✅ Fitted {family.value} regressor on {len(data)} rows")
    return model


def evaluate_regression(model: RegressionModel, data: Dataset) -> Dict[str, float]:
    """MSE and coefficient of determination on a dataset"""
    data.check()
    residual = predict_batch(model, data.X) - data.y
    ss_res = float(np.sum(residual**2))
    ss_tot = float(np.sum((data.y - data.y.mean()) ** 2))
    return {"mse": ss_res / len(data), "r_squared": 1.0 - ss_res / ss_tot}


# -- persistence ---------------------------------------------------------------


def model_to_document(model: RegressionModel) -> str:
    """Self-describing JSON text; floats round-trip exactly"""
    document = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "family": model.family.value,
        "hidden_units": model.hidden_units,
        "feature_order": list(model.feature_order),
        "theta": [float(v) for v in model.theta],
        "norm_stats": {
            "mean": [float(v) for v in model.norm_stats.mean],
            "std": [float(v) for v in model.norm_stats.std],
            "target_mean": float(model.norm_stats.target_mean),
            "target_scale": float(model.norm_stats.target_scale),
        },
    }
    return json.dumps(document, indent=2)


def model_from_document(text: str) -> RegressionModel:
    try:
        document = json.loads(text)
    except json.JSONDecodeError as e:
        raise RegressionError(f"model document is not valid JSON: {e}", code="bad_model_document") from e
    if document.get("format") != MODEL_FORMAT or document.get("version") != MODEL_VERSION:
        raise RegressionError("unsupported model document", code="bad_model_document")
    stats = document["norm_stats"]
    return RegressionModel(
        family=ModelFamily(document["family"]),
        theta=np.array(document["theta"], dtype=float),
        norm_stats=NormStats(
            mean=np.array(stats["mean"], dtype=float),
            std=np.array(stats["std"], dtype=float),
            target_mean=float(stats["target_mean"]),
            target_scale=float(stats["target_scale"]),
        ),
        feature_order=tuple(document["feature_order"]),
        hidden_units=int(document["hidden_units"]),
    )
