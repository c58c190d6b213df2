"""
Shapley feature attributions for the path-loss regressor.

The value of a coalition S is the model output at x with every feature
outside S replaced by its background mean. Under that value function a
linear model has the closed form phi_i = w_i * (x_i - m_i) / sigma_i; any
other model goes through permutation sampling or full coalition enumeration.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from src.core.errors import AttributionError
from src.core.regressor import Dataset, ModelFamily, RegressionModel, predict_batch

logger = logging.getLogger(__name__)

PredictFn = Callable[[np.ndarray], np.ndarray]
SeedKey = Union[int, Tuple[int, ...]]

# Above this many features coalition enumeration is refused
MAX_ENUMERATED_FEATURES = 16
_PERMUTATION_CHUNK = 1000


@dataclass(frozen=True)
class Attribution:
    per_feature: np.ndarray
    base_value: float
    feature_order: Tuple[str, ...]

    @property
    def total(self) -> float:
        """base_value + sum(per_feature), equal to the model output at x"""
        return float(self.base_value + self.per_feature.sum())


@dataclass(frozen=True)
class GlobalImportance:
    feature_order: Tuple[str, ...]
    mean_abs: np.ndarray
    # (n, d) feature values and matching Shapley values, for summary plots
    values: np.ndarray
    shapley: np.ndarray

    @property
    def ranking(self) -> List[str]:
        order = np.argsort(-self.mean_abs, kind="stable")
        return [self.feature_order[i] for i in order]


def _background_mean(background: Dataset) -> np.ndarray:
    if len(background) == 0:
        raise AttributionError("background set is empty", code="empty_background")
    return background.X.mean(axis=0)


def _feature_names(d: int, feature_order: Optional[Sequence[str]]) -> Tuple[str, ...]:
    return tuple(feature_order) if feature_order is not None else tuple(f"f{i}" for i in range(d))


def exact_shapley_linear(model: RegressionModel, x: Sequence[float], background: Dataset) -> Attribution:
    if model.family is not ModelFamily.LINEAR:
        raise AttributionError("closed-form attribution needs a linear model", code="not_linear")
    mean = _background_mean(background)
    x = np.asarray(x, dtype=float)
    d = model.n_features
    phi = model.theta[:d] * (x - mean) / model.norm_stats.std
    base = float(predict_batch(model, mean[None, :])[0])
    return Attribution(per_feature=phi, base_value=base, feature_order=model.feature_order)


def sampling_shapley(
    predict_fn: PredictFn,
    x: Sequence[float],
    background: Dataset,
    n_permutations: int,
    seed: SeedKey = 0,
    feature_order: Optional[Sequence[str]] = None,
) -> Attribution:
    """
    Permutation-sampling estimate.

    Permutation k is drawn from default_rng([*seed, k]), so the estimate does
    not depend on evaluation order. The efficiency residual left by floating
    point is spread uniformly over features.
    """
    if n_permutations < 1:
        raise AttributionError("n_permutations must be >= 1", code="invalid_permutations")
    mean = _background_mean(background)
    x = np.asarray(x, dtype=float)
    d = x.shape[0]
    key = list(seed) if isinstance(seed, tuple) else [seed]

    totals = np.zeros(d)
    for start in range(0, n_permutations, _PERMUTATION_CHUNK):
        stop = min(start + _PERMUTATION_CHUNK, n_permutations)
        perms = np.array([np.random.default_rng([*key, k]).permutation(d) for k in range(start, stop)])
        # d+1 points per permutation, switching one feature at a time from mean to x
        position = np.argsort(perms, axis=1)
        switched = position[:, None, :] < np.arange(d + 1)[None, :, None]
        points = np.where(switched, x, mean)
        outputs = np.asarray(predict_fn(points.reshape(-1, d)), dtype=float).reshape(len(perms), d + 1)
        marginal = np.diff(outputs, axis=1)
        np.add.at(totals, perms.ravel(), marginal.ravel())

    phi = totals / n_permutations
    base = float(np.asarray(predict_fn(mean[None, :]), dtype=float)[0])
    full = float(np.asarray(predict_fn(x[None, :]), dtype=float)[0])
    phi += (full - base - phi.sum()) / d
    return Attribution(per_feature=phi, base_value=base, feature_order=_feature_names(d, feature_order))


def enumerate_shapley(predict_fn: PredictFn, x: Sequence[float], background: Dataset, feature_order: Optional[Sequence[str]] = None) -> Attribution:
    """Exact Shapley values by evaluating all 2^d coalitions"""
    mean = _background_mean(background)
    x = np.asarray(x, dtype=float)
    d = x.shape[0]
    if d > MAX_ENUMERATED_FEATURES:
        raise AttributionError(f"refusing to enumerate 2^{d} coalitions", code="too_many_features")

    codes = np.arange(2**d)
    masks = ((codes[:, None] >> np.arange(d)) & 1).astype(bool)
    values = np.asarray(predict_fn(np.where(masks, x, mean)), dtype=float)
    sizes = masks.sum(axis=1)
    weights = np.array([math.factorial(s) * math.factorial(d - s - 1) / math.factorial(d) if s < d else 0.0 for s in range(d + 1)])

    phi = np.empty(d)
    for i in range(d):
        without = codes[~masks[:, i]]
        phi[i] = np.sum(weights[sizes[without]] * (values[without | (1 << i)] - values[without]))
    return Attribution(per_feature=phi, base_value=float(values[0]), feature_order=_feature_names(d, feature_order))


def select_background(dataset: Dataset, size: int = 512, seed: Optional[int] = None) -> Dataset:
    """Seeded subsample without replacement; the whole set when it is small enough"""
    if len(dataset) == 0:
        raise AttributionError("cannot draw a background from an empty dataset", code="empty_background")
    if size >= len(dataset):
        return dataset
    rng = np.random.default_rng(seed if seed is not None else 0)
    return dataset.subset(np.sort(rng.choice(len(dataset), size=size, replace=False)))


def attribute_dataset(
    model: RegressionModel,
    dataset: Dataset,
    background: Dataset,
    method: str = "auto",
    n_permutations: int = 1000,
    seed: Optional[int] = None,
) -> List[Attribution]:
    """
    Attribute every row of `dataset`.

    `auto` takes the closed form for linear models and permutation sampling
    otherwise; `exact` insists on the closed form; `enumerate` evaluates all
    coalitions.
    """
    if method == "auto":
        method = "exact" if model.family is ModelFamily.LINEAR else "sampling"
    seed = seed if seed is not None else 0
    predict_fn = lambda X: predict_batch(model, X)  # noqa: E731

    if method == "exact":
        attributions = [exact_shapley_linear(model, row, background) for row in dataset.X]
    elif method == "sampling":
        attributions = [
            sampling_shapley(predict_fn, row, background, n_permutations, seed=(seed, r), feature_order=model.feature_order)
            for r, row in enumerate(dataset.X)
        ]
    elif method == "enumerate":
        attributions = [enumerate_shapley(predict_fn, row, background, feature_order=model.feature_order) for row in dataset.X]
    else:
        raise AttributionError(f"unknown attribution method '{method}'", code="invalid_method")

    logger.info(f"✅ Attributed {len(attributions)} rows ({method})")
    return attributions


def global_importance(attributions: Sequence[Attribution], samples: Union[Dataset, np.ndarray]) -> GlobalImportance:
    """Mean |phi| per feature plus the raw (value, phi) pairs"""
    if not attributions:
        raise AttributionError("need at least one attribution", code="no_attributions")
    shapley = np.vstack([a.per_feature for a in attributions])
    values = samples.X if isinstance(samples, Dataset) else np.atleast_2d(np.asarray(samples, dtype=float))
    if values.shape != shapley.shape:
        raise AttributionError(f"{values.shape[0]} samples for {shapley.shape[0]} attributions", code="shape_mismatch")
    return GlobalImportance(
        feature_order=attributions[0].feature_order,
        mean_abs=np.abs(shapley).mean(axis=0),
        values=values,
        shapley=shapley,
    )


def attributions_to_frame(importance: GlobalImportance, base_values: Sequence[float]) -> pd.DataFrame:
    """Long table: one row per (sample, feature)"""
    n, d = importance.shapley.shape
    return pd.DataFrame(
        {
            "sample": np.repeat(np.arange(n), d),
            "feature": np.tile(importance.feature_order, n),
            "feature_value": importance.values.ravel(),
            "shapley_value": importance.shapley.ravel(),
            "base_value": np.repeat(np.asarray(base_values, dtype=float), d),
        }
    )


def importance_to_frame(importance: GlobalImportance) -> pd.DataFrame:
    index = {name: i for i, name in enumerate(importance.feature_order)}
    ranking = importance.ranking
    return pd.DataFrame(
        {
            "rank": np.arange(1, len(ranking) + 1),
            "feature": ranking,
            "mean_abs_shapley": [importance.mean_abs[index[name]] for name in ranking],
        }
    )
