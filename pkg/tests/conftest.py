"""Shared fixtures: small seeded scenes, a fitted regressor and a trained detector."""

import importlib.util
from pathlib import Path

import numpy as np
import pytest

from src.core.adversary import poison_dataset
from src.core.detector import train_detector
from src.core.pipeline import split_dataset
from src.core.regressor import Dataset, fit_regressor
from src.core.signal_emulator import generate_scene
from src.utils.config import AttackConfig, DetectorHyper, SceneConfig, SplitConfig, UserGrid

REPO_ROOT = Path(__file__).resolve().parent.parent
FIXTURES = Path(__file__).resolve().parent / "fixtures"


def small_scene_config(nx: int = 30, ny: int = 20, seed: int = 11) -> SceneConfig:
    """nx * ny users north of the base station, fixed NLoS share so every los state shows up"""
    grid = UserGrid(x_min=-75.0, x_max=-75.0 + 5.0 * (nx - 1), y_min=20.0, y_max=20.0 + 5.0 * (ny - 1), spacing=5.0)
    return SceneConfig(user_grids=[grid], nlos_model="fixed", nlos_probability=0.4, blockage_probability=0.1, rng_seed=seed)


@pytest.fixture(scope="session")
def small_scene():
    return generate_scene(small_scene_config())


@pytest.fixture(scope="session")
def clean_dataset(small_scene):
    return Dataset.from_records(small_scene)


@pytest.fixture(scope="session")
def linear_model(clean_dataset):
    return fit_regressor(clean_dataset)


@pytest.fixture(scope="session")
def poisoned_samples(clean_dataset, linear_model):
    return poison_dataset(clean_dataset, linear_model, AttackConfig(epsilon=0.5, fract=0.5, seed=3))


@pytest.fixture(scope="session")
def detector_split(poisoned_samples):
    return split_dataset(poisoned_samples, SplitConfig(test_count=100, seed=5))


@pytest.fixture(scope="session")
def trained_detector(detector_split):
    return train_detector(detector_split.train, DetectorHyper(seed=9))


@pytest.fixture
def toy_regression():
    """200 rows of an exactly linear target over 11 features of mixed scale"""
    rng = np.random.default_rng(42)
    scales = np.linspace(1.0, 5.0, 11)
    X = rng.normal(size=(200, 11)) * scales + rng.normal(size=11)
    w = rng.normal(size=11)
    return Dataset(X=X, y=X @ w + 3.0), w


@pytest.fixture(scope="session")
def cli_module():
    """tools/airshield_cli.py loaded by path; tools/ is not a package"""
    spec = importlib.util.spec_from_file_location("airshield_cli", REPO_ROOT / "tools" / "airshield_cli.py")
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module
