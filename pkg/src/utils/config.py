"""
Configuration models for AirShield.

All experiment settings are pydantic models validated from a JSON document;
secrets (the inference endpoint key) come from the environment via a .env file.
"""

import hashlib
import logging
import math
import os
from pathlib import Path
from typing import Annotated, List, Literal, Optional, Tuple, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, SecretStr, ValidationError, model_validator

from src.core.errors import ConfigError
from src.core.features import SPEED_OF_LIGHT

logger = logging.getLogger(__name__)

API_KEY_ENV = "AIRSHIELD_API_KEY"
ENDPOINT_ENV = "AIRSHIELD_ENDPOINT_URL"
MODEL_ENV = "AIRSHIELD_MODEL"

MAX_SEED = 2**64 - 1


def load_environment(dotenv_path: Optional[str] = None) -> None:
    """Load AIRSHIELD_* variables from a .env file if one exists"""
    load_dotenv(dotenv_path)


def derive_seed(master_seed: int, stage: str) -> int:
    """Stable per-stage seed: SHA-256 of 'master:stage', first 8 bytes"""
    digest = hashlib.sha256(f"{master_seed}:{stage}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


class _ConfigModel(BaseModel):
    model_config = ConfigDict(extra="forbid", allow_inf_nan=False, frozen=True)


Seed = Optional[Annotated[int, Field(ge=0, le=MAX_SEED)]]


def _check_seed(value: int) -> int:
    if not 0 <= value <= MAX_SEED:
        raise ConfigError("seed must be an unsigned 64-bit integer", code="invalid_seed")
    return value


class UserGrid(_ConfigModel):
    """Rectangular cluster of users, sampled every `spacing` meters"""

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    spacing: float = Field(gt=0)

    @model_validator(mode="after")
    def _check_extent(self):
        if not self.x_max > self.x_min:
            raise ValueError("x_max must exceed x_min")
        if not self.y_max > self.y_min:
            raise ValueError("y_max must exceed y_min")
        return self

    def axis_points(self) -> Tuple[int, int]:
        nx = int(math.floor((self.x_max - self.x_min) / self.spacing + 1e-9)) + 1
        ny = int(math.floor((self.y_max - self.y_min) / self.spacing + 1e-9)) + 1
        return nx, ny


def _default_grids() -> List[UserGrid]:
    # two disjoint 100 x 100 clusters north and south of the base station
    return [
        UserGrid(x_min=-300.0, x_max=195.0, y_min=50.0, y_max=545.0, spacing=5.0),
        UserGrid(x_min=-300.0, x_max=195.0, y_min=-600.0, y_max=-105.0, spacing=5.0),
    ]


class SceneConfig(_ConfigModel):
    bs_position: Tuple[float, float, float] = (0.0, 0.0, 15.0)
    user_height: float = 2.0
    user_grids: List[UserGrid] = Field(default_factory=_default_grids)
    carrier_frequency: float = Field(default=28e9, gt=0)
    tx_power_dbm: float = 0.0
    reference_distance: float = Field(default=1.0, gt=0)
    pathloss_exponent_los: float = Field(default=2.0, ge=1)
    pathloss_exponent_nlos: float = Field(default=3.5, ge=1)
    shadowing_sigma_db: float = Field(default=4.0, ge=0)
    nlos_model: Literal["fixed", "distance"] = "distance"
    nlos_probability: float = Field(default=0.3, ge=0, le=1)
    nlos_cutoff_distance: float = Field(default=500.0, gt=0)
    blockage_probability: float = Field(default=0.05, ge=0, le=1)
    nlos_excess_delay_max: float = Field(default=1e-7, gt=0)
    nlos_angle_spread_deg: float = Field(default=30.0, ge=0, le=180)
    blocked_pathloss_db: float = 250.0
    rng_seed: Seed = None

    @property
    def reference_pathloss_db(self) -> float:
        """Free-space intercept PL(d0) = 20 log10(4 pi d0 f / c)"""
        return 20.0 * math.log10(4.0 * math.pi * self.reference_distance * self.carrier_frequency / SPEED_OF_LIGHT)


class RegressorHyper(_ConfigModel):
    family: Literal["linear", "mlp-1-hidden"] = "linear"
    solver: Literal["closed_form", "gradient_descent"] = "closed_form"
    learning_rate: float = Field(default=0.01, gt=0)
    epochs: int = Field(default=200, ge=1)
    batch_size: int = Field(default=64, ge=1)
    hidden_units: int = Field(default=16, ge=1)
    seed: Seed = None


class AttackConfig(_ConfigModel):
    epsilon: float = Field(default=0.1, ge=0)
    fract: float = Field(default=0.99, ge=0, le=1)
    space: Literal["standardized", "raw"] = "standardized"
    clamp_to_physical: bool = False
    retrain: bool = False
    seed: Seed = None


class AttributionConfig(_ConfigModel):
    method: Literal["auto", "exact", "sampling", "enumerate"] = "auto"
    data: Literal["clean", "poisoned"] = "clean"
    background_size: int = Field(default=512, ge=1)
    samples: int = Field(default=200, ge=1)
    n_permutations: int = Field(default=1000, ge=1)
    seed: Seed = None


class SplitConfig(_ConfigModel):
    train_fraction: float = Field(default=0.8, gt=0, lt=1)
    test_count: int = Field(default=500, ge=1)
    composition: Literal["poisoned", "paired"] = "poisoned"
    seed: Seed = None


class DetectorHyper(_ConfigModel):
    kind: Literal["logistic", "mlp-1-hidden"] = "logistic"
    learning_rate: float = Field(default=0.5, gt=0)
    epochs: int = Field(default=300, ge=1)
    # 0 = full batch
    batch_size: int = Field(default=0, ge=0)
    hidden_units: int = Field(default=8, ge=1)
    decision_threshold: float = Field(default=0.5, gt=0, lt=1)
    seed: Seed = None


class RetryPolicy(_ConfigModel):
    max_retries: int = Field(default=3, ge=0)
    backoff_base_seconds: float = Field(default=1.0, ge=0)


class GatewayConfig(_ConfigModel):
    backend: Literal["remote", "mock"] = "mock"
    endpoint_url: str = Field(default_factory=lambda: os.getenv(ENDPOINT_ENV, "http://localhost:8000/v1"))
    api_key: SecretStr = Field(default_factory=lambda: SecretStr(os.getenv(API_KEY_ENV, "")), exclude=True)
    model_name: str = Field(default_factory=lambda: os.getenv(MODEL_ENV, "airshield-verdict"))
    max_output_tokens: int = Field(default=2048, ge=1)
    temperature: float = Field(default=0.0, ge=0)
    request_timeout: float = Field(default=60.0, gt=0)
    max_parallel_requests: int = Field(default=4, ge=1)
    retry_policy: RetryPolicy = Field(default_factory=RetryPolicy)
    abort_failure_fraction: float = Field(default=0.5, ge=0, le=1)
    transcript_dir: Optional[str] = None
    explain: bool = True


class ExperimentConfig(_ConfigModel):
    seed: Annotated[int, Field(ge=0, le=MAX_SEED)] = 20240601
    scene: SceneConfig = Field(default_factory=SceneConfig)
    regressor: RegressorHyper = Field(default_factory=RegressorHyper)
    attack: AttackConfig = Field(default_factory=AttackConfig)
    attribution: AttributionConfig = Field(default_factory=AttributionConfig)
    split: SplitConfig = Field(default_factory=SplitConfig)
    detector: DetectorHyper = Field(default_factory=DetectorHyper)
    gateway: Optional[GatewayConfig] = None
    report_dir: str = "runs/latest"

    def resolved(self) -> "ExperimentConfig":
        """Copy with every unset stage seed derived from the master seed"""

        def fill(section: BaseModel, field: str, stage: str) -> BaseModel:
            if getattr(section, field) is not None:
                return section
            return section.model_copy(update={field: derive_seed(self.seed, stage)})

        return self.model_copy(
            update={
                "scene": fill(self.scene, "rng_seed", "emulate"),
                "regressor": fill(self.regressor, "seed", "train-regressor"),
                "attack": fill(self.attack, "seed", "attack"),
                "attribution": fill(self.attribution, "seed", "attribute"),
                "split": fill(self.split, "seed", "split"),
                "detector": fill(self.detector, "seed", "train-detector"),
            }
        )

    def with_master_seed(self, seed: int) -> "ExperimentConfig":
        return self.model_copy(update={"seed": _check_seed(seed)})

    def snapshot(self) -> dict:
        """JSON-safe dump; the api key field is excluded from serialization"""
        return self.model_dump(mode="json")


ConfigSource = Union[str, Path]


def load_experiment_config(path: ConfigSource) -> ExperimentConfig:
    """Read and validate an experiment config file"""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}", code="config_not_found")
    try:
        config = ExperimentConfig.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise ConfigError(f"invalid config {path}: {e}") from e
    logger.debug(f"Loaded experiment config from {path}")
    return config
