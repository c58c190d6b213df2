"""
Error types shared by every AirShield stage.

Each error carries a machine-readable ``code`` and the process ``exit_code``
the CLI uses when the error escapes a command.
"""

from typing import Optional


class AirShieldError(Exception):
    """Root of all AirShield errors"""

    code = "airshield_error"
    exit_code = 1

    def __init__(self, message: str, code: Optional[str] = None):
        super().__init__(message)
        if code:
            self.code = code


class ConfigError(AirShieldError, ValueError):
    code = "invalid_config"
    exit_code = 2


class EmulationError(AirShieldError, ValueError):
    code = "emulation_failed"
    exit_code = 10


class RegressionError(AirShieldError, ValueError):
    code = "regression_failed"
    exit_code = 11


class AttackError(AirShieldError, ValueError):
    code = "attack_failed"
    exit_code = 12


class AttributionError(AirShieldError, ValueError):
    code = "attribution_failed"
    exit_code = 13


class DetectorError(AirShieldError, ValueError):
    code = "detector_failed"
    exit_code = 14


class CodecError(AirShieldError, ValueError):
    code = "codec_failed"
    exit_code = 16


class GatewayError(AirShieldError):
    code = "gateway_failed"
    exit_code = 17


# Pipeline stage name -> process exit code
STAGE_EXIT_CODES = {
    "config": 2,
    "emulate": 10,
    "train-regressor": 11,
    "attack": 12,
    "attribute": 13,
    "train-detector": 14,
    "evaluate": 15,
    "export-sft": 16,
    "classify-llm": 17,
    "explain": 18,
}


class StageError(AirShieldError):
    """A pipeline stage failed; wraps the underlying cause"""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        self.exit_code = STAGE_EXIT_CODES.get(stage, 1)
        code = getattr(cause, "code", None) or type(cause).__name__
        super().__init__(f"stage '{stage}' failed: {cause}", code=f"{stage}:{code}")
