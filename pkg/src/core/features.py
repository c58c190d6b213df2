"""
Canonical wireless-record schema.

Column order, units and physical ranges of the 12 propagation features, plus
the fixed 2-decimal text resolution shared by the prompt codec and the
classical detector.
"""

import math
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from src.core.errors import CodecError

SPEED_OF_LIGHT = 299_792_458.0

# Record column order; CSV headers use these names verbatim
RECORD_COLUMNS: List[str] = [
    "x",
    "y",
    "distance",
    "pathloss",
    "doa_phi",
    "doa_theta",
    "dod_phi",
    "dod_theta",
    "phase",
    "power",
    "toa",
    "los",
]

TARGET_COLUMN = "pathloss"

# Regressor inputs: everything except the prediction target
INPUT_FEATURES: List[str] = [c for c in RECORD_COLUMNS if c != TARGET_COLUMN]

# name -> (description, unit)
FEATURE_INFO: Dict[str, Tuple[str, str]] = {
    "x": ("X coordinate of the end user relative to the emulated area", ""),
    "y": ("Y coordinate of the end user relative to the emulated area", ""),
    "distance": ("Distance between the base station and the user", "meters"),
    "pathloss": ("Combined path loss between sender and receiver", "decibels"),
    "doa_phi": ("Azimuth angle of signal arrival", "degrees"),
    "doa_theta": ("Zenith angle of signal arrival", "degrees"),
    "dod_phi": ("Azimuth angle of signal departure", "degrees"),
    "dod_theta": ("Zenith angle of signal departure", "degrees"),
    "phase": ("Phase of the signal path", "degrees"),
    "power": ("Power of the signal at the receiver", "watts"),
    "toa": ("Time of arrival of the signal", "seconds"),
    "los": ("Line of sight status between the base station and the user", ""),
}

# Closed physical ranges (infinite where unbounded)
PHYSICAL_BOUNDS: Dict[str, Tuple[float, float]] = {
    "x": (-math.inf, math.inf),
    "y": (-math.inf, math.inf),
    "distance": (0.0, math.inf),
    "pathloss": (-math.inf, math.inf),
    "doa_phi": (-180.0, math.nextafter(180.0, 0.0)),
    "doa_theta": (0.0, 180.0),
    "dod_phi": (-180.0, math.nextafter(180.0, 0.0)),
    "dod_theta": (0.0, 180.0),
    "phase": (0.0, math.nextafter(360.0, 0.0)),
    "power": (0.0, math.inf),
    "toa": (0.0, math.inf),
    "los": (-1.0, 1.0),
}


def column_index(name: str, columns: Sequence[str] = RECORD_COLUMNS) -> int:
    return list(columns).index(name)


def format_value(value: float) -> str:
    """Render one feature value at text resolution (2 decimals, no locale)"""
    value = float(value)
    if not math.isfinite(value):
        raise CodecError(f"cannot render non-finite value {value!r}", code="non_finite_value")
    text = f"{value:.2f}"
    if text == "-0.00":
        text = "0.00"
    return text


def quantize(values: Iterable[float]) -> np.ndarray:
    """Values as a reader of the rendered text would see them"""
    return np.array([float(format_value(v)) for v in values], dtype=float)


def clamp_to_physical(values: np.ndarray, columns: Sequence[str]) -> np.ndarray:
    """Project a vector (or a batch of row vectors) into physical ranges"""
    values = np.array(values, dtype=float)
    lower = np.array([PHYSICAL_BOUNDS[c][0] for c in columns])
    upper = np.array([PHYSICAL_BOUNDS[c][1] for c in columns])
    clipped = np.clip(values, lower, upper)
    # los is categorical
    if "los" in columns:
        idx = list(columns).index("los")
        clipped[..., idx] = np.rint(clipped[..., idx])
    return clipped


def wrap_azimuth(angle_deg):
    """Wrap degrees into [-180, 180)"""
    wrapped = np.mod(np.asarray(angle_deg, dtype=float) + 180.0, 360.0) - 180.0
    # np.mod can round up to the excluded endpoint
    return np.where(wrapped >= 180.0, -180.0, wrapped)
