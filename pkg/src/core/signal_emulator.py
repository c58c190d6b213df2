"""
Synthetic wireless-propagation telemetry.

A single base station and one or more rectangular user clusters; each user
gets one dominant-path observation with the 12-feature record schema. The
path loss follows a log-distance model with log-normal shadowing and a
free-space intercept; visibility is drawn from a fixed or distance-dependent
NLoS probability, and a share of NLoS users is fully blocked (los = -1).

Angle convention: azimuth from +x counterclockwise in [-180, 180), zenith
from +z in [0, 180].
"""

import logging
import math
from dataclasses import astuple, dataclass
from typing import List, NamedTuple, Optional, Sequence, Union

import numpy as np
import pandas as pd

from src.core.errors import EmulationError
from src.core.features import RECORD_COLUMNS, SPEED_OF_LIGHT, wrap_azimuth
from src.utils.config import SceneConfig

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]

# Draws per record, in this order: shadowing (normal), then uniforms for
# visibility, blockage, excess delay, azimuth offset, zenith offset.
_UNIFORM_DRAWS = 5


@dataclass(frozen=True)
class ChannelRecord:
    """One emulated user's dominant-path observation"""

    x_coord: float
    y_coord: float
    distance: float
    pathloss: float
    doa_phi: float
    doa_theta: float
    dod_phi: float
    dod_theta: float
    phase: float
    power: float
    time_of_arrival: float
    los: int

    def values(self) -> np.ndarray:
        """The 12 features in canonical column order"""
        return np.array(astuple(self), dtype=float)


class Geometry(NamedTuple):
    doa_phi: ArrayLike
    doa_theta: ArrayLike
    dod_phi: ArrayLike
    dod_theta: ArrayLike
    distance: ArrayLike


class Arrival(NamedTuple):
    time_of_arrival: ArrayLike
    phase: ArrayLike
    power: ArrayLike


def _scalar_or_array(value: np.ndarray) -> ArrayLike:
    return float(value) if np.ndim(value) == 0 else value


def compute_pathloss(distance: ArrayLike, los: ArrayLike, config: SceneConfig, shadowing_draw: ArrayLike = 0.0) -> ArrayLike:
    """Log-distance path loss in dB; fully blocked users get the configured ceiling"""
    d = np.asarray(distance, dtype=float)
    los = np.asarray(los)
    if np.any(~np.isfinite(d)) or np.any(d <= 0):
        raise EmulationError("path loss needs a strictly positive distance", code="non_positive_distance")

    exponent = np.where(los == 1, config.pathloss_exponent_los, config.pathloss_exponent_nlos)
    pl = config.reference_pathloss_db + 10.0 * exponent * np.log10(d / config.reference_distance) + shadowing_draw
    pl = np.where(los == -1, config.blocked_pathloss_db, pl)
    return _scalar_or_array(pl)


def compute_geometry(bs_position: Sequence[float], user_position) -> Geometry:
    """
    Departure (BS -> user) and arrival (user -> BS) angles of the direct ray.

    `user_position` may be a single 3-vector or an (n, 3) array.
    """
    bs = np.asarray(bs_position, dtype=float)
    users = np.asarray(user_position, dtype=float)
    ray = users - bs
    distance = np.linalg.norm(ray, axis=-1)
    if np.any(distance == 0):
        raise EmulationError("user and base station positions coincide", code="coincident_positions")

    dod_phi = wrap_azimuth(np.degrees(np.arctan2(ray[..., 1], ray[..., 0])))
    dod_theta = np.degrees(np.arccos(np.clip(ray[..., 2] / distance, -1.0, 1.0)))
    # arrival ray points back at the transmitter
    doa_phi = wrap_azimuth(dod_phi + 180.0)
    doa_theta = 180.0 - dod_theta

    return Geometry(
        doa_phi=_scalar_or_array(doa_phi),
        doa_theta=_scalar_or_array(doa_theta),
        dod_phi=_scalar_or_array(dod_phi),
        dod_theta=_scalar_or_array(dod_theta),
        distance=_scalar_or_array(distance),
    )


def compute_arrival(
    distance: ArrayLike,
    los: ArrayLike,
    config: SceneConfig,
    pathloss: ArrayLike,
    rng: Optional[np.random.Generator] = None,
    excess_fraction: Optional[ArrayLike] = None,
) -> Arrival:
    """
    Time of arrival, phase and received power of the dominant path.

    NLoS paths add an excess delay in (0, nlos_excess_delay_max]; it is
    drawn from `rng` unless `excess_fraction` (uniform in [0, 1)) is given.
    Blocked users get the sentinel delay 10 * d / c and zero power.
    """
    d = np.asarray(distance, dtype=float)
    los = np.asarray(los)
    if np.any(d <= 0):
        raise EmulationError("arrival needs a strictly positive distance", code="non_positive_distance")

    if excess_fraction is None:
        if rng is None:
            rng = np.random.default_rng()
        excess_fraction = rng.random(d.shape)
    excess = config.nlos_excess_delay_max * (1.0 - np.asarray(excess_fraction, dtype=float))

    direct = d / SPEED_OF_LIGHT
    toa = np.where(los == 1, direct, np.where(los == 0, direct + excess, 10.0 * direct))

    phase = np.mod(360.0 * config.carrier_frequency * toa, 360.0)
    phase = np.where(phase >= 360.0, 0.0, phase)

    power = np.power(10.0, (config.tx_power_dbm - np.asarray(pathloss, dtype=float)) / 10.0) / 1000.0
    power = np.where(los == -1, 0.0, power)

    return Arrival(
        time_of_arrival=_scalar_or_array(toa),
        phase=_scalar_or_array(phase),
        power=_scalar_or_array(power),
    )


def _check_finite(config: SceneConfig) -> None:
    numbers = [
        *config.bs_position,
        config.user_height,
        config.carrier_frequency,
        config.tx_power_dbm,
        config.reference_distance,
        config.pathloss_exponent_los,
        config.pathloss_exponent_nlos,
        config.shadowing_sigma_db,
        config.nlos_probability,
        config.nlos_cutoff_distance,
        config.blockage_probability,
        config.nlos_excess_delay_max,
        config.nlos_angle_spread_deg,
        config.blocked_pathloss_db,
    ]
    for grid in config.user_grids:
        numbers.extend([grid.x_min, grid.x_max, grid.y_min, grid.y_max, grid.spacing])
    if not all(math.isfinite(v) for v in numbers):
        raise EmulationError("scene config contains non-finite values", code="non_finite_config")


def grid_points(config: SceneConfig) -> np.ndarray:
    """(n, 2) user positions, cluster by cluster, x varying fastest"""
    blocks = []
    for grid in config.user_grids:
        nx, ny = grid.axis_points()
        xs = grid.x_min + grid.spacing * np.arange(nx)
        ys = grid.y_min + grid.spacing * np.arange(ny)
        gx, gy = np.meshgrid(xs, ys)
        blocks.append(np.column_stack([gx.ravel(), gy.ravel()]))
    if not blocks:
        return np.empty((0, 2))
    return np.vstack(blocks)


def _record_draws(seed: int, count: int) -> np.ndarray:
    """Per-record random draws from counter-keyed streams (seed, index)"""
    draws = np.empty((count, 1 + _UNIFORM_DRAWS))
    for index in range(count):
        rng = np.random.default_rng([seed, index])
        draws[index, 0] = rng.standard_normal()
        draws[index, 1:] = rng.random(_UNIFORM_DRAWS)
    return draws


def generate_scene(config: SceneConfig) -> List[ChannelRecord]:
    """Emulate one record per grid point; deterministic for a given rng_seed"""
    _check_finite(config)
    points = grid_points(config)
    count = len(points)
    if count == 0:
        raise EmulationError("scene config produces zero grid points", code="empty_scene")

    seed = config.rng_seed if config.rng_seed is not None else 0
    logger.info(f"🔧 Emulating {count} users (seed={seed})")

    users = np.column_stack([points, np.full(count, config.user_height)])
    geometry = compute_geometry(config.bs_position, users)
    distance = np.asarray(geometry.distance)

    draws = _record_draws(seed, count)
    shadow_z, u_visibility, u_blockage, u_excess, u_azimuth, u_zenith = draws.T

    if config.nlos_model == "fixed":
        p_nlos = np.full(count, config.nlos_probability)
    else:
        p_nlos = np.minimum(1.0, distance / config.nlos_cutoff_distance)
    los = np.where(u_visibility < p_nlos, np.where(u_blockage < config.blockage_probability, -1, 0), 1)

    pathloss = np.asarray(compute_pathloss(distance, los, config, config.shadowing_sigma_db * shadow_z))
    arrival = compute_arrival(distance, los, config, pathloss, excess_fraction=u_excess)

    # reflected dominant path: arrival direction scattered around the direct ray
    spread = config.nlos_angle_spread_deg
    nlos = los == 0
    doa_phi = np.where(nlos, wrap_azimuth(np.asarray(geometry.doa_phi) + spread * (2.0 * u_azimuth - 1.0)), geometry.doa_phi)
    doa_theta = np.where(nlos, np.clip(np.asarray(geometry.doa_theta) + spread * (2.0 * u_zenith - 1.0), 0.0, 180.0), geometry.doa_theta)

    columns = [
        points[:, 0],
        points[:, 1],
        distance,
        pathloss,
        doa_phi,
        doa_theta,
        np.asarray(geometry.dod_phi),
        np.asarray(geometry.dod_theta),
        np.asarray(arrival.phase),
        np.asarray(arrival.power),
        np.asarray(arrival.time_of_arrival),
    ]
    table = np.column_stack(columns)
    records = [ChannelRecord(*map(float, row), los=int(flag)) for row, flag in zip(table, los)]

    counts = {state: int(np.sum(los == state)) for state in (1, 0, -1)}
    logger.info(f"✅ Scene ready: {count} records (LoS={counts[1]}, NLoS={counts[0]}, blocked={counts[-1]})")
    return records


def records_to_frame(records: Sequence[ChannelRecord]) -> pd.DataFrame:
    frame = pd.DataFrame([astuple(r) for r in records], columns=RECORD_COLUMNS)
    frame["los"] = frame["los"].astype(int)
    return frame


def frame_to_records(frame: pd.DataFrame) -> List[ChannelRecord]:
    if list(frame.columns[: len(RECORD_COLUMNS)]) != RECORD_COLUMNS:
        raise EmulationError(f"unexpected record columns {list(frame.columns)}", code="bad_record_columns")
    values = frame[RECORD_COLUMNS].to_numpy(dtype=float)
    return [ChannelRecord(*map(float, row[:-1]), los=int(round(row[-1]))) for row in values]


def record_values(record: ChannelRecord) -> np.ndarray:
    return record.values()
