"""Signal-level physics: ULA steering vectors, the geometric multipath channel,
misalignment-driven channel error, beam gain / SINR, vehicle mobility and
noisy radar observations.

All angles are radians, distances meters, powers Watts. Vehicles are kept as a
struct of arrays so that every routine is vectorised over users.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ._kernels import multipath_channel

SPEED_OF_LIGHT = 299_792_458.0
# LoS amplitude is 1 at this distance and falls off as 1/d.
REFERENCE_DISTANCE = 50.0
HALF_PI = np.pi / 2


@dataclass(frozen=True)
class ArrayConfig:
    element_count: int = 64
    carrier_frequency: float = 28e9
    element_spacing: float = 0.5

    def __post_init__(self):
        if int(self.element_count) < 1:
            raise ValueError(f"element_count must be >= 1, got {self.element_count}")
        if not self.carrier_frequency > 0:
            raise ValueError("carrier_frequency must be positive")
        if not 0 < self.element_spacing <= 1:
            raise ValueError("element_spacing must lie in (0, 1]")

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_frequency


@dataclass
class VehicleTruth:
    """Ground-truth kinematics for K vehicles (one array entry per vehicle).

    Velocities are per second; ``advance_vehicles`` integrates them over the
    slot duration.
    """

    angle: np.ndarray
    distance: np.ndarray
    radial_velocity: np.ndarray
    angular_velocity: np.ndarray
    radar_bias: np.ndarray

    def __post_init__(self):
        for name in ("angle", "distance", "radial_velocity", "angular_velocity", "radar_bias"):
            setattr(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=np.float64)))
        if len({a.shape for a in self._arrays()}) != 1:
            raise ValueError("all vehicle fields must have the same length")
        if np.any(self.distance <= 0):
            raise ValueError("vehicle distance must be positive")
        if np.any(np.abs(self.angle) >= HALF_PI):
            raise ValueError("vehicle angle must lie inside (-pi/2, pi/2)")

    def _arrays(self):
        return (self.angle, self.distance, self.radial_velocity, self.angular_velocity, self.radar_bias)

    def __len__(self) -> int:
        return self.angle.shape[0]

    def copy(self) -> "VehicleTruth":
        return VehicleTruth(*(a.copy() for a in self._arrays()))


@dataclass(frozen=True)
class PathComponent:
    gain: complex
    delay: float
    departure_angle: float

    def __post_init__(self):
        if self.delay < 0:
            raise ValueError("path delay must be non-negative")


@dataclass
class ChannelRealization:
    true_channel: np.ndarray
    estimated_channel: np.ndarray | None = None
    error_variance: np.ndarray | None = None

    def __post_init__(self):
        if self.estimated_channel is None:
            self.estimated_channel = self.true_channel.copy()
        if self.error_variance is None:
            self.error_variance = np.zeros(self.true_channel.shape[0])
        if not (np.all(np.isfinite(self.true_channel)) and np.all(np.isfinite(self.estimated_channel))):
            raise ValueError("channel entries must be finite")

    @property
    def shape(self) -> tuple[int, int]:
        return self.true_channel.shape


@dataclass
class RadarObservation:
    angle_estimate: np.ndarray
    distance_estimate: np.ndarray


@dataclass(frozen=True)
class MobilityParams:
    """Per-slot process noise and scene bounds for ``advance_vehicles``."""

    angle_noise_std: float = 0.002
    distance_noise_std: float = 0.05
    bias_std: float = 0.004
    angle_limit: float = np.pi / 3
    min_distance: float = 10.0
    max_distance: float = 150.0


@dataclass(frozen=True)
class RadarParams:
    angle_std: float = 0.01
    distance_std: float = 0.5
    min_distance: float = 0.1


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def steering_vector(angle, config: ArrayConfig) -> np.ndarray:
    """ULA response ``exp(j 2 pi spacing m sin(angle))``, m = 0..M-1.

    ``angle`` may be a scalar (returns shape (M,)) or an array (returns
    ``angle.shape + (M,)``).
    """
    angle = np.asarray(angle, dtype=np.float64)
    if np.any(~np.isfinite(angle)) or np.any(np.abs(angle) >= HALF_PI):
        raise ValueError("steering angle must lie inside (-pi/2, pi/2)")
    m = np.arange(config.element_count)
    phase = 2 * np.pi * config.element_spacing * np.sin(angle)[..., None] * m
    return np.exp(1j * phase)


def channel_row(paths: list[PathComponent], config: ArrayConfig) -> np.ndarray:
    """Sum of path contributions alpha * exp(-j 2 pi f_c tau) * a(theta)."""
    row = np.zeros(config.element_count, dtype=np.complex128)
    for p in paths:
        rot = np.exp(-2j * np.pi * config.carrier_frequency * p.delay) if p.delay else 1.0
        row += p.gain * rot * steering_vector(p.departure_angle, config)
    return row


def los_amplitude(distance) -> np.ndarray:
    return REFERENCE_DISTANCE / np.asarray(distance, dtype=np.float64)


def sample_channel(
    vehicles: VehicleTruth,
    config: ArrayConfig,
    path_count: int = 3,
    rng_seed=None,
    nlos_power_db: float = -10.0,
    random_los_phase: bool = True,
) -> ChannelRealization:
    """Draw the K x M geometric multipath channel for one slot.

    The propagation delay of every path is folded into a uniformly random
    phase of its complex gain. Path 1 is LoS at the true vehicle angle with
    amplitude ``50 / d``; the remaining paths have circular Gaussian gains at
    ``nlos_power_db`` relative to the LoS power and uniform departure angles.
    """
    h = channel_matrix(vehicles, config, path_count, _rng(rng_seed), nlos_power_db, random_los_phase)
    return ChannelRealization(true_channel=h)


def channel_matrix(vehicles, config, path_count, rng, nlos_power_db=-10.0, random_los_phase=True) -> np.ndarray:
    if path_count < 1:
        raise ValueError("path_count must be >= 1")
    k = len(vehicles)
    amp = los_amplitude(vehicles.distance)
    los_phase = rng.uniform(-np.pi, np.pi, size=k) if random_los_phase else np.zeros(k)
    gains = (amp * np.exp(1j * los_phase))[:, None]
    angles = vehicles.angle[:, None]
    if path_count > 1:
        n_nlos = path_count - 1
        scale = amp[:, None] * np.sqrt(10 ** (nlos_power_db / 10) / 2)
        g = scale * (rng.standard_normal((k, n_nlos)) + 1j * rng.standard_normal((k, n_nlos)))
        # keep NLoS angles strictly inside the open field of view
        th = rng.uniform(-1.0, 1.0, size=(k, n_nlos)) * (HALF_PI - 1e-6)
        gains = np.concatenate([gains, g], axis=1)
        angles = np.concatenate([angles, th], axis=1)
    return multipath_channel(gains, np.sin(angles), float(config.element_spacing), config.element_count)


def apply_channel_error(true_channel, misalignment_probs, rho: float, rng_seed=None) -> ChannelRealization:
    """Subtract a circular Gaussian error with E||dh_k||^2 = rho * P_k."""
    if rho < 0:
        raise ValueError("rho must be non-negative")
    h = np.asarray(true_channel, dtype=np.complex128)
    p = np.asarray(misalignment_probs, dtype=np.float64)
    if p.shape != (h.shape[0],):
        raise ValueError("need one misalignment probability per channel row")
    if np.any((p < 0) | (p > 1)):
        raise ValueError("misalignment probabilities must lie in [0, 1]")
    rng = _rng(rng_seed)
    m = h.shape[1]
    var = rho * p
    std = np.sqrt(var / (2 * m))[:, None]
    dh = std * (rng.standard_normal(h.shape) + 1j * rng.standard_normal(h.shape))
    return ChannelRealization(true_channel=h, estimated_channel=h - dh, error_variance=var)


def beam_gain(channel_row, beam) -> float:
    """|h^H v|^2."""
    h = np.asarray(channel_row)
    v = np.asarray(beam)
    if h.shape != v.shape:
        raise ValueError(f"length mismatch: {h.shape} vs {v.shape}")
    return float(np.abs(np.vdot(h, v)) ** 2)


def gain_matrix(channel: np.ndarray, beams: np.ndarray) -> np.ndarray:
    """G[k, j] = |h_k^H v_j|^2 for all user/beam pairs."""
    return np.abs(np.conj(channel) @ beams.T) ** 2


def sinr(channel, beams, k: int, noise_power: float, power_scale: float = 1.0) -> float:
    h = channel.true_channel if isinstance(channel, ChannelRealization) else np.asarray(channel)
    return float(sinr_all(h, beams, noise_power, power_scale)[k])


def sinr_all(channel: np.ndarray, beams: np.ndarray, noise_power: float, power_scale: float = 1.0) -> np.ndarray:
    if not noise_power > 0:
        raise ValueError("noise_power must be positive")
    g = gain_matrix(channel, np.asarray(beams)) * power_scale**2
    signal = np.diag(g)
    interference = g.sum(axis=1) - signal
    return signal / (interference + noise_power)


def dbm_to_watts(dbm) -> float:
    return 10 ** (np.asarray(dbm, dtype=np.float64) / 10) / 1000


def advance_vehicles(
    vehicles: VehicleTruth,
    slot_duration: float,
    process_noise_seed=None,
    params: MobilityParams = MobilityParams(),
) -> VehicleTruth:
    """Constant-velocity step with Gaussian position jitter and a radar-bias
    random walk. Angles/distances leaving the scene bounds are reflected and
    the matching velocity is flipped."""
    if not slot_duration > 0:
        raise ValueError("slot_duration must be positive")
    rng = _rng(process_noise_seed)
    k = len(vehicles)
    ang_v = vehicles.angular_velocity.copy()
    rad_v = vehicles.radial_velocity.copy()
    angle = vehicles.angle + ang_v * slot_duration
    dist = vehicles.distance + rad_v * slot_duration
    # draws happen even at zero std so that stream positions do not depend on params
    angle = angle + params.angle_noise_std * rng.standard_normal(k)
    dist = dist + params.distance_noise_std * rng.standard_normal(k)
    bias = vehicles.radar_bias + params.bias_std * rng.standard_normal(k)

    lim = params.angle_limit
    out = np.abs(angle) > lim
    if out.any():
        angle = np.where(out, np.sign(angle) * 2 * lim - angle, angle)
        ang_v = np.where(out, -ang_v, ang_v)
        angle = np.clip(angle, -lim, lim)

    dmin, dmax = params.min_distance, params.max_distance
    hi, lo = dist > dmax, dist < dmin
    if hi.any() or lo.any():
        dist = np.where(hi, 2 * dmax - dist, np.where(lo, 2 * dmin - dist, dist))
        rad_v = np.where(hi | lo, -rad_v, rad_v)
        dist = np.clip(dist, dmin, dmax)

    return replace(vehicles, angle=angle, distance=dist, radial_velocity=rad_v,
                   angular_velocity=ang_v, radar_bias=bias)


def radar_observe(vehicles: VehicleTruth, noise_seed=None, params: RadarParams = RadarParams()) -> RadarObservation:
    rng = _rng(noise_seed)
    k = len(vehicles)
    angle = vehicles.angle + vehicles.radar_bias + params.angle_std * rng.standard_normal(k)
    dist = vehicles.distance + params.distance_std * rng.standard_normal(k)
    return RadarObservation(angle_estimate=angle, distance_estimate=np.maximum(dist, params.min_distance))
