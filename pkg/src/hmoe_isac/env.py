"""The scheduling/beamforming MDP: state assembly, action application, reward,
constraint accounting and per-slot metrics."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import dynamics, physics
from .physics import ArrayConfig, ChannelRealization, MobilityParams, RadarParams, VehicleTruth
from .dynamics import EnergyBreakdown, ReliabilityParams
from .validation import check_phases, check_schedule, check_state

# Independent random streams per environment component. Actions never touch
# these, so two policies run on the same seed see identical exogenous noise.
_STREAMS = ("init", "mobility", "radar", "channel", "error")


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class EpisodeConfig:
    horizon: int = 200
    user_count: int = 4
    array: ArrayConfig = ArrayConfig()
    beta: float | tuple[float, ...] = 0.05
    bmp_threshold: float = 0.3
    aoi_cap: float = 20.0
    processing_delay: float = 1.0
    e_vis: float = 10.0
    e_recovery: float = 25.0
    penalty: float = 50.0
    p_max_dbm: float = 30.0
    noise_dbm: float = -114.0
    rho: float = 8.0
    path_count: int = 3
    nlos_power_db: float = -10.0
    slot_duration: float = 0.1
    radar_angle_std: float = 0.01
    radar_distance_std: float = 0.5
    bias_std: float = 0.004
    angle_noise_std: float = 0.002
    distance_noise_std: float = 0.05
    angle_limit: float = np.pi / 3
    min_distance: float = 10.0
    max_distance: float = 150.0
    max_angular_speed: float = 0.05
    max_radial_speed: float = 10.0
    # operating SNR; noise power, radar noise and beta are defined at the reference
    snr_db: float = 10.0
    snr_reference_db: float = 10.0
    beta_snr_exponent: float = 0.5

    def __post_init__(self):
        if self.horizon < 1:
            raise ConfigurationError("horizon must be >= 1")
        if self.user_count < 1:
            raise ConfigurationError("user_count must be >= 1")
        betas = np.atleast_1d(np.asarray(self.beta, dtype=np.float64))
        if betas.size not in (1, self.user_count):
            raise ConfigurationError("beta must be a scalar or one value per user")
        if np.any(betas <= 0):
            raise ConfigurationError("beta must be positive")
        for name in ("e_vis", "e_recovery", "penalty", "rho", "radar_angle_std",
                     "radar_distance_std", "bias_std", "angle_noise_std", "distance_noise_std"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative")
        if self.path_count < 1:
            raise ConfigurationError("path_count must be >= 1")
        if not 0 < self.angle_limit < np.pi / 2:
            raise ConfigurationError("angle_limit must lie in (0, pi/2)")
        if not 0 < self.min_distance < self.max_distance:
            raise ConfigurationError("need 0 < min_distance < max_distance")
        try:
            self.reliability
        except ValueError as exc:
            raise ConfigurationError(str(exc)) from exc

    @property
    def radar_scale(self) -> float:
        """Radar noise multiplier at the operating SNR (1 at the reference)."""
        return 10 ** (-(self.snr_db - self.snr_reference_db) / 20)

    @property
    def betas(self) -> np.ndarray:
        b = np.broadcast_to(np.asarray(self.beta, dtype=np.float64), (self.user_count,))
        return b * self.radar_scale**self.beta_snr_exponent

    @property
    def reliability(self) -> ReliabilityParams:
        return ReliabilityParams(tuple(self.betas), self.bmp_threshold, self.aoi_cap, self.processing_delay)

    @property
    def noise_power(self) -> float:
        return float(physics.dbm_to_watts(self.noise_dbm - (self.snr_db - self.snr_reference_db)))

    @property
    def p_max(self) -> float:
        return float(physics.dbm_to_watts(self.p_max_dbm))

    @property
    def power_scale(self) -> float:
        # unit-norm beams, so sum_k ||v_k||^2 * scale^2 == P_max
        return float(np.sqrt(self.p_max / self.user_count))

    @property
    def mobility(self) -> MobilityParams:
        return MobilityParams(self.angle_noise_std, self.distance_noise_std,
                              self.bias_std * self.radar_scale, self.angle_limit,
                              self.min_distance, self.max_distance)

    @property
    def radar(self) -> RadarParams:
        return RadarParams(self.radar_angle_std * self.radar_scale, self.radar_distance_std)


@dataclass
class JointAction:
    schedule: np.ndarray
    phases: np.ndarray


@dataclass
class ConstraintReport:
    modulus_deviation: float
    power_residual: float
    aoi_violations: np.ndarray
    bmp_violation: bool
    binary: bool

    @property
    def hardware_ok(self) -> bool:
        """Modulus, power and binariness hold. AoI/BMP breaches are policy
        outcomes and are counted, not treated as accounting failures."""
        return self.modulus_deviation < 1e-9 and abs(self.power_residual) < 1e-9 and self.binary


@dataclass
class StepOutcome:
    reward: float
    state: np.ndarray
    next_state: np.ndarray
    schedule: np.ndarray
    ages: np.ndarray
    channel: ChannelRealization
    beams: np.ndarray
    energy: EnergyBreakdown
    misalignment: np.ndarray
    avg_bmp: float
    constraints: ConstraintReport
    sensing_error: float
    sinr: np.ndarray = field(repr=False)

    @property
    def true_channel(self) -> np.ndarray:
        return self.channel.true_channel


def phases_to_beams(phases) -> np.ndarray:
    """Constant-modulus map v = exp(j phi) / sqrt(M)."""
    phi = np.asarray(phases, dtype=np.float64)
    return np.exp(1j * phi) / np.sqrt(phi.shape[-1])


def reward_from(energy: EnergyBreakdown, avg_bmp: float, penalty: float, threshold: float) -> float:
    return -energy.total - penalty * max(0.0, avg_bmp - threshold)


def sensing_error(state, vehicles: VehicleTruth) -> tuple[np.ndarray, float]:
    """Per-user and mean absolute angle error of the state's radar estimates."""
    err = np.abs(np.asarray(state)[:, 0] - vehicles.angle)
    return err, float(err.mean())


def check_constraints(outcome: StepOutcome, config: EpisodeConfig) -> ConstraintReport:
    m = outcome.beams.shape[1]
    modulus = float(np.max(np.abs(np.abs(outcome.beams) - 1 / np.sqrt(m))))
    power = float(np.sum(np.abs(outcome.beams) ** 2) * config.power_scale**2)
    return ConstraintReport(
        modulus_deviation=modulus,
        power_residual=power - config.p_max,
        aoi_violations=outcome.ages > config.aoi_cap,
        bmp_violation=outcome.avg_bmp > config.bmp_threshold,
        binary=bool(np.all((outcome.schedule == 0) | (outcome.schedule == 1))),
    )


class IsacEnv:
    """Single-episode V2I environment. ``reset`` then ``step`` per slot.

    The MDP state is a K x 3 array ``[angle_estimate, distance_estimate, age]``.
    """

    def __init__(self, config: EpisodeConfig = EpisodeConfig()):
        self.config = config
        # derived constants, computed once per environment
        self._betas = config.betas
        self._noise_power = config.noise_power
        self._power_scale = config.power_scale
        self._mobility = config.mobility
        self._radar = config.radar
        self.vehicles: VehicleTruth | None = None
        self.ages: np.ndarray | None = None
        self.state: np.ndarray | None = None
        self.slot = 0

    def reset(self, seed) -> np.ndarray:
        cfg = self.config
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        seqs = ss.spawn(len(_STREAMS))
        self._rngs = {name: np.random.default_rng(s) for name, s in zip(_STREAMS, seqs)}
        rng = self._rngs["init"]
        k = cfg.user_count
        self.vehicles = VehicleTruth(
            angle=rng.uniform(-cfg.angle_limit, cfg.angle_limit, k),
            distance=rng.uniform(cfg.min_distance + 10, 0.7 * cfg.max_distance, k),
            radial_velocity=rng.uniform(-cfg.max_radial_speed, cfg.max_radial_speed, k),
            angular_velocity=rng.uniform(-cfg.max_angular_speed, cfg.max_angular_speed, k),
            radar_bias=np.zeros(k),
        )
        self.ages = np.full(k, float(cfg.processing_delay))
        self.slot = 0
        self.state = self._observe()
        return self.state.copy()

    def _observe(self) -> np.ndarray:
        obs = physics.radar_observe(self.vehicles, self._rngs["radar"], self._radar)
        return np.column_stack([obs.angle_estimate, obs.distance_estimate, self.ages])

    def misalignment(self, ages=None) -> np.ndarray:
        ages = self.ages if ages is None else ages
        return dynamics.misalignment_prob(ages, self._betas)

    def step(self, action: JointAction) -> StepOutcome:
        if self.state is None:
            raise RuntimeError("call reset() before step()")
        cfg = self.config
        k, m = cfg.user_count, cfg.array.element_count
        pi = check_schedule(action.schedule, k)
        phi = check_phases(action.phases, k, m)

        beams = phases_to_beams(phi)
        p_misa = self.misalignment()
        energy = dynamics.total_energy(dynamics.comp_energy(pi, cfg.e_vis),
                                       dynamics.sweep_energy(p_misa, cfg.e_recovery))
        bmp = dynamics.average_bmp(p_misa)
        reward = reward_from(energy, bmp, cfg.penalty, cfg.bmp_threshold)

        h = physics.channel_matrix(self.vehicles, cfg.array, cfg.path_count,
                                   self._rngs["channel"], cfg.nlos_power_db)
        channel = physics.apply_channel_error(h, p_misa, cfg.rho, self._rngs["error"])
        link_sinr = physics.sinr_all(h, beams, self._noise_power, self._power_scale)
        _, mae = sensing_error(self.state, self.vehicles)

        state, ages = self.state, self.ages
        self.vehicles = physics.advance_vehicles(self.vehicles, cfg.slot_duration,
                                                 self._rngs["mobility"], self._mobility)
        # completed calibrations zero the accumulated radar bias
        self.vehicles.radar_bias = np.where(pi == 1, 0.0, self.vehicles.radar_bias)
        self.ages = dynamics.update_aoi(ages, pi, cfg.processing_delay)
        self.state = self._observe()
        self.slot += 1

        outcome = StepOutcome(
            reward=reward, state=state, next_state=self.state.copy(), schedule=pi, ages=ages,
            channel=channel, beams=beams, energy=energy, misalignment=p_misa, avg_bmp=bmp,
            constraints=None, sensing_error=mae, sinr=link_sinr,
        )
        outcome.constraints = check_constraints(outcome, cfg)
        return outcome

    @property
    def done(self) -> bool:
        return self.slot >= self.config.horizon


TRACE_PREFIX = ["episode", "slot"]
TRACE_SUFFIX = ["avg_bmp", "e_comp", "e_sweep", "reward", "mae_deg"]


def trace_columns(n_users: int) -> list[str]:
    """Fixed CSV column order: episode, slot, ages, schedule, avg_bmp, E_comp, E_sweep,
    reward, MAE (degrees)."""
    return (TRACE_PREFIX + [f"age_{k}" for k in range(n_users)]
            + [f"pi_{k}" for k in range(n_users)] + TRACE_SUFFIX)


def trace_row(slot: int, outcome: StepOutcome, episode: int = 0) -> list:
    return ([episode, slot] + [float(a) for a in outcome.ages] + [int(p) for p in outcome.schedule]
            + [outcome.avg_bmp, outcome.energy.computational, outcome.energy.sweep,
               outcome.reward, float(np.degrees(outcome.sensing_error))])


def write_trace(path, rows: list[list], n_users: int) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(trace_columns(n_users))
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def read_trace(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], np.array(rows[1:], dtype=np.float64)
    if body.size == 0:
        body = body.reshape(0, len(header))
    return {name: body[:, i] for i, name in enumerate(header)}


__all__ = [
    "ConfigurationError", "EpisodeConfig", "IsacEnv", "JointAction", "StepOutcome", "ConstraintReport",
    "phases_to_beams", "reward_from", "sensing_error", "check_constraints", "check_state",
    "trace_columns", "trace_row", "write_trace", "read_trace",
]
