"""Per-slot laws: semantic AoI evolution, beam misalignment probability and the
computational / beam-sweep energy model."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .validation import check_schedule


@dataclass(frozen=True)
class ReliabilityParams:
    uncertainty_rates: tuple[float, ...] = (0.05, 0.05, 0.05, 0.05)
    bmp_threshold: float = 0.3
    aoi_cap: float = 20.0
    processing_delay: float = 1.0

    def __post_init__(self):
        rates = np.asarray(self.uncertainty_rates, dtype=np.float64)
        if rates.ndim != 1 or np.any(rates <= 0):
            raise ValueError("uncertainty rates must be positive")
        if not 0 < self.bmp_threshold < 1:
            raise ValueError("bmp_threshold must lie in (0, 1)")
        if not self.aoi_cap > self.processing_delay:
            raise ValueError("aoi_cap must exceed processing_delay")

    @property
    def betas(self) -> np.ndarray:
        return np.asarray(self.uncertainty_rates, dtype=np.float64)


@dataclass(frozen=True)
class EnergyBreakdown:
    computational: float
    sweep: float

    def __post_init__(self):
        if self.computational < 0 or self.sweep < 0:
            raise ValueError("energies must be non-negative")

    @property
    def total(self) -> float:
        return self.computational + self.sweep


def update_aoi(ages, schedule, processing_delay: float = 1.0) -> np.ndarray:
    """Scheduled users restart at the processing delay, the rest age by one slot."""
    ages = np.asarray(ages, dtype=np.float64)
    pi = check_schedule(schedule, len(ages))
    return np.where(pi == 1, float(processing_delay), ages + 1.0)


def misalignment_prob(age, beta):
    """``1 - exp(-beta * age)``, vectorised."""
    age = np.asarray(age, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if np.any(age < 0):
        raise ValueError("age must be non-negative")
    if np.any(beta <= 0):
        raise ValueError("beta must be positive")
    p = -np.expm1(-beta * age)
    return float(p) if p.ndim == 0 else p


def comp_energy(schedule, per_frame_energy: float) -> float:
    if per_frame_energy < 0:
        raise ValueError("per-frame energy must be non-negative")
    pi = check_schedule(schedule)
    return float(per_frame_energy * pi.sum())


def sweep_energy(misalignment_probs, recovery_energy: float) -> float:
    p = np.asarray(misalignment_probs, dtype=np.float64)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("probabilities must lie in [0, 1]")
    return float(recovery_energy * p.sum())


def total_energy(comp: float, sweep: float) -> EnergyBreakdown:
    return EnergyBreakdown(computational=float(comp), sweep=float(sweep))


def average_bmp(misalignment_probs) -> float:
    return float(np.mean(misalignment_probs))
