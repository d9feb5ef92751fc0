"""Input validation helpers shared by the environment and the estimators."""
from __future__ import annotations

import numpy as np


def check_schedule(schedule, n_users: int | None = None) -> np.ndarray:
    """Return ``schedule`` as an int array after checking it is binary."""
    pi = np.asarray(schedule)
    if pi.ndim != 1:
        raise ValueError(f"schedule must be 1-D, got shape {pi.shape}")
    if n_users is not None and pi.shape[0] != n_users:
        raise ValueError(f"schedule has {pi.shape[0]} entries, expected {n_users}")
    if not np.all((pi == 0) | (pi == 1)):
        raise ValueError("schedule entries must be 0 or 1")
    return pi.astype(np.int64)


def wrap_phase(phases) -> np.ndarray:
    """Map angles to the principal interval [-pi, pi)."""
    return (np.asarray(phases, dtype=np.float64) + np.pi) % (2 * np.pi) - np.pi


def check_phases(phases, n_users: int, n_elements: int) -> np.ndarray:
    phi = np.asarray(phases, dtype=np.float64)
    if phi.shape != (n_users, n_elements):
        raise ValueError(f"phase matrix must be {n_users}x{n_elements}, got {phi.shape}")
    if not np.all(np.isfinite(phi)):
        raise ValueError("phase matrix contains non-finite entries")
    return phi


def check_state(state, n_users: int | None = None) -> np.ndarray:
    s = np.asarray(state, dtype=np.float64)
    if s.ndim != 2 or s.shape[1] != 3:
        raise ValueError(f"state must be K x 3, got shape {s.shape}")
    if n_users is not None and s.shape[0] != n_users:
        raise ValueError(f"state has {s.shape[0]} users, expected {n_users}")
    if not np.all(np.isfinite(s)):
        raise ValueError("state contains non-finite entries")
    return s


def check_window(window) -> np.ndarray:
    """A window of states, shape (T, K, 3) with T >= 1."""
    w = np.asarray(window, dtype=np.float64)
    if w.ndim == 2:
        w = w[None]
    if w.ndim != 3 or w.shape[0] == 0 or w.shape[2] != 3:
        raise ValueError(f"state window must be non-empty with shape (T, K, 3), got {w.shape}")
    return w


def check_finite(name: str, *arrays) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise FloatingPointError(f"non-finite values in {name}")
