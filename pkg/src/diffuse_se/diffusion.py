"""Forward (noising) process."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from .schedule import NoiseSchedule


@dataclass
class DiffusionState:
    x: np.ndarray
    t: int


@dataclass
class TrainingPair:
    x_t: np.ndarray
    t: int
    epsilon: np.ndarray
    conditioner_key: Any = None


def q_step(state: DiffusionState, schedule: NoiseSchedule, rng: np.random.Generator) -> DiffusionState:
    """One Markov step: x_{t+1} = sqrt(1 - beta) x_t + sqrt(beta) z."""
    if state.t >= schedule.T:
        raise ValueError(f"state already at the final step T={schedule.T}")
    if state.t < 0:
        raise ValueError("negative step index")
    b = schedule.beta(state.t + 1)
    x = np.asarray(state.x, dtype=np.float64)
    z = rng.standard_normal(x.shape)
    return DiffusionState(np.sqrt(1.0 - b) * x + np.sqrt(b) * z, state.t + 1)


def q_sample(x0, t: int, epsilon, schedule: NoiseSchedule) -> np.ndarray:
    """Closed-form corruption of ``x0`` to step ``t`` (t=0 returns ``x0``).

    Works on batches too: ``t`` may be an integer array with one entry per row.
    """
    x0 = np.asarray(x0)
    epsilon = np.asarray(epsilon)
    if x0.shape != epsilon.shape:
        raise ValueError(f"shape mismatch: x0 {x0.shape} vs epsilon {epsilon.shape}")
    abar = alpha_bar_of(schedule, t)
    if np.ndim(abar):
        abar = abar.reshape(abar.shape + (1,) * (x0.ndim - abar.ndim))
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * epsilon


def alpha_bar_of(schedule: NoiseSchedule, t):
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t > schedule.T):
        raise ValueError(f"step index outside 0..{schedule.T}")
    table = np.concatenate([[1.0], schedule.alpha_bars])
    out = table[t]
    return float(out) if out.ndim == 0 else out


def make_training_pair(x0, schedule: NoiseSchedule, rng: np.random.Generator,
                       conditioner_key=None) -> TrainingPair:
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.size == 0:
        raise ValueError("x0 is empty")
    t = int(rng.integers(1, schedule.T + 1))
    eps = rng.standard_normal(x0.shape)
    return TrainingPair(q_sample(x0, t, eps, schedule), t, eps, conditioner_key)
