"""Named model/schedule/training profiles.

``base`` and ``large`` carry the published settings; ``tiny`` is a desk-scale
profile that trains on one CPU core in well under an hour.
"""
from __future__ import annotations

from dataclasses import dataclass

from .predictor import PredictorConfig
from .schedule import BASE_FAST_BETAS, LARGE_FAST_BETAS, NoiseSchedule, linear_schedule


@dataclass(frozen=True)
class Profile:
    name: str
    T: int
    beta_min: float
    beta_max: float
    fast_betas: tuple
    predictor: PredictorConfig  # conditioner_dim here is the fine-tuning (linear) one
    learning_rate: float
    batch_size: int
    crop_frames: int

    def schedule(self) -> NoiseSchedule:
        return linear_schedule(self.T, self.beta_min, self.beta_max)


TINY = Profile(
    "tiny", T=10, beta_min=1e-4, beta_max=0.2, fast_betas=BASE_FAST_BETAS,
    predictor=PredictorConfig(n_layers=10, n_blocks=2, residual_channels=16,
                              conditioner_dim=513, cond_channels=16,
                              step_embedding_dim=32, step_hidden=64),
    learning_rate=1e-3, batch_size=4, crop_frames=4,
)

BASE = Profile(
    "base", T=50, beta_min=1e-4, beta_max=0.05, fast_betas=BASE_FAST_BETAS,
    predictor=PredictorConfig(n_layers=30, n_blocks=3, residual_channels=63,
                              conditioner_dim=513, cond_channels=80),
    learning_rate=2e-4, batch_size=16, crop_frames=62,
)

LARGE = Profile(
    "large", T=200, beta_min=1e-4, beta_max=0.02, fast_betas=LARGE_FAST_BETAS,
    predictor=PredictorConfig(n_layers=30, n_blocks=3, residual_channels=128,
                              conditioner_dim=513, cond_channels=80),
    learning_rate=2e-4, batch_size=15, crop_frames=62,
)

PROFILES = {p.name: p for p in (TINY, BASE, LARGE)}
