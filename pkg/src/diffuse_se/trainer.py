"""Training: noise-prediction objective, Adam updates, early stopping and the
two-phase pretrain (clean mel) / fine-tune (noisy spectrum) protocol."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
import logging
import math
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint as ckpt
from .audio import Manifest, mel_spectrogram, stft_log_magnitude
from .diffusion import q_sample
from .predictor import (PredictorConfig, PredictorParams, init_params, loss_and_grad,
                        reset_conditioner_encoder)
from .schedule import NoiseSchedule

log = logging.getLogger(__name__)

PHASE_COND = {"pretrain": ("mel", "clean"), "finetune": ("linear", "noisy")}
COND_DIM = {"mel": 80, "linear": 513}
VALID_SEED = 20211


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 2e-4
    batch_size: int = 16
    max_iters: int = 1000
    early_stop_patience: int = 10
    phase: str = "finetune"
    seed: int = 0
    crop_frames: int = 62
    valid_every: int = 500
    valid_items: int = 4

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1 or self.early_stop_patience < 1 or self.valid_every < 1:
            raise ValueError("batch_size, early_stop_patience and valid_every must be >= 1")
        if self.phase not in PHASE_COND:
            raise ValueError(f"phase must be one of {sorted(PHASE_COND)}")


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: PredictorParams) -> AdamState:
    return AdamState({k: np.zeros_like(v) for k, v in params.tensors.items()},
                     {k: np.zeros_like(v) for k, v in params.tensors.items()})


def adam_update(params: PredictorParams, grads: dict, st: AdamState, lr: float):
    step = st.step + 1
    c1 = 1.0 - st.beta1 ** step
    c2 = 1.0 - st.beta2 ** step
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.tensors.items():
        g = grads[k]
        m = st.beta1 * st.m[k] + (1 - st.beta1) * g
        v = st.beta2 * st.v[k] + (1 - st.beta2) * g * g
        upd = (lr / c1) * m / (np.sqrt(v / c2) + st.eps)
        new_p[k] = (p - upd).astype(p.dtype, copy=False)
        new_m[k], new_v[k] = m.astype(p.dtype, copy=False), v.astype(p.dtype, copy=False)
    return (PredictorParams(params.config, new_p),
            AdamState(new_m, new_v, step, st.beta1, st.beta2, st.eps))


# --------------------------------------------------------------------- data

@dataclass
class Batch:
    x0: np.ndarray        # (B, L)
    x_t: np.ndarray       # (B, L)
    t: np.ndarray         # (B,) integer steps
    epsilon: np.ndarray   # (B, L)
    cond: np.ndarray      # (B, F, D)
    cond_kind: str
    cond_source: str      # "clean" or "noisy"


class SpeechPairs:
    """In-memory utterances of one split with conditioners for a training phase."""

    def __init__(self, manifest: Manifest, split: str, phase: str, hop: int = 256):
        kind, source = PHASE_COND[phase]
        self.kind, self.source, self.hop = kind, source, hop
        self.clean, self.cond = [], []
        rows = manifest.split(split)
        if not rows:
            raise ValueError(f"manifest has no {split!r} rows")
        feat = mel_spectrogram if kind == "mel" else stft_log_magnitude
        for r in rows:
            clean, noisy = manifest.load_pair(r)
            src = clean if source == "clean" else noisy
            if source == "noisy" and r.noise_path is None:
                raise ValueError(f"{r.clean_path}: fine-tuning needs a noisy pair")
            self.clean.append(clean.samples.astype(np.float32))
            self.cond.append(feat(src).frames.astype(np.float32))

    def __len__(self):
        return len(self.clean)

    def sample(self, rng: np.random.Generator, n: int, crop_frames: int,
               schedule: NoiseSchedule) -> Batch:
        hop = self.hop
        x0 = np.empty((n, crop_frames * hop), dtype=np.float64)
        cond = np.empty((n, crop_frames, self.cond[0].shape[1]), dtype=np.float32)
        for b in range(n):
            i = int(rng.integers(len(self)))
            full = self.clean[i].size // hop
            if full < crop_frames:
                raise ValueError(f"utterance {i} is shorter than a {crop_frames}-frame crop")
            f = int(rng.integers(0, full - crop_frames + 1))
            x0[b] = self.clean[i][f * hop:(f + crop_frames) * hop]
            cond[b] = self.cond[i][f:f + crop_frames]
        t = rng.integers(1, schedule.T + 1, size=n)
        eps = rng.standard_normal(x0.shape)
        return Batch(x0, q_sample(x0, t, eps, schedule), t, eps, cond, self.kind, self.source)

    def validation_batches(self, schedule: NoiseSchedule, crop_frames: int, items: int,
                           batch_size: int) -> list[Batch]:
        """Fixed-seed corrupted crops, identical on every call."""
        rng = np.random.default_rng(VALID_SEED)
        total = items * len(self)
        out = []
        for start in range(0, total, batch_size):
            out.append(self.sample(rng, min(batch_size, total - start), crop_frames, schedule))
        return out


def batch_loss(params: PredictorParams, batch: Batch, need_grad=True):
    dt = params.dtype
    return loss_and_grad(params, batch.x_t.astype(dt), batch.t.astype(np.float64),
                         batch.epsilon.astype(dt), batch.cond.astype(dt), need_grad)


def validation_loss(params: PredictorParams, batches: list[Batch]) -> float:
    tot, n = 0.0, 0
    for b in batches:
        loss, _ = batch_loss(params, b, need_grad=False)
        tot += loss * b.x0.shape[0]
        n += b.x0.shape[0]
    return tot / n


# ----------------------------------------------------------------- training

def train_step(params: PredictorParams, opt_state: AdamState, batch: Batch,
               schedule: NoiseSchedule, config: TrainConfig):
    kind, source = PHASE_COND[config.phase]
    if (batch.cond_kind, batch.cond_source) != (kind, source):
        raise ValueError(f"{config.phase} needs {source} {kind} conditioners, batch has "
                         f"{batch.cond_source} {batch.cond_kind}")
    loss, grads = batch_loss(params, batch)
    if not math.isfinite(loss):
        raise TrainingDiverged(f"non-finite training loss {loss}")
    params, opt_state = adam_update(params, grads, opt_state, config.learning_rate)
    return params, opt_state, loss


@dataclass
class TrainResult:
    path: Path
    best_iter: int
    best_valid: float
    iters_run: int
    history: list = field(default_factory=list)  # (iter, train_loss, valid_loss)
    stopped: str = "max_iters"


def _rngs(seed: int):
    return np.random.default_rng([seed, 0]), np.random.default_rng([seed, 1])


def train_loop(manifest: Manifest, config: TrainConfig, schedule: NoiseSchedule,
               predictor_config: PredictorConfig, out_path, params: PredictorParams | None = None,
               progress: Callable[[str], None] | None = None,
               extra_metadata: dict | None = None) -> TrainResult:
    """Train with periodic validation; keep the best-validation checkpoint at ``out_path``.

    Stops after ``early_stop_patience`` validations without improvement, at
    ``max_iters``, or when the loss stops being finite.
    """
    out_path = Path(out_path)
    kind, _ = PHASE_COND[config.phase]
    data_rng, init_rng = _rngs(config.seed)
    if params is None:
        cfg = replace(predictor_config, conditioner_dim=COND_DIM[kind])
        params = init_params(cfg, init_rng)
    if params.config.conditioner_dim != COND_DIM[kind]:
        raise ValueError(f"{config.phase} uses {COND_DIM[kind]}-dim conditioners, "
                         f"network expects {params.config.conditioner_dim}")
    train = SpeechPairs(manifest, "train", config.phase, params.config.hop)
    valid = SpeechPairs(manifest, "valid", config.phase, params.config.hop)
    vb = valid.validation_batches(schedule, config.crop_frames, config.valid_items,
                                  config.batch_size)
    opt = adam_init(params)
    meta = {"phase": config.phase, "seed": config.seed, "learning_rate": config.learning_rate,
            "batch_size": config.batch_size, "crop_frames": config.crop_frames,
            **(extra_metadata or {})}

    def emit(line):
        log.info(line)
        if progress:
            progress(line)

    def save_best(it, vloss):
        ckpt.save(ckpt.Checkpoint(params, schedule, opt,
                                  {**meta, "iteration": it, "valid_loss": vloss}), out_path)

    best = validation_loss(params, vb)
    best_iter, bad, last_train = 0, 0, float("nan")
    save_best(0, best)
    res = TrainResult(out_path, 0, best, 0, [(0, float("nan"), best)])
    emit(f"iter=0\ttrain_loss=nan\tvalid_loss={best:.6f}")
    it = 0
    while it < config.max_iters:
        batch = train.sample(data_rng, config.batch_size, config.crop_frames, schedule)
        try:
            new_params, new_opt, last_train = train_step(params, opt, batch, schedule, config)
        except TrainingDiverged as e:
            emit(f"iter={it + 1}\tdiverged\t{e}")
            res.stopped = "diverged"
            break
        if not all(np.all(np.isfinite(v)) for v in new_params.tensors.values()):
            emit(f"iter={it + 1}\tdiverged\tnon-finite parameters")
            res.stopped = "diverged"
            break
        params, opt = new_params, new_opt
        it += 1
        res.iters_run = it
        if it % config.valid_every == 0 or it == config.max_iters:
            vloss = validation_loss(params, vb)
            res.history.append((it, last_train, vloss))
            emit(f"iter={it}\ttrain_loss={last_train:.6f}\tvalid_loss={vloss:.6f}")
            if vloss < best:
                best, best_iter, bad = vloss, it, 0
                save_best(it, vloss)
            else:
                bad += 1
                if bad >= config.early_stop_patience:
                    res.stopped = "early_stop"
                    break
    res.best_iter, res.best_valid = best_iter, best
    return res


def pretrain_then_finetune(manifest: Manifest, pre: TrainConfig, fine: TrainConfig,
                           schedule: NoiseSchedule, predictor_config: PredictorConfig,
                           outdir, progress=None) -> TrainResult:
    """Phase 1 on clean mel conditioners, then reset the conditioner encoder
    for the 513-bin noisy spectrum and fine-tune. ``pre.max_iters == 0`` skips
    phase 1, which is plain training from scratch."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    pre = replace(pre, phase="pretrain")
    fine = replace(fine, phase="finetune")
    if pre.max_iters == 0:
        return train_loop(manifest, fine, schedule, predictor_config, outdir / "finetune.ckpt",
                          progress=progress)
    r1 = train_loop(manifest, pre, schedule, predictor_config, outdir / "pretrain.ckpt",
                    progress=progress)
    phase1 = ckpt.load(r1.path).params
    _, init_rng = _rngs(fine.seed)
    params = reset_conditioner_encoder(phase1, COND_DIM["linear"], init_rng)
    return train_loop(manifest, fine, schedule, predictor_config, outdir / "finetune.ckpt",
                      params=params, progress=progress,
                      extra_metadata={"pretrained_from": str(r1.path),
                                      "pretrain_best_iter": r1.best_iter})
