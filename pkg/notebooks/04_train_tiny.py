"""
Training the tiny profile on synthetic speech
=============================================

The tiny profile (10 steps, 10 layers, 16 channels) trains on one CPU core.
This script writes a small synthetic corpus, pretrains on clean mel features,
resets the conditioner encoder for the 513-bin noisy spectrum, and fine-tunes.

Usage: python 04_train_tiny.py [workdir] [iterations per phase]
"""
import sys
from pathlib import Path

import numpy as np

from diffuse_se.audio import CorpusSpec, synth_corpus
from diffuse_se.profiles import TINY
from diffuse_se.trainer import TrainConfig, pretrain_then_finetune

work = Path(sys.argv[1] if len(sys.argv) > 1 else "tiny-run")
iters = int(sys.argv[2]) if len(sys.argv) > 2 else 2000

manifest = synth_corpus(CorpusSpec(n_train=40, n_valid=4, n_test=8, duration=1.0),
                        work / "data", np.random.default_rng(0))
print(len(manifest), "utterances in", work / "data")

cfg = TrainConfig(learning_rate=TINY.learning_rate, batch_size=TINY.batch_size,
                  max_iters=iters, early_stop_patience=5, crop_frames=TINY.crop_frames,
                  valid_every=max(1, iters // 4), seed=0)
result = pretrain_then_finetune(manifest, cfg, cfg, TINY.schedule(), TINY.predictor,
                                work / "model", progress=print)
print("best fine-tuned checkpoint:", result.path, "at iteration", result.best_iter)
