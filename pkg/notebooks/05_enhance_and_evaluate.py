"""
Enhancing and scoring the test split
====================================

Loads the checkpoint written by 04_train_tiny.py, enhances every test
utterance with each sampler variant, and compares median SI-SDR and
segmental SNR against the unprocessed noisy input.

Usage: python 05_enhance_and_evaluate.py [workdir]
"""
import sys
from pathlib import Path

import numpy as np

from diffuse_se import checkpoint
from diffuse_se.audio import Manifest, stft_log_magnitude
from diffuse_se.metrics import ScoreReport
from diffuse_se.predictor import NetworkPredictor
from diffuse_se.sampler import SamplerSpec, enhance

work = Path(sys.argv[1] if len(sys.argv) > 1 else "tiny-run")
ck = checkpoint.load(work / "model" / "finetune.ckpt")
predictor = NetworkPredictor(ck.params)
manifest = Manifest.load(work / "data" / "manifest.tsv")

reports = {name: ScoreReport() for name in ("noisy", "rp", "rp-ninout", "srp")}
for row in manifest.split("test"):
    clean, noisy = manifest.load_pair(row)
    cond = stft_log_magnitude(noisy)
    reports["noisy"].add(row.clean_path, clean, noisy)
    for variant in ("rp", "rp-ninout", "srp"):
        out = enhance(predictor, noisy.samples, cond, SamplerSpec(variant), ck.schedule,
                      np.random.default_rng(0))
        reports[variant].add(row.clean_path, clean, out)

for name, rep in reports.items():
    s = rep.summary()
    print(f"{name:10s} median SI-SDR {s['si_sdr_db']['median']:6.2f} dB   "
          f"median segSNR {s['seg_snr_db']['median']:6.2f} dB")

# %%
# The command-line route writes WAVs and a tab-separated report instead:
#
#     diffuse-se enhance --checkpoint tiny-run/model/finetune.ckpt \
#         --manifest tiny-run/data/manifest.tsv --outdir enhanced --variant srp
#     diffuse-se evaluate --manifest tiny-run/data/manifest.tsv --enhanced enhanced
