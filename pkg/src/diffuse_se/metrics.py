"""Objective quality proxies: SI-SDR and segmental SNR."""
from __future__ import annotations

from dataclasses import dataclass, field
import math
from pathlib import Path
import shutil

import numpy as np

from .audio import AudioBuffer, Manifest, read_wav, write_wav

SI_SDR_CAP = 100.0
SEG_SNR_MIN = -10.0
SEG_SNR_MAX = 35.0


def _arr(x):
    return x.samples if isinstance(x, AudioBuffer) else np.asarray(x, dtype=np.float64)


def si_sdr(reference, estimate) -> float:
    """Scale-invariant SDR in dB, capped at 100 dB for a perfect estimate."""
    s, e = _arr(reference), _arr(estimate)
    if s.shape != e.shape:
        raise ValueError(f"length mismatch: {s.size} vs {e.size}")
    ss = float(np.dot(s, s))
    if ss == 0.0:
        raise ValueError("reference is silent")
    target = (np.dot(e, s) / ss) * s
    resid = e - target
    num, den = float(np.dot(target, target)), float(np.dot(resid, resid))
    if den <= num * 10 ** (-SI_SDR_CAP / 10):
        return SI_SDR_CAP
    if num == 0.0:
        return -SI_SDR_CAP
    return 10.0 * math.log10(num / den)


def segmental_snr(reference, estimate, frame: int = 1024, hop: int = 512,
                  silence_db: float = -60.0) -> float:
    """Mean per-frame SNR, each clamped to [-10, 35] dB.

    Frames whose reference energy is more than ``silence_db`` below the
    loudest frame are skipped.
    """
    s, e = _arr(reference), _arr(estimate)
    if s.shape != e.shape:
        raise ValueError(f"length mismatch: {s.size} vs {e.size}")
    if s.size < frame:
        frame = hop = s.size
    starts = range(0, s.size - frame + 1, hop)
    sig = np.array([np.dot(s[i:i + frame], s[i:i + frame]) for i in starts])
    err = np.array([np.sum((s[i:i + frame] - e[i:i + frame]) ** 2) for i in starts])
    if sig.max() <= 0:
        raise ValueError("all reference frames are silent")
    voiced = sig > sig.max() * 10 ** (silence_db / 10)
    with np.errstate(divide="ignore"):
        seg = 10 * np.log10(sig[voiced] / np.maximum(err[voiced], 1e-300))
    return float(np.mean(np.clip(seg, SEG_SNR_MIN, SEG_SNR_MAX)))


@dataclass
class ScoreReport:
    ids: list = field(default_factory=list)
    si_sdr_db: list = field(default_factory=list)
    seg_snr_db: list = field(default_factory=list)

    def add(self, uid, ref, est):
        self.ids.append(uid)
        self.si_sdr_db.append(si_sdr(ref, est))
        self.seg_snr_db.append(segmental_snr(ref, est))

    def summary(self) -> dict:
        out = {}
        for name in ("si_sdr_db", "seg_snr_db"):
            v = np.asarray(getattr(self, name))
            out[name] = {"mean": float(v.mean()), "median": float(np.median(v))}
        return out

    def to_text(self) -> str:
        lines = ["id\tsi_sdr_db\tseg_snr_db"]
        for uid, a, b in zip(self.ids, self.si_sdr_db, self.seg_snr_db):
            lines.append(f"{uid}\t{a:.6f}\t{b:.6f}")
        lines.append("")
        lines.append(f"# n\t{len(self.ids)}")
        for name, agg in self.summary().items():
            lines.append(f"# {name}\tmean\t{agg['mean']:.6f}\tmedian\t{agg['median']:.6f}")
        return "\n".join(lines) + "\n"


class MissingEnhanced(FileNotFoundError):
    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__("missing enhanced files:\n  " + "\n  ".join(map(str, self.missing)))


def enhanced_name(clean_path: str) -> str:
    return Path(clean_path).name


def evaluate(manifest: Manifest, enhanced_dir, split: str = "test",
             export_dir=None) -> ScoreReport:
    """Score every ``split`` row's enhanced file (matched by clean filename).

    With ``export_dir`` the paired clean/enhanced WAVs are copied to
    ``export_dir/clean`` and ``export_dir/enhanced`` for external scoring tools.
    """
    rows = manifest.split(split)
    enhanced_dir = Path(enhanced_dir)
    missing = [enhanced_dir / enhanced_name(r.clean_path) for r in rows
               if not (enhanced_dir / enhanced_name(r.clean_path)).exists()]
    if missing:
        raise MissingEnhanced(missing)
    rep = ScoreReport()
    for r in rows:
        ref = read_wav(manifest.resolve(r.clean_path))
        est = read_wav(enhanced_dir / enhanced_name(r.clean_path))
        rep.add(Path(r.clean_path).stem, ref, est)
        if export_dir is not None:
            for sub, src in (("clean", manifest.resolve(r.clean_path)),
                             ("enhanced", enhanced_dir / enhanced_name(r.clean_path))):
                d = Path(export_dir) / sub
                d.mkdir(parents=True, exist_ok=True)
                shutil.copyfile(src, d / enhanced_name(r.clean_path))
    return rep


def write_noisy_copies(manifest: Manifest, outdir, split: str = "test") -> None:
    """The pass-through 'enhancement': noisy input written as the output."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    for r in manifest.split(split):
        _, noisy = manifest.load_pair(r)
        write_wav(outdir / enhanced_name(r.clean_path), noisy)
