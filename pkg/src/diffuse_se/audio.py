"""Waveform I/O, spectral conditioners, SNR mixing and the synthetic corpus."""
from __future__ import annotations

from dataclasses import dataclass
import math
import os
from pathlib import Path
from typing import NamedTuple
import wave

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SAMPLE_RATE = 16000
N_FFT = 1024
HOP = 256
N_MELS = 80
LOG_FLOOR = 1e-5


class AudioFormatError(ValueError):
    pass


@dataclass
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise AudioFormatError("audio must be a non-empty mono vector")
        if not np.all(np.isfinite(self.samples)):
            raise AudioFormatError("audio contains non-finite samples")
        if self.sample_rate <= 0:
            raise AudioFormatError("sample rate must be positive")

    def __len__(self):
        return self.samples.size


@dataclass
class Conditioner:
    kind: str  # "mel" or "linear"
    frames: np.ndarray  # (n_frames, dim)
    window: int = N_FFT
    hop: int = HOP

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


# --------------------------------------------------------------------- wav

def read_wav(path, expected_rate: int | None = SAMPLE_RATE) -> AudioBuffer:
    try:
        with wave.open(os.fspath(path), "rb") as w:
            channels, width, rate = w.getnchannels(), w.getsampwidth(), w.getframerate()
            n = w.getnframes()
            raw = w.readframes(n)
    except (wave.Error, EOFError) as e:
        raise AudioFormatError(f"{path}: malformed or unsupported WAV ({e})") from e
    if channels != 1:
        raise AudioFormatError(f"{path}: expected mono, got {channels} channels")
    if width != 2:
        raise AudioFormatError(f"{path}: expected 16-bit PCM, got {8 * width}-bit")
    if expected_rate is not None and rate != expected_rate:
        raise AudioFormatError(f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz")
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return AudioBuffer(data, rate)


def to_pcm16(samples) -> np.ndarray:
    q = np.round(np.asarray(samples, dtype=np.float64) * 32768.0)
    return np.clip(q, -32768, 32767).astype("<i2")


def write_wav(path, audio: AudioBuffer) -> None:
    pcm = to_pcm16(audio.samples)
    with wave.open(os.fspath(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(int(audio.sample_rate))
        w.writeframes(pcm.tobytes())


# ---------------------------------------------------------------- features

def n_frames_for(length: int, hop: int = HOP) -> int:
    return -(-length // hop)


def hann(n: int = N_FFT) -> np.ndarray:
    # periodic Hann
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def frame_signal(x, window: int = N_FFT, hop: int = HOP) -> np.ndarray:
    """Reflect-padded frames; frame ``f`` is centred on sample ``f*hop + hop/2``.

    That gives exactly ceil(len/hop) frames, frame ``f`` lining up with the
    block of samples ``[f*hop, (f+1)*hop)``.
    """
    x = np.asarray(x, dtype=np.float64)
    L = x.size
    if L < window:
        raise AudioFormatError(f"signal of {L} samples is shorter than the {window}-sample window")
    F = n_frames_for(L, hop)
    left = window // 2 - hop // 2
    right = (F - 1) * hop + hop // 2 + window // 2 - L
    padded = np.pad(x, (left, right), mode="reflect")
    return sliding_window_view(padded, window)[::hop][:F]


def stft_magnitude(x, window: int = N_FFT, hop: int = HOP) -> np.ndarray:
    frames = frame_signal(x, window, hop) * hann(window)
    return np.abs(np.fft.rfft(frames, axis=-1))


def stft_log_magnitude(x: AudioBuffer) -> Conditioner:
    """513-bin log-magnitude spectrum, ``log(1e-5 + |STFT|)``."""
    mag = stft_magnitude(_samples(x))
    return Conditioner("linear", np.log(LOG_FLOOR + mag))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT, sr: int = SAMPLE_RATE,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """HTK-scale triangular filters, shape (n_mels, n_fft//2 + 1), unit peak."""
    fmax = sr / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sr / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs - lo) / (mid - lo)
    down = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


_MEL = None


def mel_spectrogram(x: AudioBuffer) -> Conditioner:
    global _MEL
    if _MEL is None:
        _MEL = mel_filterbank()
    power = stft_magnitude(_samples(x)) ** 2
    return Conditioner("mel", np.log(LOG_FLOOR + power @ _MEL.T))


def conditioner_for(kind: str, x) -> Conditioner:
    if kind == "mel":
        return mel_spectrogram(x)
    if kind == "linear":
        return stft_log_magnitude(x)
    raise ValueError(f"unknown conditioner kind {kind!r}")


def _samples(x):
    return x.samples if isinstance(x, AudioBuffer) else np.asarray(x, dtype=np.float64)


# ------------------------------------------------------------------ mixing

class Mixture(NamedTuple):
    noisy: AudioBuffer
    noise: AudioBuffer
    clean: AudioBuffer
    gain: float  # joint peak-normalisation factor (1.0 when none was needed)


def snr_db(clean, noise) -> float:
    c, n = _samples(clean), _samples(noise)
    return 10.0 * math.log10(float(np.dot(c, c)) / float(np.dot(n, n)))


def fit_length(noise, length: int, rng: np.random.Generator) -> np.ndarray:
    """Random crop when longer; tile then crop when shorter."""
    noise = _samples(noise)
    if noise.size < length:
        reps = -(-length // noise.size) + 1
        noise = np.tile(noise, reps)
    start = int(rng.integers(0, noise.size - length + 1))
    return noise[start:start + length]


def mix_at_snr(clean: AudioBuffer, noise: AudioBuffer, snr: float,
               rng: np.random.Generator) -> Mixture:
    if clean.sample_rate != noise.sample_rate:
        raise AudioFormatError("clean and noise sample rates differ")
    if not math.isfinite(snr):
        raise ValueError("SNR must be finite")
    c = clean.samples
    ec = float(np.dot(c, c))
    if ec == 0.0:
        raise ValueError("clean signal is silent; SNR undefined")
    n = fit_length(noise, c.size, rng)
    en = float(np.dot(n, n))
    if en == 0.0:
        raise ValueError("noise signal is silent")
    n = n * math.sqrt(ec / (en * 10.0 ** (snr / 10.0)))
    y = c + n
    gain = 1.0
    peak = float(np.max(np.abs(y)))
    if peak > 1.0:
        gain = 0.99 / peak
        y, n, c = y * gain, n * gain, c * gain
    sr = clean.sample_rate
    return Mixture(AudioBuffer(y, sr), AudioBuffer(n, sr), AudioBuffer(c, sr), gain)


# --------------------------------------------------------------- manifests

@dataclass
class ManifestRecord:
    clean_path: str
    noise_path: str | None
    snr_db: float | None
    split: str


class Manifest(list):
    """Rows of (clean_path, noise_path, snr_db, split); relative paths resolve against ``root``."""

    def __init__(self, rows=(), root: str | os.PathLike = "."):
        super().__init__(rows)
        self.root = Path(root)

    def split(self, tag: str) -> "Manifest":
        return Manifest([r for r in self if r.split == tag], self.root)

    def resolve(self, p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else self.root / q

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for r in self:
                snr = "-" if r.snr_db is None else repr(float(r.snr_db))
                f.write(f"{r.clean_path}\t{r.noise_path or '-'}\t{snr}\t{r.split}\n")

    @classmethod
    def load(cls, path) -> "Manifest":
        rows = []
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                line = line.rstrip("\n")
                if not line.strip() or line.startswith("#"):
                    continue
                parts = line.split("\t")
                if len(parts) != 4:
                    raise ValueError(f"{path}:{lineno}: expected 4 tab-separated fields")
                clean, noise, snr, split = parts
                snr_v = None if snr in ("-", "") else float(snr)
                if snr_v is not None and not math.isfinite(snr_v):
                    raise ValueError(f"{path}:{lineno}: non-finite SNR")
                rows.append(ManifestRecord(clean, None if noise in ("-", "") else noise,
                                           snr_v, split))
        m = cls(rows, Path(path).parent)
        missing = [p for r in m for p in (r.clean_path, r.noise_path)
                   if p is not None and not m.resolve(p).exists()]
        if missing:
            raise FileNotFoundError("manifest references missing files: " + ", ".join(missing))
        return m

    def load_pair(self, r: ManifestRecord) -> tuple[AudioBuffer, AudioBuffer]:
        """(clean, noisy) for a row; noisy is clean + stored noise (clean when no noise)."""
        clean = read_wav(self.resolve(r.clean_path))
        if r.noise_path is None:
            return clean, clean
        noise = read_wav(self.resolve(r.noise_path))
        if len(noise) != len(clean):
            raise AudioFormatError(f"{r.noise_path}: length differs from its clean file")
        return clean, AudioBuffer(clean.samples + noise.samples, clean.sample_rate)


# -------------------------------------------------------- synthetic corpus

def synth_speech(duration: float, rng: np.random.Generator, sr: int = SAMPLE_RATE) -> np.ndarray:
    """Speech-like signal: voiced harmonic segments with gliding pitch and
    syllabic amplitude modulation, separated by short silences."""
    n = int(round(duration * sr))
    out = np.zeros(n)
    # leading silence shrinks for sub-second clips so they still hold speech
    pos = int(rng.uniform(0.05, 0.2) * sr * min(1.0, duration))
    base_f0 = rng.uniform(95, 230)
    while pos < n:
        seg = int(rng.uniform(0.15, 0.6) * sr)
        seg = min(seg, n - pos)
        if seg < int(0.05 * sr):
            break
        tt = np.arange(seg) / sr
        f0 = base_f0 * (1 + rng.uniform(-0.15, 0.15)) * (1 + 0.08 * np.sin(2 * np.pi * rng.uniform(2, 6) * tt + rng.uniform(0, 6.3)))
        f0 = f0 * np.linspace(1.0, rng.uniform(0.85, 1.15), seg)
        phase = 2 * np.pi * np.cumsum(f0) / sr
        # two formant-like resonances shape the harmonic amplitudes
        f1, f2 = rng.uniform(300, 900), rng.uniform(900, 2500)
        voiced = np.zeros(seg)
        for k in range(1, int(4000 / f0.max()) + 1):
            fk = k * f0.mean()
            amp = (np.exp(-((fk - f1) / 250.0) ** 2) + 0.6 * np.exp(-((fk - f2) / 400.0) ** 2) + 0.05) / k ** 0.5
            voiced += amp * np.sin(k * phase + rng.uniform(0, 2 * np.pi))
        env = np.sin(np.pi * np.arange(seg) / seg) ** 2
        env *= 1 + 0.3 * np.sin(2 * np.pi * rng.uniform(3, 5) * tt)
        voiced *= env
        out[pos:pos + seg] += voiced
        pos += seg + int(rng.uniform(0.03, 0.25) * sr)
    peak = np.max(np.abs(out))
    if peak > 0:
        out *= rng.uniform(0.3, 0.7) / peak
    return out


def synth_noise(kind: str, n: int, rng: np.random.Generator, sr: int = SAMPLE_RATE) -> np.ndarray:
    if kind == "white":
        x = rng.standard_normal(n)
    elif kind == "pink":
        spec = np.fft.rfft(rng.standard_normal(n))
        f = np.arange(spec.size, dtype=np.float64)
        f[0] = 1.0
        x = np.fft.irfft(spec / np.sqrt(f), n)
    elif kind == "babble":
        x = sum(synth_speech(n / sr, rng, sr) for _ in range(5))
        x = x + 0.05 * rng.standard_normal(n) * np.std(x)
    elif kind == "modulated":
        tt = np.arange(n) / sr
        env = 1 + 0.8 * np.sin(2 * np.pi * rng.uniform(0.5, 4) * tt)
        spec = np.fft.rfft(rng.standard_normal(n))
        f = np.arange(spec.size) * sr / n
        spec *= np.exp(-((f - rng.uniform(200, 3000)) / 1500.0) ** 2)
        x = np.fft.irfft(spec, n) * env
    else:
        raise ValueError(f"unknown noise kind {kind!r}")
    return x / (np.max(np.abs(x)) + 1e-12) * 0.5


NOISE_KINDS = ("white", "pink", "babble", "modulated")


@dataclass
class CorpusSpec:
    n_train: int = 40
    n_valid: int = 5
    n_test: int = 10
    duration: float = 2.0
    snrs: tuple = (0.0, 5.0, 10.0, 15.0)
    test_snrs: tuple | None = None  # defaults to ``snrs``
    noise_kinds: tuple = NOISE_KINDS


def synth_corpus(spec: CorpusSpec, outdir, rng: np.random.Generator) -> Manifest:
    """Write clean/noise/noisy WAVs and ``manifest.tsv`` under ``outdir``.

    Signals are quantised to 16 bits before the SNR is measured, so the
    manifest records the realised SNR of the stored files; noisy equals
    clean + noise sample-exactly.
    """
    out = Path(outdir)
    for sub in ("clean", "noise", "noisy"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    splits = ["train"] * spec.n_train + ["valid"] * spec.n_valid + ["test"] * spec.n_test
    rows = []
    for i, split in enumerate(splits):
        snrs = spec.test_snrs if (split == "test" and spec.test_snrs) else spec.snrs
        snr = float(snrs[i % len(snrs)])
        kind = spec.noise_kinds[int(rng.integers(len(spec.noise_kinds)))]
        clean = AudioBuffer(synth_speech(spec.duration, rng))
        noise = AudioBuffer(synth_noise(kind, len(clean), rng))
        mix = mix_at_snr(clean, noise, snr, rng)
        c16 = to_pcm16(mix.clean.samples).astype(np.int32)
        n16 = to_pcm16(mix.noise.samples).astype(np.int32)
        y16 = c16 + n16
        if np.any(y16 > 32767) or np.any(y16 < -32768):
            # rounding pushed a sample over full scale; pull the noise back in
            n16 = np.clip(y16, -32768, 32767) - c16
            y16 = c16 + n16
        name = f"{split}_{i:05d}.wav"
        for sub, pcm in (("clean", c16), ("noise", n16), ("noisy", y16)):
            _write_pcm(out / sub / name, pcm.astype("<i2"))
        realised = snr_db(c16 / 32768.0, n16 / 32768.0)
        rows.append(ManifestRecord(f"clean/{name}", f"noise/{name}", realised, split))
    m = Manifest(rows, out)
    m.save(out / "manifest.tsv")
    return m


def _write_pcm(path, pcm: np.ndarray, sr: int = SAMPLE_RATE):
    with wave.open(os.fspath(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sr)
        w.writeframes(pcm.tobytes())
