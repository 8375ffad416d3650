"""Step-indexed constants of the diffusion and reverse processes.

Steps are 1-based (``t = 1..T``) everywhere in the public API. Arrays are
stored 0-based, so ``betas[t - 1]`` is the value at step ``t``. The value
``alpha_bar(0)`` is defined as 1.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np


class ScheduleError(ValueError):
    pass


class NegativeVariance(ScheduleError):
    """Raised when a mixing ratio leaves no room for the Gaussian term."""


class AlignmentOutOfRange(ScheduleError):
    pass


def _readonly(a):
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    descriptor: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or b.size == 0:
            raise ScheduleError("betas must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(b)) or np.any(b <= 0) or np.any(b >= 1):
            raise ScheduleError("every beta must lie strictly inside (0, 1)")
        alphas = 1.0 - b
        alpha_bars = np.empty_like(b)
        acc = 1.0
        for i, a in enumerate(alphas):
            acc = acc * a
            alpha_bars[i] = acc
        # alpha_bar with the t=0 entry prepended
        abar0 = np.concatenate([[1.0], alpha_bars])
        tilde = np.empty_like(b)
        tilde[0] = b[0]
        tilde[1:] = (1.0 - abar0[1:-1]) / (1.0 - abar0[2:]) * b[1:]
        object.__setattr__(self, "betas", _readonly(b))
        object.__setattr__(self, "alphas", _readonly(alphas))
        object.__setattr__(self, "alpha_bars", _readonly(alpha_bars))
        object.__setattr__(self, "sigmas", _readonly(np.sqrt(tilde)))
        if not self.descriptor:
            object.__setattr__(self, "descriptor",
                               {"kind": "explicit", "betas": [float(x) for x in b]})

    @classmethod
    def from_betas(cls, betas) -> "NoiseSchedule":
        return cls(np.asarray(betas, dtype=np.float64))

    @property
    def T(self) -> int:
        return int(self.betas.size)

    def _check(self, t):
        if not (isinstance(t, (int, np.integer)) and 1 <= t <= self.T):
            raise ScheduleError(f"step index {t!r} outside 1..{self.T}")

    def beta(self, t: int) -> float:
        self._check(t)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self._check(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        """Cumulative product at step ``t``; ``alpha_bar(0) == 1``."""
        if t == 0:
            return 1.0
        self._check(t)
        return float(self.alpha_bars[t - 1])

    def sigma(self, t: int) -> float:
        self._check(t)
        return float(self.sigmas[t - 1])

    def sqrt_alpha_bar_at(self, pos):
        """Piecewise-linear interpolation of sqrt(alpha_bar) at fractional steps in [0, T]."""
        grid = np.sqrt(np.concatenate([[1.0], self.alpha_bars]))
        pos = np.asarray(pos, dtype=np.float64)
        if np.any(pos < 0) or np.any(pos > self.T):
            raise ScheduleError(f"step position outside [0, {self.T}]")
        return np.interp(pos, np.arange(self.T + 1, dtype=np.float64), grid)

    # text form stored in checkpoints
    def to_text(self) -> str:
        d = self.descriptor
        if d.get("kind") == "linear":
            rows = [("kind", "linear"), ("T", str(d["T"])),
                    ("beta_min", repr(float(d["beta_min"]))),
                    ("beta_max", repr(float(d["beta_max"])))]
        else:
            rows = [("kind", "explicit"), ("T", str(self.T)),
                    ("betas", ",".join(repr(float(x)) for x in self.betas))]
        return "".join(f"{k}\t{v}\n" for k, v in rows)

    @classmethod
    def from_text(cls, text: str) -> "NoiseSchedule":
        kv = {}
        for line in text.splitlines():
            if line.strip():
                k, v = line.split("\t", 1)
                kv[k.strip()] = v.strip()
        if kv.get("kind") == "linear":
            return linear_schedule(int(kv["T"]), float(kv["beta_min"]), float(kv["beta_max"]))
        if kv.get("kind") == "explicit":
            s = cls.from_betas([float(x) for x in kv["betas"].split(",")])
            if s.T != int(kv["T"]):
                raise ScheduleError("explicit schedule length does not match T")
            return s
        raise ScheduleError(f"unknown schedule kind {kv.get('kind')!r}")


def linear_schedule(T: int, beta_min: float, beta_max: float) -> NoiseSchedule:
    """Betas linearly spaced from ``beta_min`` (step 1) to ``beta_max`` (step T)."""
    if isinstance(T, bool) or not isinstance(T, (int, np.integer)) or T < 1:
        raise ScheduleError("T must be a positive integer")
    for v in (beta_min, beta_max):
        if not math.isfinite(v):
            raise ScheduleError("beta bounds must be finite")
    if not (0 < beta_min <= beta_max < 1):
        raise ScheduleError("need 0 < beta_min <= beta_max < 1")
    if T == 1:
        betas = np.array([beta_min], dtype=np.float64)
    else:
        betas = beta_min + np.arange(T, dtype=np.float64) * (beta_max - beta_min) / (T - 1)
        betas[-1] = beta_max
    return NoiseSchedule(betas, descriptor={"kind": "linear", "T": int(T),
                                            "beta_min": float(beta_min),
                                            "beta_max": float(beta_max)})


def sigma(s: NoiseSchedule, t: int) -> float:
    return s.sigma(t)


@dataclass(frozen=True)
class GammaPolicy:
    """Mixing ratio of the noisy signal per reverse step.

    For ``t > 1`` the ratio is ``sigma_t / sqrt(alpha_bar_{t-1})``, which uses
    up the whole step variance; ``gamma1`` is the ratio at the last step.
    ``scale`` multiplies the ``t > 1`` rule for sensitivity runs; values above
    1 ask for more than the step variance and raise :class:`NegativeVariance`.
    """
    gamma1: float = 0.2
    scale: float = 1.0

    def __post_init__(self):
        if not (0.0 <= self.gamma1 < 1.0) or not math.isfinite(self.gamma1):
            raise ScheduleError("gamma1 must lie in [0, 1)")
        if not (self.scale >= 0.0) or not math.isfinite(self.scale):
            raise ScheduleError("scale must be finite and non-negative")


def gamma(s: NoiseSchedule, p: GammaPolicy, t: int) -> float:
    s._check(t)
    if t == 1:
        return float(p.gamma1)
    return p.scale * s.sigma(t) / math.sqrt(s.alpha_bar(t - 1))


def srp_sigma_hat(s: NoiseSchedule, p: GammaPolicy, t: int, *, clamp: bool = False) -> float:
    """Standard deviation of the Gaussian term left after mixing in the noisy signal.

    A radicand within relative rounding (1e-12) of zero counts as zero. A negative one
    raises :class:`NegativeVariance` unless ``clamp`` is set.
    """
    sig2 = s.sigma(t) ** 2
    g = gamma(s, p, t)
    rad = sig2 - g * g * s.alpha_bar(t - 1)
    if abs(rad) <= 1e-12 * sig2:
        # cancellation residue, not variance
        return 0.0
    if rad > 0:
        return math.sqrt(rad)
    if clamp:
        return 0.0
    raise NegativeVariance(
        f"step {t}: sigma^2={sig2:.6g} < gamma^2*alpha_bar={g * g * s.alpha_bar(t - 1):.6g}")


@dataclass(frozen=True)
class FastSchedule:
    """A short inference schedule aligned to a longer training schedule."""
    inference: NoiseSchedule
    step_positions: np.ndarray

    @property
    def S(self) -> int:
        return self.inference.T

    @property
    def user_betas(self):
        return self.inference.betas

    @property
    def fast_alpha_bars(self):
        return self.inference.alpha_bars

    @property
    def fast_sigmas(self):
        return self.inference.sigmas


def fast_alignment(train: NoiseSchedule, user_betas) -> FastSchedule:
    """Map each inference step to a fractional training step.

    Position ``p`` of step ``s`` satisfies: sqrt(alpha_bar) of the training
    schedule, linearly interpolated between integer steps, equals
    sqrt(alpha_bar) of the inference schedule at ``s``.
    """
    inf = NoiseSchedule.from_betas(user_betas)
    grid = np.sqrt(np.concatenate([[1.0], train.alpha_bars]))
    positions = np.empty(inf.T)
    for i, ab in enumerate(inf.alpha_bars):
        target = math.sqrt(ab)
        if target < grid[-1]:
            raise AlignmentOutOfRange(
                f"inference step {i + 1}: alpha_bar {ab:.6g} is below the training "
                f"schedule's final alpha_bar {train.alpha_bars[-1]:.6g}")
        pos = None
        for t in range(train.T):
            if grid[t + 1] <= target <= grid[t]:
                frac = (grid[t] - target) / (grid[t] - grid[t + 1])
                pos = t + frac
                break
        positions[i] = pos
    return FastSchedule(inf, _readonly(positions))


def full_alignment(train: NoiseSchedule) -> FastSchedule:
    """The training schedule itself, expressed as an inference schedule."""
    return FastSchedule(train, _readonly(np.arange(1, train.T + 1, dtype=np.float64)))


BASE_FAST_BETAS = (0.0001, 0.001, 0.01, 0.05, 0.2, 0.5)
LARGE_FAST_BETAS = (0.0001, 0.001, 0.01, 0.05, 0.2, 0.7)
