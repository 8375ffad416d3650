"""Reverse-process samplers: plain, supportive, fast, and the noisy-signal
injection variants used for ablations."""
from __future__ import annotations

from dataclasses import dataclass, field
import enum
import math

import numpy as np

from .schedule import (FastSchedule, GammaPolicy, NoiseSchedule, fast_alignment,
                       full_alignment, gamma, srp_sigma_hat)


class Variant(str, enum.Enum):
    RP = "rp"
    RP_N_IN = "rp-nin"
    RP_N_OUT = "rp-nout"
    RP_N_IN_OUT = "rp-ninout"
    SRP = "srp"


class SamplingDiverged(FloatingPointError):
    pass


@dataclass
class SamplerSpec:
    variant: Variant = Variant.SRP
    schedule_mode: str = "full"  # "full" or "fast"
    fast_betas: tuple | None = None
    gamma_policy: GammaPolicy = field(default_factory=GammaPolicy)
    output_mix_weight: float = 0.2

    def __post_init__(self):
        self.variant = Variant(self.variant)
        if self.schedule_mode not in ("full", "fast"):
            raise ValueError("schedule_mode must be 'full' or 'fast'")
        if self.schedule_mode == "fast" and not self.fast_betas:
            raise ValueError("fast schedule needs fast_betas")
        if not 0.0 <= self.output_mix_weight <= 1.0:
            raise ValueError("output_mix_weight must lie in [0, 1]")

    def alignment(self, train: NoiseSchedule) -> FastSchedule:
        if self.schedule_mode == "fast":
            return fast_alignment(train, self.fast_betas)
        return full_alignment(train)


class ReverseTrace(list):
    """Per-step (t, |eps_hat|, |x_t|) records."""

    def to_text(self) -> str:
        return "t\teps_norm\tx_norm\n" + "".join(f"{t}\t{e:.9g}\t{x:.9g}\n" for t, e, x in self)


def mu_theta(x_t, t: int, eps_hat, schedule: NoiseSchedule) -> np.ndarray:
    """Posterior mean from a noise estimate: (x_t - beta/sqrt(1-abar) eps) / sqrt(alpha)."""
    b = schedule.beta(t)
    return (np.asarray(x_t) - (b / math.sqrt(1.0 - schedule.alpha_bar(t))) * np.asarray(eps_hat)) \
        / math.sqrt(schedule.alpha(t))


def _run(predictor, x, cond, align: FastSchedule, rng, y=None,
         gamma_policy: GammaPolicy | None = None, trace: ReverseTrace | None = None):
    sched = align.inference
    for s in range(sched.T, 0, -1):
        eps = np.asarray(predictor(x, align.step_positions[s - 1], cond), dtype=np.float64)
        if trace is not None:
            trace.append((s, float(np.linalg.norm(eps)), float(np.linalg.norm(x))))
        mu = mu_theta(x, s, eps, sched)
        if y is None:
            sd = sched.sigma(s)
        else:
            g = gamma(sched, gamma_policy, s)
            mu = (1.0 - g) * mu + (g * math.sqrt(sched.alpha_bar(s - 1))) * y
            # the final step adds no noise, so a negative radicand there is harmless
            sd = srp_sigma_hat(sched, gamma_policy, s, clamp=(s == 1))
        if s > 1:
            x = mu + sd * rng.standard_normal(mu.shape)
        else:
            x = mu
        if not np.all(np.isfinite(x)):
            raise SamplingDiverged(f"non-finite state after step {s} "
                                   f"(|eps|={np.linalg.norm(eps):.3g}, sigma={sd:.3g})")
    return x


def reverse_sample(predictor, cond, schedule: NoiseSchedule, rng: np.random.Generator,
                   length: int, x_T=None, trace=None) -> np.ndarray:
    """Plain reverse process from Gaussian noise (or from ``x_T`` when given)."""
    x = rng.standard_normal(length) if x_T is None else np.array(x_T, dtype=np.float64)
    return _run(predictor, x, cond, full_alignment(schedule), rng, trace=trace)


def supportive_reverse_sample(predictor, y, cond, schedule: NoiseSchedule,
                              gamma_policy: GammaPolicy, rng: np.random.Generator,
                              trace=None) -> np.ndarray:
    """Reverse process started at the noisy signal, mixing it back in at each step."""
    y = np.asarray(y, dtype=np.float64)
    return _run(predictor, y.copy(), cond, full_alignment(schedule), rng, y=y,
                gamma_policy=gamma_policy, trace=trace)


def fast_sample(predictor, start, cond, fast: FastSchedule, variant,
                gamma_policy: GammaPolicy, rng: np.random.Generator,
                length: int | None = None, trace=None) -> np.ndarray:
    """Reverse process on an aligned short schedule.

    ``start`` is the noisy signal for the variants that use one and is
    ignored by plain RP (which draws its own Gaussian start).
    No output mixing happens here; see :func:`enhance`.
    """
    variant = Variant(variant)
    if variant in (Variant.RP, Variant.RP_N_OUT):
        n = length if length is not None else np.asarray(start).size
        return _run(predictor, rng.standard_normal(n), cond, fast, rng, trace=trace)
    y = np.asarray(start, dtype=np.float64)
    if variant == Variant.SRP:
        return _run(predictor, y.copy(), cond, fast, rng, y=y, gamma_policy=gamma_policy,
                    trace=trace)
    return _run(predictor, y.copy(), cond, fast, rng, trace=trace)


def mix_output(x_hat, y, w: float) -> np.ndarray:
    return (1.0 - w) * np.asarray(x_hat) + w * np.asarray(y)


def enhance(predictor, y, cond, spec: SamplerSpec, train_schedule: NoiseSchedule,
            rng: np.random.Generator, trace=None) -> np.ndarray:
    """Enhance noisy waveform ``y`` with the sampler variant in ``spec``.

    SRP's last-step mixing ratio is its only blend with ``y``; the N_out
    variants blend the finished output with weight ``output_mix_weight``.
    """
    y = np.asarray(y, dtype=np.float64)
    align = spec.alignment(train_schedule)
    v = spec.variant
    if v == Variant.SRP:
        return _run(predictor, y.copy(), cond, align, rng, y=y,
                    gamma_policy=spec.gamma_policy, trace=trace)
    if v in (Variant.RP_N_IN, Variant.RP_N_IN_OUT):
        x0 = _run(predictor, y.copy(), cond, align, rng, trace=trace)
    else:
        x0 = _run(predictor, rng.standard_normal(y.size), cond, align, rng, trace=trace)
    if v in (Variant.RP_N_OUT, Variant.RP_N_IN_OUT):
        x0 = mix_output(x0, y, spec.output_mix_weight)
    return x0
