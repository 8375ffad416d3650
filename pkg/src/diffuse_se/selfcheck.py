"""Oracle self-check suite behind ``diffuse-se oracle-check``.

Each check uses an analytic oracle (no trained network) and reports its
measured value against a fixed threshold. Failures are reported, never
raised, so one broken invariant does not hide the others.
"""
from __future__ import annotations

from dataclasses import dataclass
import math
from typing import Callable

import numpy as np

from .audio import synth_speech
from .diffusion import DiffusionState, q_sample, q_step
from .metrics import si_sdr
from .predictor import OraclePredictor, ZeroPredictor, oracle_predict
from .sampler import SamplerSpec, enhance, fast_sample, supportive_reverse_sample
from .schedule import (BASE_FAST_BETAS, GammaPolicy, NoiseSchedule, fast_alignment,
                       linear_schedule, srp_sigma_hat)

BASE = (50, 1e-4, 0.05)
LARGE = (200, 1e-4, 0.02)


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: float
    threshold: float
    relation: str  # "<=" or ">="

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return (f"{tag}\t{self.name}\tmeasured={self.measured:.6g}\t"
                f"threshold{self.relation}{self.threshold:.6g}")


def _le(name, value, bound):
    return CheckResult(name, bool(value <= bound), float(value), bound, "<=")


def _ge(name, value, bound):
    return CheckResult(name, bool(value >= bound), float(value), bound, ">=")


class _CorruptSigma(NoiseSchedule):
    """Test hook: a schedule whose sigma table is off by 1% from step 2 on."""

    def __post_init__(self):
        super().__post_init__()
        bad = np.array(self.sigmas)
        bad[1:] *= 1.01
        bad.setflags(write=False)
        object.__setattr__(self, "sigmas", bad)


def _schedules(corrupt_sigma: bool):
    out = []
    for T, lo, hi in (BASE, LARGE):
        s = linear_schedule(T, lo, hi)
        if corrupt_sigma:
            s = _CorruptSigma(s.betas, s.descriptor)
        out.append(s)
    return out


def check_schedule_algebra(schedules) -> list[CheckResult]:
    worst_rec = worst_sig = worst_hat = 0.0
    for s in schedules:
        b = np.asarray(s.betas)
        # independent recomputation from the betas alone
        ab = np.cumprod(1.0 - b)
        prev = np.concatenate([[1.0], ab[:-1]])
        sig = np.sqrt(np.where(np.arange(s.T) == 0, b, (1 - prev) / (1 - ab) * b))
        for t in range(1, s.T + 1):
            worst_rec = max(worst_rec, abs(s.alpha_bar(t) - s.alpha_bar(t - 1) * (1 - s.beta(t))))
            worst_sig = max(worst_sig, abs(s.sigma(t) - sig[t - 1]))
            if t > 1:
                worst_hat = max(worst_hat, abs(srp_sigma_hat(s, GammaPolicy(), t)))
    return [_le("schedule.alpha_bar_recurrence", worst_rec, 1e-12),
            _le("schedule.sigma_table", worst_sig, 1e-12),
            _le("schedule.srp_sigma_hat_zero", worst_hat, 1e-12)]


def check_forward_consistency(rng, n=100_000) -> list[CheckResult]:
    s = linear_schedule(*BASE)
    x0 = 1.0
    x = DiffusionState(np.full(n, x0), 0)
    worst = 0.0
    for t in range(1, s.T + 1):
        x = q_step(x, s, rng)
        if t in (1, s.T // 2, s.T):
            closed = q_sample(np.full(n, x0), t, rng.standard_normal(n), s)
            m1, m2 = x.x.mean(), closed.mean()
            v1, v2 = x.x.var(), closed.var()
            worst = max(worst, abs(m1 - m2) / abs(m2), abs(v1 - v2) / v2)
    return [_le("diffusion.stepwise_vs_closed_form", worst, 0.02)]


def check_oracle_inversion(rng, n=1000) -> list[CheckResult]:
    s = linear_schedule(*BASE)
    worst = 0.0
    for _ in range(n):
        x0, eps = rng.standard_normal(16), rng.standard_normal(16)
        t = int(rng.integers(1, s.T + 1))
        worst = max(worst, float(np.max(np.abs(
            oracle_predict(q_sample(x0, t, eps, s), t, x0, s) - eps))))
    return [_le("predictor.oracle_inversion", worst, 1e-12)]


def _noisy(x0, snr, rng):
    n = rng.standard_normal(x0.size)
    n *= math.sqrt(np.sum(x0 ** 2) / np.sum(n ** 2) / 10 ** (snr / 10))
    return x0 + n


def check_srp(rng) -> list[CheckResult]:
    s = linear_schedule(*BASE)
    x0 = synth_speech(0.5, rng)
    full = supportive_reverse_sample(OraclePredictor(x0, s), x0, None, s, GammaPolicy(), rng)
    fast = fast_sample(OraclePredictor(x0, s), x0, None, fast_alignment(s, BASE_FAST_BETAS),
                       "srp", GammaPolicy(), rng)
    err = max(np.linalg.norm(full - x0), np.linalg.norm(fast - x0)) / np.linalg.norm(x0)
    y = _noisy(x0, 5.0, rng)
    out = supportive_reverse_sample(OraclePredictor(x0, s), y, None, s, GammaPolicy(), rng)
    gain = si_sdr(x0, out) - si_sdr(x0, y)
    return [_le("sampler.srp_clean_fixed_point", err, 1e-6),
            _ge("sampler.srp_oracle_gain_db_at_5db", gain, 5.0)]


def check_fast_reduction(rng) -> list[CheckResult]:
    s = linear_schedule(*BASE)
    x0 = rng.standard_normal(256)
    y = _noisy(x0, 5.0, rng)
    seed = int(rng.integers(2 ** 32))
    mismatched = 0
    for v in ("rp", "rp-nin", "rp-nout", "rp-ninout", "srp"):
        a = enhance(OraclePredictor(x0, s), y, None, SamplerSpec(v, "full"), s,
                    np.random.default_rng(seed))
        b = enhance(OraclePredictor(x0, s), y, None, SamplerSpec(v, "fast", tuple(s.betas)), s,
                    np.random.default_rng(seed))
        mismatched += a.tobytes() != b.tobytes()
    z = ZeroPredictor()
    fast_sample(z, y, None, fast_alignment(s, BASE_FAST_BETAS), "srp", GammaPolicy(), rng)
    return [_le("sampler.fast_reduction_mismatches", mismatched, 0),
            CheckResult("sampler.base_fast_predictor_calls", z.calls == 6, z.calls, 6, "==")]


def oracle_check(seed: int = 0, corrupt_sigma: bool = False,
                 emit: Callable[[str], None] | None = None) -> list[CheckResult]:
    """Run every check; ``corrupt_sigma`` is the fault-injection hook."""
    root = np.random.SeedSequence(seed)
    rngs = [np.random.default_rng(c) for c in root.spawn(4)]
    results = []
    for part in (lambda: check_schedule_algebra(_schedules(corrupt_sigma)),
                 lambda: check_forward_consistency(rngs[0]),
                 lambda: check_oracle_inversion(rngs[1]),
                 lambda: check_srp(rngs[2]),
                 lambda: check_fast_reduction(rngs[3])):
        for r in part():
            results.append(r)
            if emit:
                emit(r.line())
    return results
