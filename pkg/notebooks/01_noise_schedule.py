"""
Noise schedules and the supportive mixing ratio
===============================================

A linear beta schedule fixes everything else: the cumulative signal level
alpha_bar, the reverse-step deviation sigma, and the ratio gamma at which the
supportive sampler mixes the noisy recording back in. With gamma chosen as
sigma_t / sqrt(alpha_bar_{t-1}) the Gaussian term of every step but the last
disappears.
"""
import numpy as np

from diffuse_se.schedule import (BASE_FAST_BETAS, GammaPolicy, fast_alignment, gamma,
                                 linear_schedule, srp_sigma_hat)

base = linear_schedule(50, 1e-4, 0.05)
print("T =", base.T, " alpha_bar_T =", round(base.alpha_bar(base.T), 4))

policy = GammaPolicy(gamma1=0.2)
print(" t   beta      alpha_bar  sigma     gamma     sigma_hat")
for t in (1, 2, 10, 25, 50):
    print(f"{t:2d}  {base.beta(t):.6f}  {base.alpha_bar(t):.6f}   {base.sigma(t):.6f}  "
          f"{gamma(base, policy, t):.6f}  {srp_sigma_hat(base, policy, t, clamp=True):.1e}")

# %%
# A six-step inference schedule runs the network at fractional training steps.
# Each position is where the training schedule's sqrt(alpha_bar), interpolated
# linearly, meets the short schedule's value.
fast = fast_alignment(base, BASE_FAST_BETAS)
print("fast betas     ", list(BASE_FAST_BETAS))
print("step positions ", np.round(fast.step_positions, 3).tolist())

# %%
# The same table is available from the command line:
#
#     diffuse-se schedule-inspect --T 50 --beta 1e-4:0.05
