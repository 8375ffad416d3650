"""
Forward diffusion, stepwise and in closed form
==============================================

Corrupting a waveform one Markov step at a time and jumping straight to step
t with the closed form give the same distribution. Here a constant signal is
pushed through both routes for many independent trajectories.
"""
import numpy as np

from diffuse_se.diffusion import DiffusionState, make_training_pair, q_sample, q_step
from diffuse_se.schedule import linear_schedule

s = linear_schedule(50, 1e-4, 0.05)
rng = np.random.default_rng(0)
n = 100_000

state = DiffusionState(np.ones(n), 0)
for t in range(1, s.T + 1):
    state = q_step(state, s, rng)
    if t in (1, 25, 50):
        closed = q_sample(np.ones(n), t, rng.standard_normal(n), s)
        print(f"t={t:2d}  stepwise mean {state.x.mean():.4f} var {state.x.var():.5f}   "
              f"closed form mean {closed.mean():.4f} var {closed.var():.5f}")

# %%
# Training draws one step uniformly and regresses the network onto the noise
# that produced the corrupted sample.
pair = make_training_pair(np.sin(np.linspace(0, 20, 1024)), s, rng)
print("training pair at step", pair.t, "noise std", round(float(pair.epsilon.std()), 3))
