"""
A two-step diffusion chain
==========================

Noise schedule, forward noising and the x0-prediction sampler, with a
stub generator standing in for a trained network.
"""

import math

import torch

from wavesr.diffusion import NoiseState, make_schedule, q_sample_pair, sample
from wavesr.wavelet import WaveletPacket

# with only two steps each beta is large: the signal is almost gone by t=2
sched = make_schedule(T=2, beta_min=0.1, beta_max=20.0)
for t in range(1, sched.T + 1):
    print(f"t={t} beta={sched.betas[t - 1]:.5f} alpha_bar={sched.alpha_bars[t - 1]:.3e} "
          f"posterior var={sched.posterior_var[t - 1]:.5f}")

# training pairs (x_{t-1}, x_t) are drawn from one consistent chain
x0 = torch.full((10_000, 1), 0.8, dtype=torch.float64)
ns = NoiseState(seed=0)
x_prev, x_t = q_sample_pair(x0, 2, sched, ns)
print("x_t mean", x_t.mean().item(), "expected", math.sqrt(sched.alpha_bars[1]) * 0.8)
print("corr(x_1, x_2)", torch.corrcoef(torch.stack([x_prev[:, 0], x_t[:, 0]]))[0, 1].item())

# a generator that always knows the answer recovers it exactly,
# because the last step returns the prediction without added noise
truth = torch.randn(1, 12, 8, 8)
cond = WaveletPacket(torch.zeros(1, 12, 8, 8), source_channels=3)
out = sample(lambda x, c, t: truth.clone(), cond, sched, NoiseState(1))
print("oracle sampler exact:", torch.equal(out.data, truth))

# the same seed replays the same noise
shrink = lambda x, c, t: 0.5 * x
a = sample(shrink, cond, sched, NoiseState(7)).data
b = sample(shrink, cond, sched, NoiseState(7)).data
print("replayable:", torch.equal(a, b))
