"""
Training a tiny super-resolution model
======================================

Eight synthetic 32x32 images, 4x upscaling, a thousand adversarial steps
on CPU (about two minutes). Writes PNGs to ``demo_out/`` and prints PSNR
against the bicubic baseline. Pass an iteration count to change the length.
"""

import sys
import time
from pathlib import Path

from wavesr.datapipe import make_pair, synthetic_image
from wavesr.diffusion import make_schedule
from wavesr.metrics import export_samples, evaluate_pairs
from wavesr.networks import DiscriminatorConfig, GeneratorConfig, count_parameters
from wavesr.training import TrainConfig, init_state, stack_batch, train_step

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 1000

# HR images and their degraded LR counterparts, already in packet form
pairs = [make_pair(synthetic_image(i, 32), scale_factor=4, id=f"img{i}") for i in range(8)]
batch = stack_batch(pairs)

# desk-sized networks; the default configs are the full-size ones
gen_cfg = GeneratorConfig(base_channels=16, channel_mult=[1, 2], resnet_blocks_per_level=1, time_embed_dim=64)
disc_cfg = DiscriminatorConfig(num_layers=3, base_channels=16, time_embed_dim=64)
# a short run needs a faster-moving EMA than the default 0.9999
cfg = TrainConfig(batch_size=8, iterations=iterations, ema_decay=0.99)
sched = make_schedule(T=2)
state = init_state(gen_cfg, disc_cfg, cfg)
print("parameters", count_parameters(state.gen), "+", count_parameters(state.disc))

t0 = time.perf_counter()
while state.iteration < iterations:
    train_step(state, batch, sched, cfg)
    if state.iteration % 100 == 0:
        losses = ", ".join(f"{k} {v:.4f}" for k, v in state.last_losses.items())
        print(f"{state.iteration:5d}  {losses}  ({time.perf_counter() - t0:.0f}s)")

report = evaluate_pairs(state.ema, pairs, sched)
agg = report.aggregate()
print(f"EMA model  PSNR {agg['psnr']:.2f} dB  SSIM {agg['ssim']:.3f}")
print(f"bicubic    PSNR {agg['bicubic_psnr']:.2f} dB  SSIM {agg['bicubic_ssim']:.3f}")

out = Path("demo_out")
export_samples(state.ema, pairs, out, sched)
print("samples in", out.resolve())
