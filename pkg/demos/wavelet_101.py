"""
Haar wavelet packets
====================

An RGB image becomes a 12-channel half-resolution packet and comes back
unchanged. Run with ``python3 demos/wavelet_101.py``.
"""

import numpy as np
import torch

from wavesr.datapipe import normalize, synthetic_image
from wavesr.wavelet import BANDS, dwt2d, idwt2d

# a 2x2 block: LL carries the sum, the detail bands carry differences
block = torch.tensor([[[1.0, 2.0], [3.0, 4.0]]])
p = dwt2d(block, scale=False)
for name in BANDS:
    print(name, p.band(name).item())

# a 64x64 test image in [-1, 1]
img = torch.as_tensor(normalize(synthetic_image(0, 64)), dtype=torch.float32)
packet = dwt2d(img)
print("packet shape", tuple(packet.shape))

# the scaled packet stays inside [-1, 1]
print("packet range", packet.data.min().item(), packet.data.max().item())

# energy per band, on the unscaled (orthonormal) transform
raw = dwt2d(img, scale=False)
total = raw.data.pow(2).sum()
for name in BANDS:
    print(f"{name} share {float(raw.band(name).pow(2).sum() / total):.4f}")

# perfect reconstruction
err = (idwt2d(packet) - img).abs().max().item()
print("max round-trip error", err)
assert err < 1e-5

# dropping the detail bands gives a blocky 2x2-averaged image
low = packet.data.clone()
low[3:] = 0
blocky = idwt2d(packet.with_data(low))
print("LL-only error", float((blocky - img).abs().mean()))
print("LL-only is piecewise constant:",
      bool(np.allclose(blocky[:, ::2, ::2].numpy(), blocky[:, 1::2, 1::2].numpy())))
