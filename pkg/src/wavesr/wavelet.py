"""Single-level orthonormal 2D Haar transform with channel-wise sub-band packing.

Sub-band letters follow (horizontal filter, vertical filter): ``LH`` is
low-pass along the width and high-pass along the height. The high-pass
filter is ``(right - left) / sqrt(2)``, so for the 2x2 block::

    [[1, 2],
     [3, 4]]

the coefficients are ``LL=5, LH=2, HL=1, HH=0``.

Packed layout along the channel axis is ``[LL(C), LH(C), HL(C), HH(C)]``.
With ``scale=True`` the coefficients are halved, which maps images in
[-1, 1] onto coefficients in [-1, 1].
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

__all__ = [
    "HAAR_LOW",
    "HAAR_HIGH",
    "WaveletPacket",
    "dwt2d",
    "idwt2d",
    "haar_analysis",
    "haar_synthesis",
    "split_bands",
    "merge_bands",
]

_R2 = 1.0 / math.sqrt(2.0)

#: Haar low-pass and high-pass analysis filters (unit norm, mutually orthogonal).
HAAR_LOW = (_R2, _R2)
HAAR_HIGH = (-_R2, _R2)

BANDS = ("LL", "LH", "HL", "HH")


@dataclass(frozen=True)
class WaveletPacket:
    """Channel-packed Haar sub-bands of a ``C``-channel image.

    ``data`` has shape ``(..., 4*C, H/2, W/2)``; leading batch dimensions are
    allowed so that a batch of packets can share one object.
    """

    data: torch.Tensor
    source_channels: int
    scaled: bool = True

    def __post_init__(self):
        if self.data.ndim < 3:
            raise ValueError(f"packet data must be at least 3-D, got shape {tuple(self.data.shape)}")
        if self.data.shape[-3] != 4 * self.source_channels:
            raise ValueError(
                f"packet has {self.data.shape[-3]} channels, expected 4*{self.source_channels}"
            )

    @property
    def shape(self):
        return self.data.shape

    def band(self, name: str) -> torch.Tensor:
        """Return one sub-band (``'LL'``, ``'LH'``, ``'HL'`` or ``'HH'``)."""
        k = BANDS.index(name.upper())
        c = self.source_channels
        return self.data[..., k * c:(k + 1) * c, :, :]

    def with_data(self, data: torch.Tensor) -> "WaveletPacket":
        return WaveletPacket(data, self.source_channels, self.scaled)


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x))


def haar_analysis(x: torch.Tensor) -> tuple[torch.Tensor, ...]:
    """Orthonormal Haar analysis of the last two axes, unscaled.

    Returns the four sub-bands ``(ll, lh, hl, hh)``, each half-size. Works on
    any leading shape and is differentiable.
    """
    h, w = x.shape[-2], x.shape[-1]
    if h % 2:
        raise ValueError(f"height must be even for the Haar transform, got H={h}")
    if w % 2:
        raise ValueError(f"width must be even for the Haar transform, got W={w}")
    a = x[..., 0::2, 0::2]
    b = x[..., 0::2, 1::2]
    c = x[..., 1::2, 0::2]
    d = x[..., 1::2, 1::2]
    ll = (a + b + c + d) * 0.5
    lh = (c + d - a - b) * 0.5
    hl = (b - a + d - c) * 0.5
    hh = (a - b - c + d) * 0.5
    return ll, lh, hl, hh


def haar_synthesis(ll, lh, hl, hh) -> torch.Tensor:
    """Inverse of :func:`haar_analysis`."""
    a = (ll - lh - hl + hh) * 0.5
    b = (ll - lh + hl - hh) * 0.5
    c = (ll + lh - hl - hh) * 0.5
    d = (ll + lh + hl + hh) * 0.5
    top = torch.stack((a, b), dim=-1).flatten(-2)
    bottom = torch.stack((c, d), dim=-1).flatten(-2)
    return torch.stack((top, bottom), dim=-2).flatten(-3, -2)


def split_bands(data: torch.Tensor) -> tuple[torch.Tensor, ...]:
    if data.shape[-3] % 4:
        raise ValueError(f"channel count {data.shape[-3]} is not divisible by 4")
    return tuple(torch.chunk(data, 4, dim=-3))


def merge_bands(ll, lh, hl, hh) -> torch.Tensor:
    return torch.cat((ll, lh, hl, hh), dim=-3)


def dwt2d(image, scale: bool = True) -> WaveletPacket:
    """Haar-decompose a ``(..., C, H, W)`` image into a :class:`WaveletPacket`.

    Raises ``ValueError`` naming the axis when ``H`` or ``W`` is odd.
    """
    x = _as_tensor(image)
    if x.ndim < 3:
        raise ValueError(f"expected an image of shape (..., C, H, W), got {tuple(x.shape)}")
    bands = haar_analysis(x)
    data = merge_bands(*bands)
    if scale:
        data = data * 0.5
    return WaveletPacket(data, x.shape[-3], scale)


def idwt2d(packet) -> torch.Tensor:
    """Reconstruct the image from a packet (or raw packed tensor, assumed scaled)."""
    if isinstance(packet, WaveletPacket):
        data, scaled = packet.data, packet.scaled
    else:
        data, scaled = _as_tensor(packet), True
    if data.ndim < 3 or data.shape[-3] % 4:
        raise ValueError(
            f"packet channel count must be divisible by 4, got shape {tuple(data.shape)}"
        )
    if scaled:
        data = data * 2.0
    return haar_synthesis(*split_bands(data))
