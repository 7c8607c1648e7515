"""Frequency-aware U-Net generator and time-conditioned discriminator.

The generator maps ``(x_t, x_lr, t)`` -- two 12-channel wavelet packets and an
integer timestep -- to an x0 prediction of the same shape. Spatial resizing
inside the U-Net is done with the Haar transform: downsampling analyses the
feature map into four sub-bands and mixes them, upsampling synthesises four
learned sub-bands back into a feature map twice the size.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .wavelet import haar_analysis, haar_synthesis

__all__ = [
    "GeneratorConfig",
    "DiscriminatorConfig",
    "Generator",
    "Discriminator",
    "timestep_embedding",
    "count_parameters",
    "build_models",
]


@dataclass
class GeneratorConfig:
    base_channels: int = 64
    channel_mult: list[int] = field(default_factory=lambda: [1, 2, 2, 2, 4])
    resnet_blocks_per_level: int = 2
    in_channels: int = 24
    out_channels: int = 12
    time_embed_dim: int = 256
    attention_levels: list[int] = field(default_factory=lambda: [-1])

    def __post_init__(self):
        self.channel_mult = [int(m) for m in self.channel_mult]
        self.attention_levels = [int(a) for a in self.attention_levels]
        if self.in_channels != 2 * self.out_channels:
            raise ValueError("in_channels must equal 2 * out_channels (x_t and x_lr are concatenated)")
        if len(self.channel_mult) < 2:
            raise ValueError("channel_mult needs at least two levels")
        values = [self.base_channels, self.resnet_blocks_per_level, self.out_channels,
                  self.time_embed_dim, *self.channel_mult]
        if any(v <= 0 for v in values):
            raise ValueError("generator sizes must all be positive")

    @property
    def downsample_factor(self) -> int:
        return 2 ** (len(self.channel_mult) - 1)


@dataclass
class DiscriminatorConfig:
    num_layers: int = 6
    base_channels: int = 64
    in_channels: int = 24
    time_embed_dim: int = 256
    max_mult: int = 8

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValueError("discriminator needs at least one layer")
        if min(self.base_channels, self.in_channels, self.time_embed_dim, self.max_mult) <= 0:
            raise ValueError("discriminator sizes must all be positive")


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape ``(B, dim)``."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half - 1, 1))
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _groups(channels: int) -> int:
    for g in (32, 16, 8, 4, 2):
        if channels % g == 0 and channels // g >= 2:
            return g
    return 1


class TimeEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        w = self.mlp[0].weight
        return self.mlp(timestep_embedding(t, self.dim).to(w.dtype))


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb_dim, cout)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return (self.skip(x) + h) / math.sqrt(2.0)


class SelfAttention(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x):
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, h * w).unbind(1)
        attn = torch.softmax(torch.einsum("bci,bcj->bij", q, k) / math.sqrt(c), dim=-1)
        out = torch.einsum("bij,bcj->bci", attn, v).reshape(b, c, h, w)
        return (x + self.proj(out)) / math.sqrt(2.0)


class WaveletDownBlock(nn.Module):
    """Residual block that halves resolution with Haar analysis.

    The main path mixes all four sub-bands of its features with a learned
    1x1 convolution. The residual path carries the LL band of the input
    plus a learned per-channel gain on the summed high bands.
    """

    def __init__(self, cin: int, cout: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.mix = nn.Conv2d(4 * cout, cout, 1)
        self.temb = nn.Linear(temb_dim, cout)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.high_gain = nn.Parameter(torch.zeros(1, cin, 1, 1))
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.mix(torch.cat(haar_analysis(h), dim=1))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        ll, lh, hl, hh = haar_analysis(x)
        # orthonormal LL is 2x the local mean
        res = 0.5 * ll + self.high_gain * (lh + hl + hh)
        return (self.skip(res) + h) / math.sqrt(2.0)


class WaveletUpBlock(nn.Module):
    """Residual block that doubles resolution with Haar synthesis.

    The main path predicts four sub-bands and synthesises them; the residual
    path synthesises the input as a pure LL band (no high-frequency content).
    """

    def __init__(self, cin: int, cout: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.bands = nn.Conv2d(cout, 4 * cout, 1)
        self.temb = nn.Linear(temb_dim, cout)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = haar_synthesis(*torch.chunk(self.bands(h), 4, dim=1))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        s = self.skip(x)
        zero = torch.zeros_like(s)
        res = haar_synthesis(2.0 * s, zero, zero, zero)
        return (res + h) / math.sqrt(2.0)


class Generator(nn.Module):
    """U-Net estimating the clean packet from ``(x_t, x_lr, t)``."""

    def __init__(self, config: GeneratorConfig | None = None):
        super().__init__()
        self.config = cfg = config or GeneratorConfig()
        ch = [cfg.base_channels * m for m in cfg.channel_mult]
        n_levels = len(ch)
        attn = {a % n_levels for a in cfg.attention_levels}
        temb = cfg.time_embed_dim

        self.time_embed = TimeEmbedding(temb)
        self.conv_in = nn.Conv2d(cfg.in_channels, ch[0], 3, padding=1)

        self.down_blocks = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsamplers = nn.ModuleList()
        skip_ch = [ch[0]]
        cur = ch[0]
        for lvl, c in enumerate(ch):
            blocks, attns = nn.ModuleList(), nn.ModuleList()
            for _ in range(cfg.resnet_blocks_per_level):
                blocks.append(ResBlock(cur, c, temb))
                attns.append(SelfAttention(c) if lvl in attn else nn.Identity())
                cur = c
                skip_ch.append(cur)
            self.down_blocks.append(blocks)
            self.down_attn.append(attns)
            if lvl < n_levels - 1:
                self.downsamplers.append(WaveletDownBlock(cur, cur, temb))
                skip_ch.append(cur)

        self.mid1 = ResBlock(cur, cur, temb)
        self.mid_attn = SelfAttention(cur)
        self.mid2 = ResBlock(cur, cur, temb)

        self.up_blocks = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        self.upsamplers = nn.ModuleList()
        for lvl in reversed(range(n_levels)):
            c = ch[lvl]
            blocks, attns = nn.ModuleList(), nn.ModuleList()
            for _ in range(cfg.resnet_blocks_per_level + 1):
                blocks.append(ResBlock(cur + skip_ch.pop(), c, temb))
                attns.append(SelfAttention(c) if lvl in attn else nn.Identity())
                cur = c
            self.up_blocks.append(blocks)
            self.up_attn.append(attns)
            if lvl > 0:
                self.upsamplers.append(WaveletUpBlock(cur, cur, temb))

        self.norm_out = nn.GroupNorm(_groups(cur), cur)
        self.conv_out = nn.Conv2d(cur, cfg.out_channels, 3, padding=1)

    def forward(self, x_t: torch.Tensor, x_lr: torch.Tensor, t) -> torch.Tensor:
        cfg = self.config
        squeeze = x_t.ndim == 3
        if squeeze:
            x_t, x_lr = x_t[None], x_lr[None]
        if x_t.shape != x_lr.shape:
            raise ValueError(f"x_t {tuple(x_t.shape)} and x_lr {tuple(x_lr.shape)} differ")
        if x_t.shape[1] + x_lr.shape[1] != cfg.in_channels:
            raise ValueError(f"expected {cfg.in_channels} input channels in total")
        h, w = x_t.shape[-2:]
        f = cfg.downsample_factor
        if h % f or w % f:
            raise ValueError(f"spatial size {h}x{w} is not divisible by {f}")
        t = torch.as_tensor(t).reshape(-1)
        if t.numel() == 1:
            t = t.expand(x_t.shape[0])
        if torch.any(t <= 0):
            raise IndexError(f"timesteps must be >= 1, got {t.tolist()}")

        temb = self.time_embed(t)
        hs = [self.conv_in(torch.cat([x_t, x_lr], dim=1))]
        hcur = hs[-1]
        for lvl, (blocks, attns) in enumerate(zip(self.down_blocks, self.down_attn)):
            for block, att in zip(blocks, attns):
                hcur = att(block(hcur, temb))
                hs.append(hcur)
            if lvl < len(self.downsamplers):
                hcur = self.downsamplers[lvl](hcur, temb)
                hs.append(hcur)

        hcur = self.mid2(self.mid_attn(self.mid1(hcur, temb)), temb)

        for i, (blocks, attns) in enumerate(zip(self.up_blocks, self.up_attn)):
            for block, att in zip(blocks, attns):
                hcur = att(block(torch.cat([hcur, hs.pop()], dim=1), temb))
            if i < len(self.upsamplers):
                hcur = self.upsamplers[i](hcur, temb)

        out = self.conv_out(F.silu(self.norm_out(hcur)))
        return out[0] if squeeze else out


class DownConvBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb_dim: int | None = None):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.temb = nn.Linear(temb_dim, cout) if temb_dim else None
        self.skip = nn.Conv2d(cin, cout, 1, bias=False)

    def forward(self, x, temb=None):
        h = self.conv1(F.leaky_relu(x, 0.2))
        if self.temb is not None:
            h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.leaky_relu(h, 0.2))
        out = (self.skip(x) + h) / math.sqrt(2.0)
        if min(out.shape[-2:]) >= 2:
            out = F.avg_pool2d(out, 2)
        return out


class Discriminator(nn.Module):
    """Scores ``(x_{t-1}, x_t, t)`` triples with one logit per sample.

    A stack of residual downsampling layers; the time embedding is injected
    into the first. Layers stop halving resolution once the map is 1x1, so
    the same depth works on small desk-scale packets.
    """

    def __init__(self, config: DiscriminatorConfig | None = None):
        super().__init__()
        self.config = cfg = config or DiscriminatorConfig()
        temb = cfg.time_embed_dim
        self.time_embed = TimeEmbedding(temb)
        chans = [cfg.base_channels * min(2 ** (i + 1), cfg.max_mult) for i in range(cfg.num_layers)]
        cur = cfg.base_channels * 2
        self.conv_in = nn.Conv2d(cfg.in_channels, cur, 1)
        self.layers = nn.ModuleList()
        for i, c in enumerate(chans):
            self.layers.append(DownConvBlock(cur, c, temb if i == 0 else None))
            cur = c
        self.conv_out = nn.Conv2d(cur, cur, 3, padding=1)
        self.head = nn.Linear(cur, 1)

    def forward(self, x_prev: torch.Tensor, x_t: torch.Tensor, t) -> torch.Tensor:
        squeeze = x_t.ndim == 3
        if squeeze:
            x_prev, x_t = x_prev[None], x_t[None]
        if x_prev.shape != x_t.shape:
            raise ValueError(f"x_prev {tuple(x_prev.shape)} and x_t {tuple(x_t.shape)} differ")
        t = torch.as_tensor(t).reshape(-1)
        if t.numel() == 1:
            t = t.expand(x_t.shape[0])
        temb = F.leaky_relu(self.time_embed(t), 0.2)
        h = self.conv_in(torch.cat([x_prev, x_t], dim=1))
        for i, layer in enumerate(self.layers):
            h = layer(h, temb if i == 0 else None)
        h = self.conv_out(F.leaky_relu(h, 0.2))
        h = F.leaky_relu(h, 0.2).sum(dim=(2, 3))
        logit = self.head(h).squeeze(-1)
        return logit[0] if squeeze else logit


def count_parameters(*modules: nn.Module) -> int:
    """Total number of trainable scalars across ``modules``."""
    return sum(p.numel() for m in modules for p in m.parameters() if p.requires_grad)


def build_models(gen_cfg: GeneratorConfig, disc_cfg: DiscriminatorConfig, seed: int = 0):
    """Create ``(generator, discriminator)`` with seed-determined initial weights."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        gen = Generator(gen_cfg)
        disc = Discriminator(disc_cfg)
    return gen, disc


def config_dict(cfg) -> dict:
    return asdict(cfg)
