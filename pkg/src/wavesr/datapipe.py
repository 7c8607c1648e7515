"""LR/HR pair construction, dataset ingestion and image export.

Images inside the pipeline are float arrays of shape ``(3, H, W)``. Raw
images are in [0, 1]; model-facing tensors are mapped to [-1, 1].
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
from PIL import Image

from .wavelet import WaveletPacket, dwt2d, idwt2d

__all__ = [
    "SamplePair",
    "DatasetManifest",
    "bicubic_resample",
    "normalize",
    "denormalize",
    "make_pair",
    "pair_from_lr",
    "to_image",
    "to_float_image",
    "quantize",
    "load_image",
    "save_png",
    "load_dataset",
    "load_split",
    "synthetic_image",
]

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}


@dataclass
class SamplePair:
    x0: WaveletPacket
    x_lr: WaveletPacket
    hr_image: np.ndarray
    lr_image: np.ndarray
    id: str = ""


def _cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    x = np.abs(x)
    out = np.zeros_like(x)
    m1 = x <= 1
    m2 = (x > 1) & (x < 2)
    out[m1] = ((a + 2) * x[m1] - (a + 3)) * x[m1] ** 2 + 1
    out[m2] = ((x[m2] - 5) * x[m2] + 8) * x[m2] * a - 4 * a
    return out


def _weights(n_in: int, n_out: int) -> np.ndarray:
    """Dense ``(n_out, n_in)`` Catmull-Rom resampling matrix.

    Pixel centres are aligned; on downscaling the kernel is stretched by the
    scale factor (antialiasing). Out-of-range taps are clamped to the edge.
    """
    scale = n_in / n_out
    support = max(scale, 1.0)
    centers = (np.arange(n_out) + 0.5) * scale
    lo = np.floor(centers - 2 * support).astype(int)
    taps = int(np.ceil(4 * support)) + 2
    idx = lo[:, None] + np.arange(taps)[None, :]
    w = _cubic((idx + 0.5 - centers[:, None]) / support)
    w /= w.sum(axis=1, keepdims=True)
    mat = np.zeros((n_out, n_in))
    np.add.at(mat, (np.repeat(np.arange(n_out), taps), np.clip(idx, 0, n_in - 1).ravel()), w.ravel())
    return mat


def bicubic_resample(image: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Separable Catmull-Rom resize of a ``(..., H, W)`` array."""
    if target_h <= 0 or target_w <= 0:
        raise ValueError(f"target size must be positive, got {target_h}x{target_w}")
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[-2:]
    if (h, w) == (target_h, target_w):
        return image.copy()
    wh = _weights(h, target_h)
    ww = _weights(w, target_w)
    return np.einsum("oh,...hw,pw->...op", wh, image, ww)


def normalize(x):
    return 2.0 * x - 1.0


def denormalize(x):
    return (x + 1.0) / 2.0


def _packet(img: np.ndarray) -> WaveletPacket:
    return dwt2d(torch.as_tensor(normalize(img), dtype=torch.float32), scale=True)


def make_pair(hr_image: np.ndarray, scale_factor: int = 8, id: str = "") -> SamplePair:
    """Build the training pair for an HR image in [0, 1] of shape (3, H, W).

    The LR image is the antialiased bicubic downscale; the condition packet is
    the Haar transform of its bicubic upscale back to H x W.
    """
    hr = np.asarray(hr_image, dtype=np.float64)
    if hr.ndim != 3:
        raise ValueError(f"expected (C, H, W) image, got shape {hr.shape}")
    h, w = hr.shape[-2:]
    if h % (2 * scale_factor) or w % (2 * scale_factor):
        raise ValueError(f"image {h}x{w} is not divisible by 2*scale_factor={2 * scale_factor}")
    if hr.min() < 0 or hr.max() > 1:
        raise ValueError(f"HR image values must lie in [0, 1], got [{hr.min()}, {hr.max()}]")
    lr = np.clip(bicubic_resample(hr, h // scale_factor, w // scale_factor), 0.0, 1.0)
    return pair_from_lr(lr, scale_factor, hr=hr, id=id)


def pair_from_lr(lr_image: np.ndarray, scale_factor: int, hr: np.ndarray | None = None,
                 id: str = "") -> SamplePair:
    """Conditioning pair for a given LR image; ``x0`` is zeros when ``hr`` is unknown."""
    lr = np.asarray(lr_image, dtype=np.float64)
    h, w = lr.shape[-2] * scale_factor, lr.shape[-1] * scale_factor
    if h % 2 or w % 2:
        raise ValueError(f"upscaled size {h}x{w} must be even")
    lr_up = bicubic_resample(lr, h, w)
    x_lr = _packet(lr_up)
    if hr is None:
        x0 = x_lr.with_data(torch.zeros_like(x_lr.data))
        hr_img = np.zeros((lr.shape[0], h, w))
    else:
        x0 = _packet(hr)
        hr_img = normalize(hr)
    return SamplePair(x0=x0, x_lr=x_lr, hr_image=hr_img, lr_image=normalize(lr), id=id)


def to_float_image(packet) -> np.ndarray:
    """Packet to a (3, H, W) float image in [0, 1] (clamped, not quantized)."""
    img = idwt2d(packet).detach().to(torch.float64).cpu().numpy()
    return np.clip(denormalize(img), 0.0, 1.0)


def to_image(packet: WaveletPacket) -> np.ndarray:
    """Packet to an 8-bit ``(3, H, W)`` image, rounding half away from zero."""
    data = packet.data if isinstance(packet, WaveletPacket) else packet
    if data.shape[-3] != 12:
        raise ValueError(f"expected a 12-channel packet, got {data.shape[-3]} channels")
    if isinstance(packet, WaveletPacket) and not packet.scaled:
        raise ValueError("to_image expects a scaled packet")
    v = to_float_image(packet) * 255.0
    return np.floor(v + 0.5).astype(np.uint8)


def quantize(img: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def load_image(path, size: int | None = None) -> np.ndarray:
    """Read an RGB image as a (3, H, W) float array in [0, 1].

    With ``size``, the image is centre-cropped to a square and resized.
    """
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    img = arr.transpose(2, 0, 1)
    if size is not None:
        h, w = img.shape[-2:]
        s = min(h, w)
        top, left = (h - s) // 2, (w - s) // 2
        img = img[:, top:top + s, left:left + s]
        img = np.clip(bicubic_resample(img, size, size), 0.0, 1.0)
    return img


def save_png(path, image) -> None:
    """Write a (3, H, W) uint8 or [0, 1] float image."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = quantize(img)
    Image.fromarray(np.ascontiguousarray(img.transpose(1, 2, 0))).save(path, format="PNG")


@dataclass
class DatasetManifest:
    root: str
    files: list[str] = field(default_factory=list)
    seed: int = 0
    split_ratios: tuple[float, ...] = (0.9, 0.1)
    hr_size: int = 128
    scale_factor: int = 8
    rejects: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.split_ratios = tuple(float(r) for r in self.split_ratios)
        if any(r < 0 for r in self.split_ratios) or not np.isclose(sum(self.split_ratios), 1.0):
            raise ValueError(f"split ratios must be non-negative and sum to 1, got {self.split_ratios}")

    @classmethod
    def from_directory(cls, root, **kwargs) -> "DatasetManifest":
        root = Path(root)
        if not root.is_dir():
            raise FileNotFoundError(f"dataset root {root} does not exist")
        files = sorted(str(p.relative_to(root)) for p in root.rglob("*")
                       if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
        return cls(root=str(root), files=files, **kwargs)

    def files_hash(self) -> str:
        return hashlib.sha256("\n".join(self.files).encode()).hexdigest()

    def splits(self) -> list[list[str]]:
        """Seed-determined disjoint, exhaustive partition of ``files``."""
        n = len(self.files)
        perm = np.random.default_rng(self.seed).permutation(n)
        bounds = np.floor(np.cumsum((0.0,) + self.split_ratios) * n + 1e-9).astype(int)
        bounds[-1] = n
        if n and bounds[1] == 0:
            bounds[1] = 1
        parts = []
        for a, b in zip(bounds[:-1], bounds[1:]):
            b = max(a, b)
            parts.append([self.files[i] for i in sorted(perm[a:b])])
        return parts

    def split(self, name: str) -> list[str]:
        names = ("train", "test") if len(self.split_ratios) == 2 else ("train", "val", "test")
        return self.splits()[names.index(name)]

    def to_dict(self) -> dict:
        return {
            "root": self.root, "seed": self.seed, "split_ratios": list(self.split_ratios),
            "hr_size": self.hr_size, "scale_factor": self.scale_factor,
            "files_sha256": self.files_hash(), "files": self.files,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        d = json.loads(Path(path).read_text())
        m = cls(root=d["root"], files=list(d["files"]), seed=d["seed"],
                split_ratios=tuple(d["split_ratios"]), hr_size=d["hr_size"],
                scale_factor=d["scale_factor"])
        if "files_sha256" in d and d["files_sha256"] != m.files_hash():
            raise ValueError(f"manifest {path}: file list hash mismatch")
        return m


def load_split(manifest: DatasetManifest, split: str = "train") -> list[SamplePair]:
    """Decode every image of a split into pairs (undecodable files are rejected)."""
    pairs = []
    for rel in manifest.split(split):
        try:
            img = load_image(os.path.join(manifest.root, rel), manifest.hr_size)
        except (OSError, ValueError) as exc:
            log.warning("skipping undecodable image %s: %s", rel, exc)
            manifest.rejects.append(rel)
            continue
        pairs.append(make_pair(img, manifest.scale_factor, id=Path(rel).stem))
    if not pairs:
        raise RuntimeError(f"split {split!r} of {manifest.root} yielded no images")
    return pairs


def load_dataset(manifest: DatasetManifest, split: str = "train",
                 epochs: int | None = None) -> Iterator[SamplePair]:
    """Yield pairs in a shuffled order that depends only on ``(seed, epoch)``.

    Cycles forever when ``epochs`` is None.
    """
    pairs = load_split(manifest, split)
    epoch = 0
    while epochs is None or epoch < epochs:
        order = np.random.default_rng([manifest.seed, epoch]).permutation(len(pairs))
        for i in order:
            yield pairs[i]
        epoch += 1


def synthetic_image(seed: int, size: int = 32) -> np.ndarray:
    """Deterministic RGB test image in [0, 1]: smooth shading, hard-edged shapes, fine stripes."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.empty((3, size, size))
    for c in range(3):
        fx, fy = rng.uniform(0.5, 2.5, 2)
        px, py = rng.uniform(0, 2 * np.pi, 2)
        img[c] = 0.5 + 0.25 * np.sin(2 * np.pi * fx * xx + px) * np.cos(2 * np.pi * fy * yy + py)
    for _ in range(3):
        cx, cy, r = rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.1, 0.25)
        disk = (xx - cx) ** 2 + (yy - cy) ** 2 < r * r
        img[:, disk] = rng.uniform(0, 1, 3)[:, None]
    x0, y0 = rng.uniform(0, 0.5, 2)
    box = (xx > x0) & (xx < x0 + 0.4) & (yy > y0) & (yy < y0 + 0.4)
    period = rng.integers(2, 5)
    stripes = (np.floor(xx * size / period) % 2 == 0) if rng.random() < 0.5 else \
        (np.floor(yy * size / period) % 2 == 0)
    img[:, box & stripes] *= 0.3
    return np.clip(img, 0.0, 1.0)
