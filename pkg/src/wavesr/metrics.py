"""PSNR / SSIM on [0, 1] RGB images and sample export for external scorers."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .datapipe import SamplePair, denormalize, quantize, save_png, to_float_image, to_image
from .diffusion import DiffusionSchedule, NoiseState, sample

__all__ = ["PSNR_CAP", "MetricReport", "psnr", "ssim", "export_samples", "evaluate_pairs"]

#: PSNR reported for identical images.
PSNR_CAP = 100.0

_K1, _K2 = 0.01, 0.03
_WIN, _SIGMA = 11, 1.5


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


def _gaussian_window() -> np.ndarray:
    x = np.arange(_WIN) - (_WIN - 1) / 2
    g = np.exp(-(x ** 2) / (2 * _SIGMA ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    rows = sliding_window_view(img, len(g), axis=0) @ g
    return sliding_window_view(rows, len(g), axis=1) @ g


def _gray(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x.mean(axis=0) if x.ndim == 3 else x


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM of the channel-mean grayscale, 11x11 Gaussian window (sigma 1.5), L=1."""
    a, b = _gray(a), _gray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape) < _WIN:
        raise ValueError(f"image {a.shape} is smaller than the {_WIN}x{_WIN} SSIM window")
    if np.array_equal(a, b):
        return 1.0
    c1, c2 = _K1 ** 2, _K2 ** 2
    g = _gaussian_window()
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a ** 2
    var_b = _filter_valid(b * b, g) - mu_b ** 2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class MetricReport:
    psnr_db: float
    ssim: float
    n_images: int
    rows: list[dict] = field(default_factory=list)

    @classmethod
    def from_rows(cls, rows: list[dict]) -> "MetricReport":
        if not rows:
            raise ValueError("a metric report needs at least one image")
        return cls(psnr_db=float(np.mean([r["psnr"] for r in rows])),
                   ssim=float(np.mean([r["ssim"] for r in rows])),
                   n_images=len(rows), rows=rows)

    def aggregate(self) -> dict:
        agg = {"id": "mean", "psnr": self.psnr_db, "ssim": self.ssim}
        for k in ("bicubic_psnr", "bicubic_ssim"):
            if self.rows and k in self.rows[0]:
                agg[k] = float(np.mean([r[k] for r in self.rows]))
        return agg

    def write_csv(self, path) -> None:
        fields = list(self.rows[0].keys())
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=fields)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in self.aggregate().items()})


def _super_resolve(gen, pair: SamplePair, sched: DiffusionSchedule, noise_state: NoiseState):
    x_lr = pair.x_lr
    batched = x_lr.with_data(x_lr.data[None])
    out = sample(gen, batched, sched, noise_state)
    return out.with_data(out.data[0])


def evaluate_pairs(gen, pairs: list[SamplePair], sched: DiffusionSchedule, seed: int = 0,
                   out_dir=None) -> MetricReport:
    """Super-resolve every pair, score it against its HR image, optionally export PNGs.

    Each image gets its own noise stream keyed by ``(seed, index)``, so results
    do not depend on evaluation order.
    """
    if not pairs:
        raise ValueError("no pairs to evaluate")
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    was_training = getattr(gen, "training", False)
    if hasattr(gen, "eval"):
        gen.eval()
    try:
        for i, pair in enumerate(pairs):
            sr_packet = _super_resolve(gen, pair, sched, NoiseState(seed, i * 1_000_003))
            sr = to_float_image(sr_packet)
            hr = denormalize(pair.hr_image)
            bic = to_float_image(pair.x_lr)
            pid = pair.id or f"{i:05d}"
            rows.append({
                "id": pid, "psnr": psnr(sr, hr), "ssim": ssim(sr, hr),
                "bicubic_psnr": psnr(bic, hr), "bicubic_ssim": ssim(bic, hr),
            })
            if out_dir is not None:
                save_png(out_dir / f"{pid}_sr.png", to_image(sr_packet))
                save_png(out_dir / f"{pid}_hr.png", quantize(hr))
                save_png(out_dir / f"{pid}_bicubic.png", to_image(pair.x_lr))
    finally:
        if was_training:
            gen.train()
    return MetricReport.from_rows(rows)


def export_samples(gen, pairs: list[SamplePair], out_dir, sched: DiffusionSchedule,
                   seed: int = 0) -> list[dict]:
    """Write ``{id}_sr.png``, ``{id}_hr.png`` and ``{id}_bicubic.png`` per pair.

    Returns the manifest rows (also written to ``out_dir/manifest.json``).
    """
    out_dir = Path(out_dir)
    report = evaluate_pairs(gen, pairs, sched, seed=seed, out_dir=out_dir)
    manifest = [
        {"id": r["id"], "sr": str(out_dir / f"{r['id']}_sr.png"),
         "hr": str(out_dir / f"{r['id']}_hr.png"),
         "bicubic": str(out_dir / f"{r['id']}_bicubic.png")}
        for r in report.rows
    ]
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest
