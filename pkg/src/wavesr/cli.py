"""Command-line entry point: ``wavesr {train,sample,eval,dwt-roundtrip}``.

Exit codes: 0 success, 2 usage or input error, 3 numerical failure.
``WAVESR_OUTPUT_ROOT`` is prepended to relative output directories.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
from pathlib import Path

import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, parse_override
from .datapipe import (DatasetManifest, load_dataset, load_image, load_split, make_pair,
                       pair_from_lr, save_png, to_image)
from .diffusion import ConfigError, NoiseState, sample
from .metrics import MetricReport, evaluate_pairs
from .training import NumericalError, TrainState, init_state, stack_batch, train_step
from .wavelet import BANDS, dwt2d, idwt2d

log = logging.getLogger("wavesr")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
OUTPUT_ROOT_ENV = "WAVESR_OUTPUT_ROOT"
METRIC_FIELDS = ["iteration", "d_loss", "g_adv", "rec", "r1", "wall_clock"]


def _resolve_out(path: str) -> Path:
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def _load_run_config(config_path, overrides, seed) -> RunConfig:
    cfg = RunConfig.load(config_path) if config_path else RunConfig()
    ov = dict(parse_override(o) for o in overrides or [])
    if seed is not None:
        ov["seed"] = seed
        ov["train.seed"] = seed
    return cfg.with_overrides(ov) if ov else cfg


def _batches(manifest: DatasetManifest, batch_size: int):
    it = load_dataset(manifest, "train")
    while True:
        yield stack_batch([next(it) for _ in range(batch_size)])


def cmd_train(config_path=None, overrides=(), seed=None) -> int:
    try:
        cfg = _load_run_config(config_path, overrides, seed)
    except ConfigError as exc:
        log.error("invalid configuration: %s", exc)
        return EXIT_USAGE
    sched = cfg.diffusion.schedule()
    try:
        d = cfg.data
        manifest = DatasetManifest.from_directory(d.root, seed=d.seed, split_ratios=d.split_ratios,
                                                  hr_size=d.hr_size, scale_factor=d.scale_factor)
        batches = _batches(manifest, cfg.train.batch_size)
        first = next(batches)
    except (FileNotFoundError, RuntimeError) as exc:
        log.error("dataset unavailable: %s", exc)
        return EXIT_USAGE

    out = _resolve_out(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    manifest.save(out / "manifest.json")
    ckpt_path = out / "checkpoint.pt"
    metrics_path = out / "metrics.csv"

    state = init_state(cfg.gen, cfg.disc, cfg.train)
    t0 = time.perf_counter()
    with open(metrics_path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        if fh.tell() == 0:
            writer.writeheader()
        batch = first
        while state.iteration < cfg.train.iterations:
            try:
                train_step(state, batch, sched, cfg.train)
            except NumericalError as exc:
                log.error("numerical failure at iteration %s in %s: %s; last good checkpoint: %s",
                          exc.iteration, exc.loss_name, exc, ckpt_path if ckpt_path.exists() else "none")
                return EXIT_NUMERIC
            row = {"iteration": state.iteration, **state.last_losses,
                   "wall_clock": round(time.perf_counter() - t0, 4)}
            writer.writerow(row)
            if state.iteration % cfg.checkpoint_interval == 0 or state.iteration == cfg.train.iterations:
                fh.flush()
                save_checkpoint(ckpt_path, state, cfg, sched)
            if state.iteration < cfg.train.iterations:
                batch = next(batches)
    if not ckpt_path.exists():
        save_checkpoint(ckpt_path, state, cfg, sched)
    log.info("training finished after %d iterations; checkpoint %s", state.iteration, ckpt_path)
    return EXIT_OK


def _pick_model(state: TrainState, use_ema: bool):
    model = state.ema if use_ema else state.gen
    model.eval()
    return model


def cmd_sample(checkpoint, inputs, out_dir, use_ema=True, seed=None, mode="auto") -> int:
    state, cfg, sched = load_checkpoint(checkpoint)
    s, hr_size = cfg.data.scale_factor, cfg.data.hr_size
    gen = _pick_model(state, use_ema)
    out = _resolve_out(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.seed if seed is None else seed
    for k, path in enumerate(inputs):
        try:
            img = load_image(path)
        except OSError as exc:
            log.error("cannot decode %s: %s", path, exc)
            return EXIT_USAGE
        h, w = img.shape[-2:]
        kind = mode
        if kind == "auto":
            kind = "lr" if (h * s, w * s) == (hr_size, hr_size) else "hr"
        try:
            if kind == "hr":
                pair = make_pair(img, s, id=Path(path).stem)
            else:
                if (h * s) % 2 or (w * s) % 2:
                    raise ValueError(f"LR image {h}x{w} upscaled by {s} has odd size")
                pair = pair_from_lr(img, s, id=Path(path).stem)
            f = 2 * cfg.gen.downsample_factor
            H, W = pair.x_lr.shape[-2] * 2, pair.x_lr.shape[-1] * 2
            if H % f or W % f:
                raise ValueError(f"output size {H}x{W} must be divisible by {f} for this generator")
        except ValueError as exc:
            log.error("%s: %s", path, exc)
            return EXIT_USAGE
        x_lr = pair.x_lr.with_data(pair.x_lr.data[None])
        sr = sample(gen, x_lr, sched, NoiseState(seed, k * 1_000_003))
        target = out / f"{Path(path).stem}_sr.png"
        save_png(target, to_image(sr.with_data(sr.data[0])))
        print(target)
    return EXIT_OK


def cmd_eval(checkpoint, manifest_path, out_csv, use_ema=True, seed=None, split="test",
             png_dir=None) -> int:
    state, cfg, sched = load_checkpoint(checkpoint)
    mpath = Path(manifest_path)
    try:
        if mpath.is_dir():
            d = cfg.data
            manifest = DatasetManifest.from_directory(mpath, seed=d.seed, split_ratios=d.split_ratios,
                                                      hr_size=d.hr_size, scale_factor=d.scale_factor)
        else:
            manifest = DatasetManifest.load(mpath)
        if not manifest.split(split):
            raise RuntimeError(f"split {split!r} is empty")
        pairs = load_split(manifest, split)
    except (FileNotFoundError, RuntimeError, ValueError) as exc:
        log.error("cannot evaluate: %s", exc)
        return EXIT_USAGE
    gen = _pick_model(state, use_ema)
    seed = cfg.seed if seed is None else seed
    out_csv = _resolve_out(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    png_dir = _resolve_out(png_dir) if png_dir else out_csv.parent / (out_csv.stem + "_samples")
    report: MetricReport = evaluate_pairs(gen, pairs, sched, seed=seed, out_dir=png_dir)
    report.write_csv(out_csv)
    agg = report.aggregate()
    print(f"model    PSNR {agg['psnr']:.3f} dB  SSIM {agg['ssim']:.4f}  ({report.n_images} images)")
    print(f"bicubic  PSNR {agg['bicubic_psnr']:.3f} dB  SSIM {agg['bicubic_ssim']:.4f}")
    return EXIT_OK


def cmd_dwt_roundtrip(image_path) -> int:
    try:
        img = load_image(image_path)
    except OSError as exc:
        log.error("cannot decode %s: %s", image_path, exc)
        return EXIT_USAGE
    x = torch.as_tensor(2.0 * img - 1.0)
    try:
        packet = dwt2d(x, scale=False)
    except ValueError as exc:
        log.error("%s: %s", image_path, exc)
        return EXIT_USAGE
    err = float((idwt2d(packet) - x).abs().max())
    err_scaled = float((idwt2d(dwt2d(x, scale=True)) - x).abs().max())
    total = float(packet.data.pow(2).sum())
    print(f"max reconstruction error: {max(err, err_scaled):.3e}")
    for name in BANDS:
        share = float(packet.band(name).pow(2).sum()) / total if total > 0 else float("nan")
        print(f"{name} energy share: {share:.4f}")
    return EXIT_OK if max(err, err_scaled) < 1e-5 else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wavesr", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=None, help="override the configured seed")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help="flat dotted-key JSON config")
    t.add_argument("overrides", nargs="*", metavar="KEY=VALUE")

    s = sub.add_parser("sample", help="super-resolve images")
    s.add_argument("checkpoint")
    s.add_argument("inputs", nargs="+", help="LR images, or HR images to degrade first")
    s.add_argument("-o", "--out-dir", default="samples")
    s.add_argument("--mode", choices=("auto", "lr", "hr"), default="auto")
    ema = s.add_mutually_exclusive_group()
    ema.add_argument("--use-ema", dest="use_ema", action="store_true", default=True)
    ema.add_argument("--no-ema", dest="use_ema", action="store_false")

    e = sub.add_parser("eval", help="PSNR/SSIM on a dataset split")
    e.add_argument("checkpoint")
    e.add_argument("manifest", help="manifest.json written by train, or an image directory")
    e.add_argument("out_csv")
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--png-dir", default=None)
    e.add_argument("--no-ema", dest="use_ema", action="store_false", default=True)

    r = sub.add_parser("dwt-roundtrip", help="check Haar perfect reconstruction on an image")
    r.add_argument("image")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.use_deterministic_algorithms(True, warn_only=True)
    try:
        if args.command == "train":
            return cmd_train(args.config, args.overrides, args.seed)
        if args.command == "sample":
            return cmd_sample(args.checkpoint, args.inputs, args.out_dir, args.use_ema, args.seed, args.mode)
        if args.command == "eval":
            return cmd_eval(args.checkpoint, args.manifest, args.out_csv, args.use_ema, args.seed,
                            args.split, args.png_dir)
        return cmd_dwt_roundtrip(args.image)
    except (ConfigError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
