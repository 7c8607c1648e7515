"""Single-file checkpoints: named parameter trees, optimizer moments, schedule, config echo."""
from __future__ import annotations

import hashlib
import io
import os
from pathlib import Path

import torch

from .config import RunConfig
from .diffusion import DiffusionSchedule
from .training import TrainState, init_state

__all__ = ["FORMAT_VERSION", "save_checkpoint", "load_checkpoint", "file_sha256"]

FORMAT_VERSION = 1


def save_checkpoint(path, state: TrainState, cfg: RunConfig, sched: DiffusionSchedule) -> None:
    """Atomically write a checkpoint.

    The config echo omits ``output_dir`` so that identical runs written to
    different directories produce byte-identical files.
    """
    flat = cfg.to_flat()
    flat.pop("output_dir")
    payload = {
        "version": FORMAT_VERSION,
        "config": flat,
        "schedule": sched.to_dict(),
        "state": state.state_dict(),
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path):
    """Return ``(state, run_config, schedule)``; fails on name/shape mismatch."""
    payload = torch.load(path, map_location="cpu", weights_only=True)
    version = payload.get("version")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version!r}")
    flat = dict(payload["config"])
    flat.setdefault("output_dir", str(Path(path).parent))
    cfg = RunConfig.from_flat(flat)
    sched = DiffusionSchedule.from_dict(payload["schedule"])
    state = init_state(cfg.gen, cfg.disc, cfg.train)
    state.load_state_dict(payload["state"])
    return state, cfg, sched


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
