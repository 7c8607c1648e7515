"""Adversarial training of the wavelet diffusion GAN.

Discriminator loss is the bounded non-saturating form on logits,
``softplus(-real) + softplus(fake)``; the generator minimises
``softplus(-fake) + lambda_rec * |x0_hat - x0|_1``. R1 is applied lazily
on real ``x_{t-1}`` every ``lazy_reg_interval`` iterations.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion import (ConfigError, DiffusionSchedule, NoiseState, posterior_sample,
                        q_sample_pair)
from .networks import Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, build_models

__all__ = [
    "NumericalError",
    "TrainConfig",
    "TrainState",
    "d_loss",
    "d_loss_literal",
    "g_adv_loss",
    "rec_loss",
    "total_g_loss",
    "r1_penalty",
    "ema_update",
    "init_state",
    "train_step",
    "stack_batch",
]

log = logging.getLogger(__name__)


class NumericalError(FloatingPointError):
    """A loss became NaN or infinite."""

    def __init__(self, message: str, iteration: int | None = None, loss_name: str | None = None):
        super().__init__(message)
        self.iteration = iteration
        self.loss_name = loss_name


@dataclass
class TrainConfig:
    lr_gen: float = 2e-4
    lr_disc: float = 1e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.9
    adam_eps: float = 1e-8
    ema_decay: float = 0.9999
    batch_size: int = 64
    iterations: int = 25_000
    lambda_rec: float = 1.0
    r1_gamma: float = 1.0
    lazy_reg_interval: int = 10
    literal_d_loss: bool = False
    seed: int = 0

    def __post_init__(self):
        if min(self.lr_gen, self.lr_disc) <= 0:
            raise ConfigError("learning rates must be positive")
        if not 0 <= self.ema_decay < 1:
            raise ConfigError(f"ema_decay must lie in [0, 1), got {self.ema_decay}")
        if self.lazy_reg_interval < 1:
            raise ConfigError("lazy_reg_interval must be >= 1")
        if self.batch_size < 1 or self.iterations < 0:
            raise ConfigError("batch_size must be >= 1 and iterations >= 0")
        if self.lambda_rec < 0 or self.r1_gamma < 0:
            raise ConfigError("loss weights must be non-negative")


def _check_finite(x: torch.Tensor, what: str):
    if not torch.all(torch.isfinite(x)):
        raise NumericalError(f"non-finite {what}", loss_name=what)


def d_loss(real_logit: torch.Tensor, fake_logit: torch.Tensor) -> torch.Tensor:
    """``-log D(real) - log(1 - D(fake))`` written stably on logits, batch mean."""
    real_logit, fake_logit = torch.as_tensor(real_logit), torch.as_tensor(fake_logit)
    _check_finite(real_logit, "real logit")
    _check_finite(fake_logit, "fake logit")
    return (F.softplus(-real_logit) + F.softplus(fake_logit)).mean()


def d_loss_literal(real_logit: torch.Tensor, fake_logit: torch.Tensor) -> torch.Tensor:
    """``-log D(real) + log D(fake)``; unbounded below, kept for comparison runs."""
    real_logit, fake_logit = torch.as_tensor(real_logit), torch.as_tensor(fake_logit)
    _check_finite(real_logit, "real logit")
    _check_finite(fake_logit, "fake logit")
    return (F.softplus(-real_logit) - F.softplus(-fake_logit)).mean()


def g_adv_loss(fake_logit: torch.Tensor) -> torch.Tensor:
    """``-log D(fake) = softplus(-fake)``, batch mean."""
    fake_logit = torch.as_tensor(fake_logit)
    _check_finite(fake_logit, "fake logit")
    return F.softplus(-fake_logit).mean()


def rec_loss(x0_hat: torch.Tensor, x0: torch.Tensor) -> torch.Tensor:
    """Mean absolute error between predicted and target packets."""
    if x0_hat.shape != x0.shape:
        raise ValueError(f"shape mismatch {tuple(x0_hat.shape)} vs {tuple(x0.shape)}")
    return (x0_hat - x0).abs().mean()


def total_g_loss(adv, rec, lambda_rec: float):
    return adv + lambda_rec * rec


def r1_penalty(real_prev: torch.Tensor, disc, gamma: float, x_t=None, t=None) -> torch.Tensor:
    """``gamma/2 * E ||grad_{x_{t-1}} D(x_{t-1}, x_t, t)||^2`` over the batch.

    ``disc`` is called as ``disc(real_prev, x_t, t)``, or as ``disc(real_prev)``
    when ``x_t`` is omitted.
    """
    if not real_prev.requires_grad:
        raise ConfigError("r1_penalty needs real inputs with requires_grad=True")
    out = disc(real_prev) if x_t is None else disc(real_prev, x_t, t)
    if not out.requires_grad:
        return real_prev.sum() * 0.0
    (grad,) = torch.autograd.grad(out.sum(), real_prev, create_graph=True, allow_unused=True)
    if grad is None:
        return real_prev.sum() * 0.0
    batched = grad.ndim > 3
    sq = grad.pow(2).flatten(1).sum(1) if batched else grad.pow(2).sum()
    return 0.5 * gamma * sq.mean()


@torch.no_grad()
def ema_update(ema_params, params, decay: float):
    """In place ``ema <- decay * ema + (1 - decay) * params``; returns ``ema_params``.

    Accepts modules or matching iterables of tensors. Buffers of modules are
    copied verbatim.
    """
    if isinstance(ema_params, nn.Module):
        e_named = dict(ema_params.named_parameters())
        p_named = dict(params.named_parameters())
        if e_named.keys() != p_named.keys():
            raise ValueError("EMA and live parameter trees have different names")
        pairs = [(e_named[k], p_named[k]) for k in e_named]
        for eb, pb in zip(ema_params.buffers(), params.buffers()):
            eb.copy_(pb)
    else:
        ema_list, p_list = list(ema_params), list(params)
        if len(ema_list) != len(p_list):
            raise ValueError("EMA and live parameter lists differ in length")
        pairs = list(zip(ema_list, p_list))
    for e, p in pairs:
        if e.shape != p.shape:
            raise ValueError(f"EMA shape {tuple(e.shape)} != parameter shape {tuple(p.shape)}")
        e.mul_(decay).add_(p, alpha=1.0 - decay)
    return ema_params


class TrainState:
    """Everything that evolves during training.

    ``r1_count`` counts how often the lazy R1 penalty was actually evaluated.
    """

    def __init__(self, gen: Generator, disc: Discriminator, cfg: TrainConfig,
                 noise_state: NoiseState | None = None):
        self.gen = gen
        self.disc = disc
        self.ema = copy.deepcopy(gen).requires_grad_(False)
        self.opt_g = torch.optim.Adam(gen.parameters(), lr=cfg.lr_gen,
                                      betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_eps)
        self.opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr_disc,
                                      betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_eps)
        self.iteration = 0
        self.r1_count = 0
        self.noise_state = noise_state or NoiseState(cfg.seed)
        self.last_losses: dict[str, float] = {}

    def state_dict(self) -> dict:
        return {
            "gen": self.gen.state_dict(),
            "disc": self.disc.state_dict(),
            "ema": self.ema.state_dict(),
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "iteration": self.iteration,
            "r1_count": self.r1_count,
            "noise_state": self.noise_state.state_dict(),
        }

    def load_state_dict(self, d: dict):
        for name in ("gen", "disc", "ema"):
            _load_strict(getattr(self, name), d[name], name)
        self.opt_g.load_state_dict(d["opt_g"])
        self.opt_d.load_state_dict(d["opt_d"])
        self.iteration = int(d["iteration"])
        self.r1_count = int(d.get("r1_count", 0))
        self.noise_state = NoiseState.from_state(d["noise_state"])


def _load_strict(module: nn.Module, state: dict, what: str):
    own = module.state_dict()
    missing = own.keys() - state.keys()
    extra = state.keys() - own.keys()
    if missing or extra:
        raise ValueError(f"{what}: parameter names disagree (missing={sorted(missing)[:5]}, "
                         f"unexpected={sorted(extra)[:5]})")
    for k, v in own.items():
        if tuple(v.shape) != tuple(state[k].shape):
            raise ValueError(f"{what}.{k}: shape {tuple(state[k].shape)} != expected {tuple(v.shape)}")
    module.load_state_dict(state)


def init_state(gen_cfg: GeneratorConfig, disc_cfg: DiscriminatorConfig, cfg: TrainConfig) -> TrainState:
    gen, disc = build_models(gen_cfg, disc_cfg, seed=cfg.seed)
    return TrainState(gen, disc, cfg)


def stack_batch(batch) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack a list of SamplePair into ``(x0, x_lr)`` tensors of shape (B, 12, h, w)."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    for p in batch:
        if not (p.x0.scaled and p.x_lr.scaled):
            raise ValueError(f"pair {p.id!r} holds unscaled packets")
    x0 = torch.stack([p.x0.data for p in batch])
    x_lr = torch.stack([p.x_lr.data for p in batch])
    return x0, x_lr


def _finite_or_raise(value: torch.Tensor, name: str, iteration: int):
    if not torch.isfinite(value):
        raise NumericalError(f"{name} is {value.item()} at iteration {iteration}",
                             iteration=iteration, loss_name=name)


def train_step(state: TrainState, batch, sched: DiffusionSchedule, cfg: TrainConfig) -> TrainState:
    """One discriminator update, one generator update, one EMA update."""
    try:
        return _train_step(state, batch, sched, cfg)
    except NumericalError as exc:
        if exc.iteration is None:
            exc.iteration = state.iteration
        raise


def _train_step(state: TrainState, batch, sched: DiffusionSchedule, cfg: TrainConfig) -> TrainState:
    x0, x_lr = batch if isinstance(batch, tuple) else stack_batch(batch)
    gen, disc, ns, it = state.gen, state.disc, state.noise_state, state.iteration
    b = x0.shape[0]

    t = ns.randint(1, sched.T, (b,))
    x_prev, x_t = q_sample_pair(x0, t, sched, ns)

    # discriminator
    disc.requires_grad_(True)
    state.opt_d.zero_grad(set_to_none=True)
    apply_r1 = it % cfg.lazy_reg_interval == 0
    real_in = x_prev.detach().requires_grad_(apply_r1)
    real_logit = disc(real_in, x_t, t)
    with torch.no_grad():
        x0_hat = gen(x_t, x_lr, t)
        fake_prev = posterior_sample(x0_hat, x_t, t, sched, ns)
    fake_logit = disc(fake_prev, x_t, t)
    errd = (d_loss_literal if cfg.literal_d_loss else d_loss)(real_logit, fake_logit)
    _finite_or_raise(errd, "d_loss", it)
    r1 = torch.zeros(())
    if apply_r1:
        r1 = r1_penalty(real_in, disc, cfg.r1_gamma, x_t, t)
        _finite_or_raise(r1, "r1", it)
        state.r1_count += 1
    (errd + r1).backward()
    state.opt_d.step()

    # generator
    disc.requires_grad_(False)
    state.opt_g.zero_grad(set_to_none=True)
    x0_hat = gen(x_t, x_lr, t)
    fake_prev = posterior_sample(x0_hat, x_t, t, sched, ns)
    adv = g_adv_loss(disc(fake_prev, x_t, t))
    rec = rec_loss(x0_hat, x0)
    errg = total_g_loss(adv, rec, cfg.lambda_rec)
    _finite_or_raise(errg, "g_loss", it)
    errg.backward()
    state.opt_g.step()
    disc.requires_grad_(True)

    ema_update(state.ema, gen, cfg.ema_decay)
    state.iteration += 1
    state.last_losses = {
        "d_loss": errd.item(), "g_adv": adv.item(), "rec": rec.item(),
        "r1": r1.item() if apply_r1 else math.nan,
    }
    return state


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
