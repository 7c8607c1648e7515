"""Few-step variance-preserving diffusion in wavelet-packet space.

The reverse process uses x0-prediction: a generator estimates the clean
packet and the step to ``x_{t-1}`` is drawn from the analytic forward
posterior ``q(x_{t-1} | x_t, x0=x0_hat)``.

Timesteps are 1-indexed (``t = 1..T``) with ``alpha_bar[0] = 1``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from .wavelet import WaveletPacket

__all__ = [
    "MAX_STEPS",
    "ConfigError",
    "ModelContractError",
    "DiffusionSchedule",
    "NoiseState",
    "make_schedule",
    "q_sample",
    "q_step",
    "q_sample_pair",
    "posterior_params",
    "p_sample_step",
    "sample",
]

MAX_STEPS = 8


class ConfigError(ValueError):
    """Invalid configuration value."""


class ModelContractError(RuntimeError):
    """A model returned something that violates its shape contract."""


@dataclass(frozen=True)
class DiffusionSchedule:
    """Per-step schedule quantities, stored as float64 arrays of length ``T``.

    Index ``t - 1`` holds the value for timestep ``t``.
    """

    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)
    alpha_bars_prev: np.ndarray = field(init=False)
    posterior_mean_coef_x0: np.ndarray = field(init=False)
    posterior_mean_coef_xt: np.ndarray = field(init=False)
    posterior_var: np.ndarray = field(init=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64).copy()
        if betas.ndim != 1 or not 1 <= len(betas) <= MAX_STEPS:
            raise ConfigError(f"number of steps must be in [1, {MAX_STEPS}], got {betas.shape}")
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ConfigError("every beta must lie strictly inside (0, 1)")
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        prev = np.concatenate([[1.0], alpha_bars[:-1]])
        set_ = object.__setattr__
        for name, value in (
            ("betas", betas),
            ("alphas", alphas),
            ("alpha_bars", alpha_bars),
            ("alpha_bars_prev", prev),
            ("posterior_mean_coef_x0", np.sqrt(prev) * betas / (1.0 - alpha_bars)),
            ("posterior_mean_coef_xt", np.sqrt(alphas) * (1.0 - prev) / (1.0 - alpha_bars)),
            ("posterior_var", (1.0 - prev) / (1.0 - alpha_bars) * betas),
        ):
            value.setflags(write=False)
            set_(self, name, value)

    @property
    def T(self) -> int:
        return len(self.betas)

    def check_t(self, t) -> None:
        tt = np.asarray(t.cpu() if isinstance(t, torch.Tensor) else t)
        if tt.size == 0 or tt.min() < 1 or tt.max() > self.T:
            raise IndexError(f"timestep {t!r} outside [1, {self.T}]")

    def to_dict(self) -> dict:
        return {"T": self.T, "betas": [float(b) for b in self.betas]}

    @classmethod
    def from_dict(cls, d: dict) -> "DiffusionSchedule":
        betas = np.asarray(d["betas"], dtype=np.float64)
        if len(betas) != int(d["T"]):
            raise ConfigError(f"schedule T={d['T']} disagrees with {len(betas)} betas")
        return cls(betas)


def make_schedule(T: int = 2, beta_min: float = 0.1, beta_max: float = 20.0) -> DiffusionSchedule:
    """Discretize the continuous VP-SDE into ``T`` steps.

    ``beta[i] = 1 - exp(-beta_min/T - (beta_max - beta_min) * (2i - 1) / (2 T^2))``
    """
    if not isinstance(T, (int, np.integer)) or not 1 <= T <= MAX_STEPS:
        raise ConfigError(f"T must be an integer in [1, {MAX_STEPS}], got {T!r}")
    if not 0 < beta_min < beta_max:
        raise ConfigError(f"need 0 < beta_min < beta_max, got {beta_min}, {beta_max}")
    i = np.arange(1, T + 1, dtype=np.float64)
    betas = 1.0 - np.exp(-beta_min / T - (beta_max - beta_min) * (2 * i - 1) / (2.0 * T * T))
    return DiffusionSchedule(betas)


class NoiseState:
    """Counter-based source of Gaussian noise.

    Every draw is a pure function of ``(seed, counter)``, so a trajectory can
    be replayed by restoring both fields.
    """

    def __init__(self, seed: int = 0, counter: int = 0):
        self.seed = int(seed)
        self.counter = int(counter)

    def _generator(self) -> torch.Generator:
        state = np.random.SeedSequence([self.seed, self.counter]).generate_state(2, dtype=np.uint32)
        g = torch.Generator()
        g.manual_seed(int(state[0]) << 31 | int(state[1]) >> 1)
        self.counter += 1
        return g

    def normal(self, shape, dtype=torch.float32) -> torch.Tensor:
        return torch.randn(tuple(shape), generator=self._generator(), dtype=dtype)

    def randint(self, low: int, high: int, shape) -> torch.Tensor:
        """Integers uniform on ``[low, high]`` inclusive."""
        return torch.randint(low, high + 1, tuple(shape), generator=self._generator())

    def state_dict(self) -> dict:
        return {"seed": self.seed, "counter": self.counter}

    @classmethod
    def from_state(cls, d: dict) -> "NoiseState":
        return cls(d["seed"], d["counter"])

    def __repr__(self):
        return f"NoiseState(seed={self.seed}, counter={self.counter})"


def _data(x) -> torch.Tensor:
    return x.data if isinstance(x, WaveletPacket) else x


def _coef(values: np.ndarray, t, like: torch.Tensor) -> torch.Tensor | float:
    """Look up a schedule coefficient for scalar ``t`` or a batch of timesteps."""
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        v = torch.tensor(values, dtype=like.dtype)[t.long() - 1]
        return v.reshape(-1, *([1] * (like.ndim - 1)))
    return float(values[int(t) - 1])


def q_sample(x0, t, noise: torch.Tensor, sched: DiffusionSchedule) -> torch.Tensor:
    """Closed-form forward marginal ``sqrt(ab_t) x0 + sqrt(1 - ab_t) noise``."""
    sched.check_t(t)
    x0 = _data(x0)
    if noise.shape != x0.shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} != x0 shape {tuple(x0.shape)}")
    ab = sched.alpha_bars
    return _sqrt(_coef(ab, t, x0)) * x0 + _sqrt(_coef(1.0 - ab, t, x0)) * noise


def q_step(x_prev: torch.Tensor, t, noise: torch.Tensor, sched: DiffusionSchedule) -> torch.Tensor:
    """One forward kernel step ``x_t = sqrt(alpha_t) x_{t-1} + sqrt(beta_t) z``."""
    sched.check_t(t)
    return _sqrt(_coef(sched.alphas, t, x_prev)) * x_prev + _sqrt(_coef(sched.betas, t, x_prev)) * noise


def q_sample_pair(x0, t, sched: DiffusionSchedule, noise_state: NoiseState):
    """Draw a consistent ``(x_{t-1}, x_t)`` pair from the forward chain.

    ``x_{t-1}`` comes from the closed-form marginal (``x0`` itself at ``t=1``)
    and ``x_t`` is one forward step further.
    """
    sched.check_t(t)
    x0 = _data(x0)
    n1 = noise_state.normal(x0.shape, dtype=x0.dtype)
    n2 = noise_state.normal(x0.shape, dtype=x0.dtype)
    # alpha_bars_prev[t-1] is alpha_bar[t-1], equal to 1 at t=1
    ab_prev = sched.alpha_bars_prev
    x_prev = _sqrt(_coef(ab_prev, t, x0)) * x0 + _sqrt(_coef(1.0 - ab_prev, t, x0)) * n1
    return x_prev, q_step(x_prev, t, n2, sched)


def posterior_params(x0_hat: torch.Tensor, x_t: torch.Tensor, t, sched: DiffusionSchedule):
    """Mean and variance of ``q(x_{t-1} | x_t, x0=x0_hat)``."""
    sched.check_t(t)
    if x0_hat.shape != x_t.shape:
        raise ValueError(f"shape mismatch {tuple(x0_hat.shape)} vs {tuple(x_t.shape)}")
    mean = (_coef(sched.posterior_mean_coef_x0, t, x_t) * x0_hat
            + _coef(sched.posterior_mean_coef_xt, t, x_t) * x_t)
    return mean, _coef(sched.posterior_var, t, x_t)


def posterior_sample(x0_hat, x_t, t, sched, noise_state: NoiseState) -> torch.Tensor:
    mean, var = posterior_params(x0_hat, x_t, t, sched)
    z = noise_state.normal(x_t.shape, dtype=x_t.dtype)
    return mean + _sqrt(var) * z


Generator = Callable[[torch.Tensor, torch.Tensor, object], torch.Tensor]


def p_sample_step(gen: Generator, x_t: torch.Tensor, x_lr, t: int,
                  sched: DiffusionSchedule, noise_state: NoiseState):
    """One reverse step. Returns ``(x_prev, x0_hat)``; deterministic at ``t == 1``."""
    sched.check_t(t)
    x0_hat = gen(x_t, _data(x_lr), t)
    if not isinstance(x0_hat, torch.Tensor) or x0_hat.shape != x_t.shape:
        got = tuple(x0_hat.shape) if isinstance(x0_hat, torch.Tensor) else type(x0_hat).__name__
        raise ModelContractError(f"generator returned {got}, expected {tuple(x_t.shape)}")
    if t == 1:
        return x0_hat, x0_hat
    return posterior_sample(x0_hat, x_t, t, sched, noise_state), x0_hat


@torch.no_grad()
def sample(gen: Generator, x_lr: WaveletPacket, sched: DiffusionSchedule,
           noise_state: NoiseState) -> WaveletPacket:
    """Run the ``T``-step reverse chain from pure noise, conditioned on ``x_lr``."""
    cond = _data(x_lr)
    x = noise_state.normal(cond.shape, dtype=cond.dtype)
    x0_hat = x
    for t in range(sched.T, 0, -1):
        x, x0_hat = p_sample_step(gen, x, cond, t, sched, noise_state)
    channels = x_lr.source_channels if isinstance(x_lr, WaveletPacket) else cond.shape[-3] // 4
    return WaveletPacket(x0_hat, channels, True)


def _sqrt(v):
    return v.sqrt() if isinstance(v, torch.Tensor) else math.sqrt(v)
