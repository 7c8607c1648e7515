import copy
import math

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given
from hypothesis import strategies as st

from wavesr.datapipe import make_pair, synthetic_image
from wavesr.diffusion import ConfigError, make_schedule
from wavesr.networks import DiscriminatorConfig, GeneratorConfig
from wavesr.training import (NumericalError, TrainConfig, d_loss, d_loss_literal, ema_update,
                             g_adv_loss, init_state, r1_penalty, rec_loss, stack_batch,
                             total_g_loss, train_step)

GEN = GeneratorConfig(base_channels=8, channel_mult=[1, 2], resnet_blocks_per_level=1, time_embed_dim=16)
DISC = DiscriminatorConfig(num_layers=2, base_channels=8, time_embed_dim=16)


@pytest.fixture(scope="module")
def pairs():
    return [make_pair(synthetic_image(i, 16), 4, id=str(i)) for i in range(4)]


def test_d_loss_goldens():
    zero = torch.tensor(0.0, dtype=torch.float64)
    assert d_loss(zero, zero).item() == pytest.approx(2 * math.log(2), abs=1e-12)
    assert d_loss(torch.tensor(20.0, dtype=torch.float64),
                  torch.tensor(-20.0, dtype=torch.float64)).item() == pytest.approx(2 * math.log1p(math.exp(-20)))
    assert d_loss(torch.tensor(-20.0), torch.tensor(20.0)).item() == pytest.approx(40.0, abs=1e-6)


def test_g_adv_loss_goldens():
    assert g_adv_loss(torch.tensor(0.0, dtype=torch.float64)).item() == pytest.approx(math.log(2), abs=1e-12)
    assert g_adv_loss(torch.tensor(20.0, dtype=torch.float64)).item() == pytest.approx(2.061e-9, rel=1e-3)


def test_literal_d_loss_is_printed_form():
    r, f = torch.tensor(0.3, dtype=torch.float64), torch.tensor(-1.2, dtype=torch.float64)
    want = -math.log(torch.sigmoid(r).item()) + math.log(torch.sigmoid(f).item())
    assert d_loss_literal(r, f).item() == pytest.approx(want, abs=1e-12)


def test_losses_reject_non_finite():
    with pytest.raises(NumericalError):
        d_loss(torch.tensor(float("nan")), torch.tensor(0.0))
    with pytest.raises(NumericalError):
        g_adv_loss(torch.tensor(float("inf")))


def test_stable_form_equals_probability_form():
    d = torch.linspace(-30, 30, 601, dtype=torch.float64)
    stable = torch.nn.functional.softplus(-d)
    naive = -torch.log(torch.sigmoid(d))
    assert (stable - naive).abs().max() < 1e-6


@given(st.floats(-30, 30), st.floats(-30, 30))
def test_loss_gradient_signs(r, f):
    rt = torch.tensor(r, dtype=torch.float64, requires_grad=True)
    ft = torch.tensor(f, dtype=torch.float64, requires_grad=True)
    d_loss(rt, ft).backward()
    assert rt.grad < 0 and ft.grad > 0
    ft2 = torch.tensor(f, dtype=torch.float64, requires_grad=True)
    g_adv_loss(ft2).backward()
    assert ft2.grad < 0


@given(st.floats(-20, 20), st.floats(-20, 20))
def test_g_adv_monotone(a, b):
    if a < b - 1e-6:
        assert g_adv_loss(torch.tensor(a, dtype=torch.float64)) > g_adv_loss(torch.tensor(b, dtype=torch.float64))


def test_rec_loss():
    x = torch.randn(2, 12, 4, 4)
    assert rec_loss(x, x).item() == 0.0
    assert rec_loss(x + 1, x).item() == pytest.approx(1.0)
    with pytest.raises(ValueError):
        rec_loss(x, x[:1])


def test_rec_loss_gradient_finite_differences():
    torch.manual_seed(0)
    x0 = torch.randn(12, 3, 3, dtype=torch.float64)
    xh = (x0 + torch.randn_like(x0)).requires_grad_(True)
    rec_loss(xh, x0).backward()
    n = x0.numel()
    assert torch.allclose(xh.grad, torch.sign(xh.detach() - x0) / n)
    h = 1e-7
    for idx in [(0, 0, 0), (5, 1, 2), (11, 2, 1)]:
        up, down = xh.detach().clone(), xh.detach().clone()
        up[idx] += h
        down[idx] -= h
        numeric = (rec_loss(up, x0) - rec_loss(down, x0)).item() / (2 * h)
        assert abs(numeric - xh.grad[idx].item()) / abs(xh.grad[idx].item()) < 1e-3


def test_total_g_loss():
    assert total_g_loss(0.7, 0.2, 1.0) == pytest.approx(0.9)
    assert total_g_loss(0.7, 0.2, 0.0) == pytest.approx(0.7)
    assert total_g_loss(math.log(2), 1.0, 0.5) == pytest.approx(1.193147, abs=1e-6)


class LinearD(nn.Module):
    def __init__(self, w):
        super().__init__()
        self.w = nn.Parameter(w)

    def forward(self, x, x_t=None, t=None):
        return (x * self.w).flatten(1).sum(1)


def test_r1_linear_discriminator():
    w = torch.randn(12, 4, 4, dtype=torch.float64)
    x = torch.randn(3, 12, 4, 4, dtype=torch.float64, requires_grad=True)
    gamma = 2.5
    got = r1_penalty(x, LinearD(w), gamma, x_t=x.detach(), t=1)
    assert got.item() == pytest.approx(gamma / 2 * w.pow(2).sum().item(), abs=1e-6)
    assert r1_penalty(x, LinearD(w), 0.0, x_t=x.detach(), t=1).item() == 0.0


def test_r1_constant_discriminator():
    x = torch.randn(2, 12, 4, 4, requires_grad=True)
    assert r1_penalty(x, lambda v: 0.0 * v.flatten(1).sum(1) + 3.0, 1.0).item() == 0.0
    assert r1_penalty(x, lambda v: torch.full((2,), 3.0, requires_grad=True), 1.0).item() == 0.0
    assert r1_penalty(x, lambda v: torch.full((2,), 3.0), 1.0).item() == 0.0


def test_r1_needs_grad():
    with pytest.raises(ConfigError):
        r1_penalty(torch.randn(2, 3), lambda v: v.sum(1), 1.0)


def test_ema_update():
    e, p = [torch.zeros(3)], [torch.ones(3)]
    ema_update(e, p, 0.5)
    assert torch.equal(e[0], torch.full((3,), 0.5))
    ema_update(e, p, 1.0)
    assert torch.equal(e[0], torch.full((3,), 0.5))
    ema_update(e, p, 0.0)
    assert torch.equal(e[0], p[0])
    with pytest.raises(ValueError):
        ema_update([torch.zeros(2)], [torch.zeros(3)], 0.5)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(ema_decay=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(lazy_reg_interval=0)
    with pytest.raises(ConfigError):
        TrainConfig(lr_gen=0)


def test_default_hyperparameters():
    cfg = TrainConfig()
    assert (cfg.lr_gen, cfg.lr_disc) == (2e-4, 1e-4)
    assert (cfg.adam_beta1, cfg.adam_beta2) == (0.5, 0.9)
    assert cfg.ema_decay == 0.9999 and cfg.lazy_reg_interval == 10 and cfg.batch_size == 64


def _tensors(state):
    return {k: v for k, v in _flatten(state.state_dict())}


def _flatten(obj, prefix=""):
    if isinstance(obj, dict):
        for k, v in obj.items():
            yield from _flatten(v, f"{prefix}{k}.")
    elif isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            yield from _flatten(v, f"{prefix}{i}.")
    else:
        yield prefix, obj


def _equal(a, b):
    if isinstance(a, torch.Tensor):
        return torch.equal(a, b)
    return a == b


def test_train_step_counter_and_determinism(pairs):
    cfg = TrainConfig(batch_size=4, ema_decay=0.9, seed=3)
    sched = make_schedule(2)
    s1 = init_state(GEN, DISC, cfg)
    s2 = copy.deepcopy(s1)
    batch = stack_batch(pairs)
    train_step(s1, batch, sched, cfg)
    train_step(s2, pairs, sched, cfg)
    assert s1.iteration == s2.iteration == 1
    t1, t2 = _tensors(s1), _tensors(s2)
    assert t1.keys() == t2.keys()
    assert all(_equal(t1[k], t2[k]) for k in t1)
    train_step(s1, batch, sched, cfg)
    assert s1.iteration == 2


def test_train_step_changes_parameters(pairs):
    cfg = TrainConfig(batch_size=4, ema_decay=0.5)
    sched = make_schedule(2)
    s = init_state(GEN, DISC, cfg)
    g0 = [p.detach().clone() for p in s.gen.parameters()]
    d0 = [p.detach().clone() for p in s.disc.parameters()]
    e0 = [p.detach().clone() for p in s.ema.parameters()]
    train_step(s, pairs, sched, cfg)
    assert any(not torch.equal(a, b) for a, b in zip(g0, s.gen.parameters()))
    assert any(not torch.equal(a, b) for a, b in zip(d0, s.disc.parameters()))
    for e_before, e, g in zip(e0, s.ema.parameters(), s.gen.parameters()):
        assert torch.allclose(e, 0.5 * e_before + 0.5 * g)


def test_lazy_r1_fires_on_schedule(pairs):
    cfg = TrainConfig(batch_size=4, lazy_reg_interval=10)
    sched = make_schedule(2)
    s = init_state(GEN, DISC, cfg)
    batch = stack_batch(pairs)
    fired = []
    for _ in range(25):
        before = s.r1_count
        train_step(s, batch, sched, cfg)
        fired.append(s.r1_count > before)
        assert math.isnan(s.last_losses["r1"]) != fired[-1]
    assert s.r1_count == 3
    assert [i for i, f in enumerate(fired) if f] == [0, 10, 20]


def test_nan_aborts_with_diagnostic(pairs):
    cfg = TrainConfig(batch_size=4)
    s = init_state(GEN, DISC, cfg)
    with torch.no_grad():
        next(s.disc.parameters()).fill_(float("nan"))
    with pytest.raises(NumericalError) as info:
        train_step(s, pairs, make_schedule(2), cfg)
    assert info.value.iteration == 0
    assert info.value.loss_name == "real logit"


def test_unscaled_packets_rejected(pairs):
    bad = copy.copy(pairs[0])
    bad.x0 = bad.x0.__class__(bad.x0.data, 3, scaled=False)
    with pytest.raises(ValueError):
        stack_batch([bad])
    with pytest.raises(ValueError):
        stack_batch([])


def test_large_lambda_decreases_reconstruction():
    pair = make_pair(synthetic_image(5, 16), 4)
    cfg = TrainConfig(batch_size=1, lambda_rec=1e3, ema_decay=0.9, seed=1)
    sched = make_schedule(2)
    s = init_state(GEN, DISC, cfg)
    batch = stack_batch([pair])
    x0, x_lr = batch

    def rec_now():
        with torch.no_grad():
            return np.mean([rec_loss(s.gen(x0 * 0 + torch.randn_like(x0), x_lr, t), x0).item()
                            for t in (1, 2)])

    torch.manual_seed(0)
    start = rec_now()
    for _ in range(200):
        train_step(s, batch, sched, cfg)
    torch.manual_seed(0)
    assert rec_now() < start
    assert s.last_losses["rec"] < start
