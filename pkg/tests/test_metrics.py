import csv
import json
import math

import numpy as np
import pytest
import torch

from wavesr.datapipe import make_pair, synthetic_image
from wavesr.diffusion import make_schedule
from wavesr.metrics import PSNR_CAP, MetricReport, evaluate_pairs, export_samples, psnr, ssim

C1 = 0.01 ** 2


def test_psnr_goldens():
    a, b = np.zeros((3, 8, 8)), np.full((3, 8, 8), 0.5)
    assert psnr(a, b) == pytest.approx(20 * math.log10(2), abs=1e-4)
    assert psnr(a, b) == pytest.approx(6.0206, abs=1e-4)
    assert psnr(a, np.ones((3, 8, 8))) == pytest.approx(0.0, abs=1e-12)
    assert psnr(a, a) == PSNR_CAP
    assert psnr(a, a + 1e-12) == PSNR_CAP


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError):
        psnr(np.zeros((3, 4, 4)), np.zeros((3, 4, 5)))


def test_psnr_decreases_with_noise():
    rng = np.random.default_rng(0)
    x = rng.random((3, 32, 32))
    vals = [psnr(x, x + s * rng.standard_normal(x.shape)) for s in (0.01, 0.05, 0.1, 0.3)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_ssim_constant_pair_golden():
    got = ssim(np.zeros((3, 16, 16)), np.ones((3, 16, 16)))
    assert got == pytest.approx(C1 / (1 + C1), abs=1e-12)
    assert got == pytest.approx(9.999e-5, abs=1e-7)


def test_ssim_identity_is_exactly_one():
    x = synthetic_image(1, 32)
    assert ssim(x, x) == 1.0


def test_ssim_symmetric_and_bounded():
    rng = np.random.default_rng(2)
    a, b = rng.random((3, 24, 24)), rng.random((3, 24, 24))
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)
    assert -1.0 <= ssim(a, b) < 1.0
    assert ssim(a, a + 0.01 * rng.standard_normal(a.shape)) > ssim(a, b)


def test_ssim_small_image_rejected():
    with pytest.raises(ValueError, match="window"):
        ssim(np.zeros((3, 8, 8)), np.zeros((3, 8, 8)))


def test_ssim_brute_force_oracle():
    """Direct per-window evaluation against the vectorized implementation."""
    rng = np.random.default_rng(3)
    a, b = rng.random((13, 12)), rng.random((13, 12))
    x = np.arange(11) - 5
    g = np.exp(-x ** 2 / (2 * 1.5 ** 2))
    w = np.outer(g, g) / np.outer(g, g).sum()
    c2 = 0.03 ** 2
    vals = []
    for i in range(3):
        for j in range(2):
            pa, pb = a[i:i + 11, j:j + 11], b[i:i + 11, j:j + 11]
            ma, mb = (w * pa).sum(), (w * pb).sum()
            va, vb = (w * pa * pa).sum() - ma ** 2, (w * pb * pb).sum() - mb ** 2
            cov = (w * pa * pb).sum() - ma * mb
            vals.append((2 * ma * mb + C1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + C1) * (va + vb + c2)))
    assert ssim(a, b) == pytest.approx(np.mean(vals), abs=1e-12)


def test_report_aggregate_and_csv(tmp_path):
    rows = [{"id": "a", "psnr": 20.0, "ssim": 0.5, "bicubic_psnr": 18.0, "bicubic_ssim": 0.4},
            {"id": "b", "psnr": 30.0, "ssim": 0.7, "bicubic_psnr": 22.0, "bicubic_ssim": 0.6}]
    r = MetricReport.from_rows(rows)
    assert r.psnr_db == 25.0 and r.ssim == pytest.approx(0.6) and r.n_images == 2
    r.write_csv(tmp_path / "m.csv")
    out = list(csv.DictReader(open(tmp_path / "m.csv")))
    assert len(out) == 3 and out[-1]["id"] == "mean"
    assert float(out[-1]["bicubic_psnr"]) == 20.0
    with pytest.raises(ValueError):
        MetricReport.from_rows([])


@pytest.fixture(scope="module")
def pairs():
    return [make_pair(synthetic_image(i, 32), 4, id=f"im{i}") for i in range(10)]


def oracle(pairs):
    """Generator stub returning the true packet, keyed on the condition."""
    table = {p.x_lr.data.numpy().tobytes(): p.x0.data for p in pairs}

    def gen(x, c, t):
        return torch.stack([table[ci.numpy().tobytes()] for ci in c])
    return gen


def test_evaluate_with_oracle_generator(pairs):
    report = evaluate_pairs(oracle(pairs), pairs, make_schedule(2))
    assert report.n_images == 10
    for row in report.rows:
        assert row["psnr"] > 45 and row["ssim"] > 0.999
        assert row["bicubic_psnr"] < row["psnr"]


def test_export_writes_three_pngs_each(tmp_path, pairs):
    manifest = export_samples(oracle(pairs), pairs, tmp_path / "out", make_schedule(2))
    pngs = sorted(p.name for p in (tmp_path / "out").glob("*.png"))
    assert len(pngs) == 30
    assert len(manifest) == 10 and "im0_sr.png" in pngs
    assert json.loads((tmp_path / "out" / "manifest.json").read_text()) == manifest


def test_export_deterministic_bytes(tmp_path, pairs):
    gen = torch.nn.Conv2d(24, 12, 1)
    torch.nn.init.normal_(gen.weight, std=0.1)

    def noisy(x, c, t):
        return gen(torch.cat([x, c], 1))

    sched = make_schedule(2)
    for d in ("a", "b"):
        with torch.no_grad():
            export_samples(noisy, pairs[:3], tmp_path / d, sched, seed=5)
    for f in (tmp_path / "a").glob("*.png"):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
