import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from wavesr.wavelet import HAAR_HIGH, HAAR_LOW, WaveletPacket, dwt2d, idwt2d


def haar_matrix_oracle(block: np.ndarray) -> np.ndarray:
    """Sub-bands of a 2x2 block via the explicit Kronecker-product Haar matrix.

    Row-major vec of the block is [a, b, c, d]; vec(V X H^T) = (V kron H) vec(X)
    for a horizontal filter H and vertical filter V.
    """
    L, H = np.array(HAAR_LOW), np.array(HAAR_HIGH)
    rows = [np.kron(vert, horiz) for horiz, vert in ((L, L), (L, H), (H, L), (H, H))]
    return np.stack(rows) @ block.reshape(-1)


def test_filters_orthonormal():
    L, H = np.array(HAAR_LOW), np.array(HAAR_HIGH)
    assert np.linalg.norm(L) == pytest.approx(1.0)
    assert np.linalg.norm(H) == pytest.approx(1.0)
    assert L @ H == pytest.approx(0.0)


def test_golden_block():
    x = torch.tensor([[[1.0, 2.0], [3.0, 4.0]]], dtype=torch.float64)
    p = dwt2d(x, scale=False)
    got = p.data[:, 0, 0].numpy()
    np.testing.assert_allclose(got, [5.0, 2.0, 1.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(got, haar_matrix_oracle(x[0].numpy()), atol=1e-12)
    for name, v in zip(("LL", "LH", "HL", "HH"), (5, 2, 1, 0)):
        assert p.band(name).item() == pytest.approx(v)


def test_golden_inverse():
    p = WaveletPacket(torch.tensor([5.0, 2.0, 1.0, 0.0], dtype=torch.float64).reshape(4, 1, 1), 1, False)
    np.testing.assert_allclose(idwt2d(p)[0].numpy(), [[1, 2], [3, 4]], atol=1e-12)


def test_random_blocks_match_oracle():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 6, 8))
    p = dwt2d(torch.as_tensor(x), scale=False).data.numpy()
    for c in range(2):
        for i in range(3):
            for j in range(4):
                block = x[c, 2 * i:2 * i + 2, 2 * j:2 * j + 2]
                want = haar_matrix_oracle(block)
                got = p[[c, 2 + c, 4 + c, 6 + c], i, j]
                np.testing.assert_allclose(got, want, atol=1e-12)


@pytest.mark.parametrize("scale", [False, True])
def test_constant_image(scale):
    c = 0.37
    p = dwt2d(torch.full((3, 8, 6), c, dtype=torch.float64), scale=scale)
    assert p.shape == (12, 4, 3)
    ll = 2 * c * (0.5 if scale else 1.0)
    assert torch.allclose(p.band("LL"), torch.full_like(p.band("LL"), ll))
    assert torch.count_nonzero(p.data[3:]) == 0
    assert torch.allclose(idwt2d(p), torch.full((3, 8, 6), c, dtype=torch.float64))


@pytest.mark.parametrize("scale", [False, True])
def test_perfect_reconstruction_128(scale):
    g = torch.Generator().manual_seed(0)
    x = torch.rand(3, 128, 128, generator=g) * 2 - 1
    err = (idwt2d(dwt2d(x, scale)) - x).abs().max()
    assert err < 1e-5


def test_parseval():
    x = torch.randn(3, 32, 16, dtype=torch.float64)
    p = dwt2d(x, scale=False)
    rel = abs(p.data.pow(2).sum() - x.pow(2).sum()) / x.pow(2).sum()
    assert rel < 1e-5


def test_linearity():
    x, y = torch.randn(2, 3, 16, 16, dtype=torch.float64)
    a, b = 0.7, -1.9
    lhs = dwt2d(a * x + b * y).data
    rhs = a * dwt2d(x).data + b * dwt2d(y).data
    assert (lhs - rhs).abs().max() < 1e-5


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 6).map(lambda n: 2 * n),
                                    st.integers(1, 6).map(lambda n: 2 * n)),
              elements=st.floats(-1, 1)))
def test_scaled_range_and_roundtrip(x):
    p = dwt2d(torch.as_tensor(x), scale=True)
    assert p.data.abs().max() <= 1.0 + 1e-12
    assert (idwt2d(p) - torch.as_tensor(x)).abs().max() < 1e-5


def test_batched_input():
    x = torch.randn(5, 3, 8, 8)
    p = dwt2d(x)
    assert p.shape == (5, 12, 4, 4)
    for i in range(5):
        assert torch.equal(dwt2d(x[i]).data, p.data[i])


@pytest.mark.parametrize("shape, axis", [((3, 7, 8), "H=7"), ((3, 8, 5), "W=5")])
def test_odd_dims_rejected(shape, axis):
    with pytest.raises(ValueError, match=axis):
        dwt2d(torch.zeros(shape))


def test_bad_packet_channels():
    with pytest.raises(ValueError):
        idwt2d(torch.zeros(6, 2, 2))
    with pytest.raises(ValueError):
        WaveletPacket(torch.zeros(8, 2, 2), 3)


def test_gradient_passes_through():
    x = torch.randn(1, 4, 4, requires_grad=True)
    idwt2d(dwt2d(x)).sum().backward()
    assert torch.allclose(x.grad, torch.ones_like(x))


def test_energy_of_unit_impulse():
    x = torch.zeros(1, 4, 4, dtype=torch.float64)
    x[0, 1, 2] = 1.0
    p = dwt2d(x, scale=False)
    assert p.data.pow(2).sum().item() == pytest.approx(1.0)
    assert p.data.abs().max().item() == pytest.approx(0.5)
    assert math.isclose(p.data.abs().sum().item(), 2.0)
