import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from freqadapt import compute as C
from freqadapt.spectral import (apply_spectral_mask, dct2, dct_matrix, filter_with_mask, fixed_highpass_mask,
                                idct2, radial_frequency)

SIZES = [1, 2, 3, 8, 16, 64]


def _naive_dct_matrix(n):
    # independent oracle: explicit double loop over the closed form
    c = np.zeros((n, n))
    for k in range(n):
        s = math.sqrt(1.0 / n) if k == 0 else math.sqrt(2.0 / n)
        for i in range(n):
            c[k, i] = s * math.cos(math.pi * (2 * i + 1) * k / (2 * n))
    return c


def test_dct_matrix_small_cases():
    assert dct_matrix(1).tolist() == [[1.0]]
    assert np.allclose(dct_matrix(2).numpy(), [[0.70711, 0.70711], [0.70711, -0.70711]], atol=1e-5)
    with pytest.raises(ValueError):
        dct_matrix(0)


@pytest.mark.parametrize("n", [1, 2, 5, 8, 33, 64])
def test_dct_matrix_matches_closed_form_and_is_orthonormal(n):
    c = dct_matrix(n)
    assert np.allclose(c.numpy(), _naive_dct_matrix(n), atol=1e-12)
    eye = torch.eye(n, dtype=torch.float64)
    assert (c @ c.T - eye).abs().max() < 1e-6
    assert (c.T @ c - eye).abs().max() < 1e-6


def test_dct_matches_scipy():
    from scipy.fft import dctn
    x = np.random.default_rng(0).normal(size=(1, 1, 8, 6))
    ours = dct2(torch.tensor(x)).numpy()
    assert np.allclose(ours, dctn(x, type=2, norm="ortho", axes=(-2, -1)), atol=1e-12)


def test_constant_image_is_dc_only():
    spec = dct2(torch.ones(1, 1, 2, 2, dtype=torch.float64))
    assert spec[0, 0, 0, 0].item() == pytest.approx(2.0)
    spec[0, 0, 0, 0] = 0
    assert spec.abs().max() < 1e-12
    assert torch.equal(dct2(torch.zeros(1, 1, 4, 4)), torch.zeros(1, 1, 4, 4))


def test_inverse_examples():
    s = torch.zeros(1, 1, 2, 2, dtype=torch.float64)
    s[..., 0, 0] = 2.0
    assert torch.allclose(idct2(s), torch.ones(1, 1, 2, 2, dtype=torch.float64))
    assert torch.equal(idct2(torch.zeros(1, 1, 3, 3)), torch.zeros(1, 1, 3, 3))


@pytest.mark.parametrize("h", SIZES)
@pytest.mark.parametrize("w", SIZES)
def test_round_trip_and_parseval(h, w):
    x = torch.randn(2, 3, h, w, generator=torch.Generator().manual_seed(h * 100 + w), dtype=torch.float64)
    spec = dct2(x)
    assert (idct2(spec) - x).abs().max() < 1e-5
    assert abs(float((spec ** 2).sum() / (x ** 2).sum()) - 1.0) < 1e-5


def test_float32_round_trip():
    x = torch.rand(1, 1, 64, 64, generator=torch.Generator().manual_seed(0))
    assert (idct2(dct2(x)) - x).abs().max() < 1e-5


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.floats(-3, 3), st.floats(-3, 3))
def test_linearity(h, w, a, b):
    g = torch.Generator().manual_seed(h * 13 + w)
    x = torch.randn(1, 1, h, w, generator=g, dtype=torch.float64)
    y = torch.randn(1, 1, h, w, generator=g, dtype=torch.float64)
    assert torch.allclose(dct2(a * x + b * y), a * dct2(x) + b * dct2(y), atol=1e-5)


def test_masks():
    x = torch.randn(1, 1, 2, 2, dtype=torch.float64)
    spec = dct2(x)
    assert torch.equal(apply_spectral_mask(spec, torch.ones_like(spec)), spec)
    assert torch.equal(idct2(apply_spectral_mask(spec, torch.zeros_like(spec))), torch.zeros_like(x))
    dc_only = torch.zeros(2, 2, dtype=torch.float64)
    dc_only[0, 0] = 1.0
    out = filter_with_mask(x, dc_only)
    assert torch.allclose(out, x.mean().expand_as(x))
    with pytest.raises(ValueError):
        apply_spectral_mask(spec, torch.ones(3, 3))


def test_highpass_examples():
    assert torch.equal(fixed_highpass_mask(8, 6, 0.0), torch.ones(8, 6))
    for t in (0.01, 0.5, 1.0):
        assert fixed_highpass_mask(8, 8, t)[0, 0] == 0
    with pytest.raises(ValueError):
        fixed_highpass_mask(4, 4, 1.5)
    with pytest.raises(ValueError):
        fixed_highpass_mask(4, 4, -0.1)


def test_highpass_zero_count_brute_force():
    h = w = 64
    t = 0.1
    top = math.sqrt((h - 1) ** 2 + (w - 1) ** 2)
    zeros = sum(1 for u in range(h) for v in range(w) if math.sqrt(u * u + v * v) / top < t)
    m = fixed_highpass_mask(h, w, t)
    assert int((m == 0).sum()) == zeros
    assert set(torch.unique(m).tolist()) <= {0.0, 1.0}
    assert radial_frequency(h, w)[-1, -1] == pytest.approx(1.0)


def test_masked_reconstruction_grad_matches_fd():
    x = torch.randn(1, 2, 6, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    m = torch.rand(1, 2, 6, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(2))
    w = torch.randn(1, 2, 6, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(3))

    def via_x(xx):
        return C.sum(filter_with_mask(xx, m) * w)

    def via_m(mm):
        return C.sum(filter_with_mask(x, mm) ** 2)

    for fn, arg in ((via_x, x), (via_m, m)):
        a = arg.clone().requires_grad_(True)
        C.backward(fn(a))
        assert C.relative_error(a.grad, C.numeric_grad(fn, arg)) < 1e-4
