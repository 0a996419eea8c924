"""Orthonormal 2D DCT-II, its inverse, and spectral masks.

A spectrum is a tensor with the same NCHW shape as the image it came from; a
filter map is a tensor of values in [0, 1] broadcastable to that shape
(typically ``(N, C, H, W)`` for learned masks or ``(H, W)`` for fixed ones).
Transforms are applied independently to every channel as ``C_H @ X @ C_W^T``.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np
import torch

from .compute import DiffArray


@lru_cache(maxsize=64)
def _dct_matrix_np(n: int) -> np.ndarray:
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    c = np.cos(np.pi * (2 * i + 1) * k / (2 * n))
    s = np.full((n, 1), math.sqrt(2.0 / n))
    s[0, 0] = math.sqrt(1.0 / n)
    c = s * c
    c.setflags(write=False)
    return c


def dct_matrix(n: int, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    """Orthonormal DCT-II matrix ``C[k, i] = s_k cos(pi (2i+1) k / 2n)``."""
    if n < 1:
        raise ValueError(f"DCT size must be >= 1, got {n}")
    return torch.tensor(_dct_matrix_np(n), dtype=dtype)


@lru_cache(maxsize=64)
def _basis(n: int, dtype: torch.dtype) -> torch.Tensor:
    return dct_matrix(n, dtype)


def _check_image(x: DiffArray, op: str) -> None:
    if x.dim() < 2:
        raise ValueError(f"{op} needs at least 2 dims (..., H, W), got shape {tuple(x.shape)}")
    if x.shape[-1] < 1 or x.shape[-2] < 1:
        raise ValueError(f"{op} needs H, W >= 1, got {tuple(x.shape[-2:])}")


def dct2(x: DiffArray) -> DiffArray:
    _check_image(x, "dct2")
    ch = _basis(x.shape[-2], x.dtype)
    cw = _basis(x.shape[-1], x.dtype)
    return ch @ x @ cw.T


def idct2(spec: DiffArray) -> DiffArray:
    _check_image(spec, "idct2")
    ch = _basis(spec.shape[-2], spec.dtype)
    cw = _basis(spec.shape[-1], spec.dtype)
    return ch.T @ spec @ cw


def apply_spectral_mask(spec: DiffArray, mask: DiffArray) -> DiffArray:
    """Hadamard product of a spectrum with a filter map.

    The mask must either match the spectrum shape or be a bare ``(H, W)`` map
    shared by every image and channel.
    """
    if mask.shape != spec.shape and mask.shape != spec.shape[-2:]:
        raise ValueError(
            f"filter map shape {tuple(mask.shape)} does not match spectrum {tuple(spec.shape)}"
        )
    return spec * mask


def radial_frequency(h: int, w: int) -> np.ndarray:
    """Normalised radius sqrt(u^2 + v^2) / sqrt((H-1)^2 + (W-1)^2); 0 for a 1x1 grid."""
    u = np.arange(h)[:, None].astype(np.float64)
    v = np.arange(w)[None, :].astype(np.float64)
    top = math.hypot(h - 1, w - 1)
    r = np.sqrt(u ** 2 + v ** 2)
    return r / top if top > 0 else np.zeros((h, w))


def fixed_highpass_mask(h: int, w: int, t: float, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Binary (H, W) map that zeroes every coefficient whose radius is below ``t``."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"high-pass threshold must lie in [0, 1], got {t}")
    keep = radial_frequency(h, w) >= t
    return torch.tensor(keep, dtype=dtype)


def filter_with_mask(x: DiffArray, mask: DiffArray) -> DiffArray:
    """idct2(mask * dct2(x))."""
    return idct2(apply_spectral_mask(dct2(x), mask))
