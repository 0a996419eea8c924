"""Learnable frequency-domain information filter.

``x_f = idct2(M(prep(dct2(x))) * dct2(x))`` where ``M`` is a small three-level
encoder-decoder with a sigmoid head and ``prep`` is signed log scaling.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import compute as C
from .layers import Conv, check_divisible
from .spectral import apply_spectral_mask, dct2, idct2

INIT_HEAD_BIAS = 3.0  # sigmoid(3) ~= 0.953
HEAD_WEIGHT_GAIN = 0.01


def signed_log(c: torch.Tensor) -> torch.Tensor:
    return torch.sign(c) * torch.log1p(c.abs())


class InformationFilter(nn.Module):
    """Spectral attention over per-channel DCT coefficients.

    Set ``force_mask`` to a float to bypass the attention net and emit a
    constant map (used by tests to pin the identity / zero filters).
    """

    def __init__(self, channels: int = 1, base_width: int = 4):
        super().__init__()
        if base_width < 1:
            raise ValueError(f"base_width must be >= 1, got {base_width}")
        w = base_width
        self.channels = channels
        self.base_width = base_width
        self.enc1 = Conv(channels, w)
        self.enc2 = Conv(w, 2 * w)
        self.enc3 = Conv(2 * w, 4 * w)
        self.dec2 = Conv(6 * w, 2 * w)
        self.dec1 = Conv(3 * w, w)
        self.head = Conv(w, channels, k=1)
        self.force_mask: float | None = None

    def reset(self, gen: torch.Generator) -> None:
        for conv in (self.enc1, self.enc2, self.enc3, self.dec2, self.dec1):
            conv.reset(gen)
        self.head.reset(gen, gain=HEAD_WEIGHT_GAIN)
        with torch.no_grad():
            self.head.bias.fill_(INIT_HEAD_BIAS)

    def attention(self, spec: torch.Tensor) -> torch.Tensor:
        if self.force_mask is not None:
            return torch.full_like(spec, float(self.force_mask))
        a = C.leaky_relu(self.enc1(signed_log(spec)))
        b = C.leaky_relu(self.enc2(C.max_pool2x(a)))
        c = C.leaky_relu(self.enc3(C.max_pool2x(b)))
        d = C.leaky_relu(self.dec2(torch.cat([C.upsample2x(c), b], dim=1)))
        e = C.leaky_relu(self.dec1(torch.cat([C.upsample2x(d), a], dim=1)))
        return C.sigmoid(self.head(e))

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return filter_forward(self, x)

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def filter_forward(filt: InformationFilter, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Filter an NCHW batch; returns ``(x_f, filter_map)``."""
    if x.dim() != 4 or x.shape[1] != filt.channels:
        raise ValueError(f"expected (N, {filt.channels}, H, W) input, got {tuple(x.shape)}")
    check_divisible(x, 4, "information filter")
    spec = dct2(x)
    mask = filt.attention(spec)
    return idct2(apply_spectral_mask(spec, mask)), mask


def init_filter(seed: int, channels: int = 1, base_width: int = 4) -> InformationFilter:
    filt = InformationFilter(channels, base_width)
    filt.reset(C.seeded_generator(seed))
    return filt


def export_filter_map(mask: torch.Tensor, path: str | Path) -> None:
    """Write one (H, W) filter map as an 8-bit grayscale image (0 -> 0, 1 -> 255)."""
    from PIL import Image

    m = mask.detach().cpu().double().numpy()
    if m.ndim != 2:
        raise ValueError(f"export needs a single (H, W) map, got shape {m.shape}")
    Image.fromarray(np.round(np.clip(m, 0.0, 1.0) * 255).astype(np.uint8)).save(path)
