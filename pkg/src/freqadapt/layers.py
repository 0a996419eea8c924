"""Parameter-holding building blocks shared by the filter and segmentor nets."""

from __future__ import annotations

import math

import torch
from torch import nn

from . import compute as C


class Conv(nn.Module):
    """k x k 'same' convolution (odd k) with bias."""

    def __init__(self, in_ch: int, out_ch: int, k: int = 3):
        super().__init__()
        self.padding = k // 2
        self.weight = nn.Parameter(torch.empty(out_ch, in_ch, k, k))
        self.bias = nn.Parameter(torch.zeros(out_ch))

    def reset(self, gen: torch.Generator, gain: float = 1.0) -> None:
        with torch.no_grad():
            nn.init.kaiming_uniform_(self.weight, a=C.LEAKY_SLOPE, nonlinearity="leaky_relu",
                                     generator=gen)
            self.weight.mul_(gain)
            self.bias.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return C.conv2d(x, self.weight, self.bias, padding=self.padding)


class Linear(nn.Module):
    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(in_dim, out_dim))
        self.bias = nn.Parameter(torch.zeros(out_dim))

    def reset(self, gen: torch.Generator) -> None:
        bound = 1.0 / math.sqrt(self.weight.shape[0])
        with torch.no_grad():
            self.weight.uniform_(-bound, bound, generator=gen)
            self.bias.uniform_(-bound, bound, generator=gen)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return C.matmul(x, self.weight) + self.bias


class Norm(nn.Module):
    """Instance normalisation with a per-channel affine."""

    def __init__(self, ch: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(ch))
        self.bias = nn.Parameter(torch.zeros(ch))

    def reset(self) -> None:
        with torch.no_grad():
            self.weight.fill_(1.0)
            self.bias.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return C.instance_norm(x) * self.weight[:, None, None] + self.bias[:, None, None]


class DoubleConv(nn.Module):
    """conv3x3 -> [norm] -> leaky, twice."""

    def __init__(self, in_ch: int, out_ch: int, norm: bool = False):
        super().__init__()
        self.a = Conv(in_ch, out_ch)
        self.b = Conv(out_ch, out_ch)
        self.norm_a = Norm(out_ch) if norm else None
        self.norm_b = Norm(out_ch) if norm else None

    def reset(self, gen: torch.Generator) -> None:
        self.a.reset(gen)
        self.b.reset(gen)
        for n in (self.norm_a, self.norm_b):
            if n is not None:
                n.reset()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.a(x)
        if self.norm_a is not None:
            x = self.norm_a(x)
        x = self.b(C.leaky_relu(x))
        if self.norm_b is not None:
            x = self.norm_b(x)
        return C.leaky_relu(x)


def check_divisible(x: torch.Tensor, factor: int, what: str) -> None:
    h, w = x.shape[-2:]
    if h % factor or w % factor:
        raise ValueError(
            f"{what} needs H and W divisible by {factor}, got {h}x{w}; pad the image to a multiple of {factor}"
        )
