"""Variational conditional Gaussian q(z_t | z_s) and the CLUB-style losses."""

from __future__ import annotations

import math

import torch
from torch import nn
from torch.func import functional_call

from . import compute as C
from .layers import Linear

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0
LOG_2PI = math.log(2.0 * math.pi)


class MLP(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = Linear(dim, hidden)
        self.fc2 = Linear(hidden, dim)

    def reset(self, gen: torch.Generator) -> None:
        self.fc1.reset(gen)
        self.fc2.reset(gen)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(C.leaky_relu(self.fc1(x)))


class VariationalGaussian(nn.Module):
    """Diagonal Gaussian whose mean and log-variance are MLPs of ``z_s``."""

    def __init__(self, dim: int, hidden: int = 1024, logvar_min: float = LOGVAR_MIN,
                 logvar_max: float = LOGVAR_MAX):
        super().__init__()
        if logvar_min >= logvar_max:
            raise ValueError("logvar_min must be below logvar_max")
        self.dim = dim
        self.logvar_min, self.logvar_max = logvar_min, logvar_max
        self.mean_net = MLP(dim, hidden)
        self.logvar_net = MLP(dim, hidden)

    def reset(self, gen: torch.Generator) -> None:
        self.mean_net.reset(gen)
        self.logvar_net.reset(gen)

    def forward(self, z_s: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        logvar = torch.clamp(self.logvar_net(z_s), self.logvar_min, self.logvar_max)
        return self.mean_net(z_s), logvar


def init_variational(seed: int, dim: int, hidden: int = 1024, logvar_min: float = LOGVAR_MIN,
                     logvar_max: float = LOGVAR_MAX) -> VariationalGaussian:
    q = VariationalGaussian(dim, hidden, logvar_min, logvar_max)
    q.reset(C.seeded_generator(seed))
    return q


def _gauss_log_density(z_t: torch.Tensor, mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    return -0.5 * (((z_t - mu) ** 2) * torch.exp(-logvar) + logvar + LOG_2PI).sum(dim=-1)


def _check(z: torch.Tensor, dim: int, name: str) -> None:
    if z.shape[-1] != dim:
        raise ValueError(f"{name} has dimension {z.shape[-1]}, expected {dim}")
    if not torch.isfinite(z).all():
        raise ValueError(f"{name} contains non-finite values")


def q_log_prob(q: VariationalGaussian, z_t: torch.Tensor, z_s: torch.Tensor) -> torch.Tensor:
    """log q(z_t | z_s); a scalar for 1-D inputs, one value per row for batches."""
    _check(z_t, q.dim, "z_t")
    _check(z_s, q.dim, "z_s")
    mu, logvar = q(z_s)
    return _gauss_log_density(z_t, mu, logvar)


def _check_batch(z_s: torch.Tensor, z_t: torch.Tensor) -> None:
    if z_s.dim() != 2 or z_s.shape != z_t.shape:
        raise ValueError(f"expected aligned (N, d) batches, got {tuple(z_s.shape)} and {tuple(z_t.shape)}")
    if z_s.shape[0] == 0:
        raise ValueError("empty batch")


def pairwise_log_prob(q: VariationalGaussian, z_s: torch.Tensor, z_t: torch.Tensor,
                      freeze_q: bool = False) -> torch.Tensor:
    """Matrix ``L[i, j] = log q(z_t[j] | z_s[i])``."""
    _check_batch(z_s, z_t)
    _check(z_s, q.dim, "z_s")
    _check(z_t, q.dim, "z_t")
    if freeze_q:
        frozen = {k: v.detach() for k, v in q.named_parameters()}
        mu, logvar = functional_call(q, frozen, (z_s,))
    else:
        mu, logvar = q(z_s)
    return _gauss_log_density(z_t[None, :, :], mu[:, None, :], logvar[:, None, :])


def loss_mi(q: VariationalGaussian, z_s: torch.Tensor, z_t: torch.Tensor) -> torch.Tensor:
    """CLUB surrogate: mean_i [log q(t_i|s_i) - mean_j log q(t_j|s_i)].

    q's parameters receive no gradient from this loss; only the inputs do.
    The all-pairs term uses mean_j (t_j - mu_i)^2 = Var[t] + (E[t] - mu_i)^2,
    which is exact and keeps memory linear in N.
    """
    _check_batch(z_s, z_t)
    _check(z_s, q.dim, "z_s")
    _check(z_t, q.dim, "z_t")
    frozen = {k: v.detach() for k, v in q.named_parameters()}
    mu, logvar = functional_call(q, frozen, (z_s,))
    positive = _gauss_log_density(z_t, mu, logvar)
    m1 = z_t.mean(dim=0, keepdim=True)
    var = ((z_t - m1) ** 2).mean(dim=0, keepdim=True)
    sq = var + (m1 - mu) ** 2
    negative = -0.5 * (sq * torch.exp(-logvar) + logvar + LOG_2PI).sum(dim=-1)
    return (positive - negative).mean()


def loss_likelihood(q: VariationalGaussian, z_s: torch.Tensor, z_t: torch.Tensor) -> torch.Tensor:
    """Negative log-likelihood -mean_i log q(z_t_i | z_s_i)."""
    _check_batch(z_s, z_t)
    return -q_log_prob(q, z_t, z_s).mean()
