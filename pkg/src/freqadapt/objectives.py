"""Pseudo-labels, gated cross-entropy, embedding consistency and the two objectives."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from . import compute as C


@dataclass
class PseudoLabel:
    labels: torch.Tensor      # (N, H, W) int64
    confidence: torch.Tensor  # (N, H, W), max class probability


def pseudo_label(p_t: torch.Tensor) -> PseudoLabel:
    """Argmax / max over the class axis of teacher probabilities.

    Ties go to the lowest class index. Outputs are detached targets.
    """
    if p_t.dim() != 4:
        raise ValueError(f"expected (N, classes, H, W) probabilities, got {tuple(p_t.shape)}")
    p_t = p_t.detach()
    return PseudoLabel(labels=torch.argmax(p_t, dim=1), confidence=torch.amax(p_t, dim=1))


def pixel_ce(labels: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
    """Per-pixel -log p[label], log floored at LOG_FLOOR; (N, H, W)."""
    picked = torch.gather(p, 1, labels.unsqueeze(1)).squeeze(1)
    return -C.log(picked)


def loss_pl(pl: PseudoLabel, p_s: torch.Tensor, tau: float) -> torch.Tensor:
    """Confidence-gated cross-entropy, divided by the full pixel count H*W.

    Pixels with confidence <= tau contribute nothing; images are averaged.
    """
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    if p_s.shape[0] != pl.labels.shape[0] or p_s.shape[2:] != pl.labels.shape[1:]:
        raise ValueError(f"student probabilities {tuple(p_s.shape)} do not match labels {tuple(pl.labels.shape)}")
    gate = (pl.confidence > tau).to(p_s.dtype)
    h, w = pl.labels.shape[-2:]
    per_image = (gate * pixel_ce(pl.labels, p_s)).sum(dim=(1, 2)) / (h * w)
    return per_image.mean()


def cosine(z_s: torch.Tensor, z_t: torch.Tensor) -> torch.Tensor:
    """Row-wise cosine similarity of (N, d) embeddings."""
    if z_s.shape != z_t.shape:
        raise ValueError(f"embedding shapes differ: {tuple(z_s.shape)} vs {tuple(z_t.shape)}")
    ns, nt = C.l2_norm(z_s), C.l2_norm(z_t)
    if bool((ns == 0).any()) or bool((nt == 0).any()):
        raise ValueError("zero-norm embedding; cosine similarity undefined")
    return C.inner(z_s, z_t) / (ns * nt)


def loss_con(z_s: torch.Tensor, z_t: torch.Tensor, negate: bool = True) -> torch.Tensor:
    """Batch-mean consistency term; ``-cos`` by default so minimising aligns embeddings."""
    cos = cosine(z_s, z_t).mean()
    return -cos if negate else cos


def filter_objective(l_pl: torch.Tensor, l_mi: torch.Tensor, alpha1: float = 0.5) -> torch.Tensor:
    return l_pl + alpha1 * l_mi


def model_objective(l_pl: torch.Tensor, l_li: torch.Tensor, l_con: torch.Tensor,
                    alpha2: float = 1.0, alpha3: float = 1.0) -> torch.Tensor:
    return l_pl + alpha2 * l_li + alpha3 * l_con


def soft_dice_loss(p: torch.Tensor, target: torch.Tensor, eps: float = 1.0) -> torch.Tensor:
    """1 - soft Dice averaged over foreground classes (all classes if only one)."""
    k = p.shape[1]
    onehot = torch.nn.functional.one_hot(target, k).permute(0, 3, 1, 2).to(p.dtype)
    classes = slice(1, None) if k > 1 else slice(None)
    inter = (p * onehot).sum(dim=(0, 2, 3))[classes]
    denom = (p.sum(dim=(0, 2, 3)) + onehot.sum(dim=(0, 2, 3)))[classes]
    return 1.0 - ((2 * inter + eps) / (denom + eps)).mean()


def source_loss(p: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Supervised segmentation loss: pixel cross-entropy + soft Dice, equal weights."""
    return pixel_ce(target, p).mean() + soft_dice_loss(p, target)
