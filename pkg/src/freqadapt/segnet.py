"""U-Net segmentor with one shared encoder and twin (student / teacher) decoders."""

from __future__ import annotations

from typing import Mapping

import torch
from torch import nn

from . import compute as C
from .layers import Conv, DoubleConv, check_divisible

STUDENT = "student"
TEACHER = "teacher"


class CheckpointMismatch(ValueError):
    """Raised when stored tensors do not fit the target architecture."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("incompatible checkpoint:\n  " + "\n  ".join(problems))


class Encoder(nn.Module):
    def __init__(self, in_channels: int, base_width: int, levels: int, norm: bool = False):
        super().__init__()
        widths = [base_width * 2 ** i for i in range(levels)]
        ins = [in_channels] + widths[:-1]
        self.levels = nn.ModuleList(DoubleConv(i, o, norm) for i, o in zip(ins, widths))
        self.widths = widths

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for k, block in enumerate(self.levels):
            x = block(x if k == 0 else C.max_pool2x(x))
            feats.append(x)
        return feats


class Decoder(nn.Module):
    def __init__(self, widths: list[int], num_classes: int, norm: bool = False):
        super().__init__()
        self.blocks = nn.ModuleList(
            DoubleConv(widths[k + 1] + widths[k], widths[k], norm) for k in range(len(widths) - 2, -1, -1)
        )
        self.head = Conv(widths[0], num_classes, k=1)

    def reset(self, gen: torch.Generator) -> None:
        for b in self.blocks:
            b.reset(gen)
        self.head.reset(gen)

    def forward(self, feats: list[torch.Tensor]) -> torch.Tensor:
        x = feats[-1]
        for block, skip in zip(self.blocks, reversed(feats[:-1])):
            x = block(torch.cat([C.upsample2x(x), skip], dim=1))
        return self.head(x)


class Segmentor(nn.Module):
    """Shared encoder, student decoder and EMA teacher decoder.

    The embedding ``z`` is the global average of the bottleneck feature map,
    so ``embed_dim = base_width * 2 ** (levels - 1)`` for both branches.
    """

    def __init__(self, in_channels: int = 1, num_classes: int = 2, base_width: int = 8, levels: int = 3,
                 norm: bool = False):
        super().__init__()
        if levels < 1:
            raise ValueError("levels must be >= 1")
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.levels = levels
        self.norm = norm
        self.encoder = Encoder(in_channels, base_width, levels, norm)
        self.student = Decoder(self.encoder.widths, num_classes, norm)
        self.teacher = Decoder(self.encoder.widths, num_classes, norm)
        self.embed_dim = self.encoder.widths[-1]

    def reset(self, gen: torch.Generator) -> None:
        for block in self.encoder.levels:
            block.reset(gen)
        self.student.reset(gen)
        copy_teacher_from_student(self)

    def decoder(self, branch: str) -> Decoder:
        if branch == STUDENT:
            return self.student
        if branch == TEACHER:
            return self.teacher
        raise ValueError(f"branch must be '{STUDENT}' or '{TEACHER}', got {branch!r}")

    def forward(self, x: torch.Tensor, branch: str = STUDENT) -> tuple[torch.Tensor, torch.Tensor]:
        return seg_forward(self, x, branch)


def seg_forward(seg: Segmentor, x: torch.Tensor, branch: str = STUDENT) -> tuple[torch.Tensor, torch.Tensor]:
    """Returns ``(z, p)`` with ``z: (N, embed_dim)`` and ``p: (N, classes, H, W)``.

    Teacher outputs are computed without a tape: they are fixed targets.
    """
    dec = seg.decoder(branch)
    check_divisible(x, 2 ** (seg.levels - 1), "segmentor")
    if branch == TEACHER:
        with torch.no_grad():
            feats = seg.encoder(x)
            return C.global_avg_pool(feats[-1]), C.softmax(dec(feats), dim=1)
    feats = seg.encoder(x)
    return C.global_avg_pool(feats[-1]), C.softmax(dec(feats), dim=1)


def init_segmentor(seed: int, in_channels: int = 1, num_classes: int = 2, base_width: int = 8,
                   levels: int = 3, norm: bool = False) -> Segmentor:
    seg = Segmentor(in_channels, num_classes, base_width, levels, norm)
    seg.reset(C.seeded_generator(seed))
    return seg


def copy_teacher_from_student(seg: Segmentor) -> None:
    with torch.no_grad():
        for t, s in zip(seg.teacher.parameters(), seg.student.parameters()):
            t.copy_(s)


def source_params(seg: Segmentor) -> dict[str, torch.Tensor]:
    """The source model: shared encoder plus the (student) decoder."""
    return {k: v.detach().clone() for k, v in seg.state_dict().items()
            if k.startswith(("encoder.", "student."))}


def init_from_source(params: Mapping[str, torch.Tensor], in_channels: int = 1, num_classes: int = 2,
                     base_width: int = 8, levels: int = 3, norm: bool = False) -> Segmentor:
    """Build a segmentor whose encoder and both decoders come from the source model."""
    seg = Segmentor(in_channels, num_classes, base_width, levels, norm)
    own = {k: v for k, v in seg.state_dict().items() if k.startswith(("encoder.", "student."))}
    problems = []
    for name, t in own.items():
        if name not in params:
            problems.append(f"{name}: missing (expected {tuple(t.shape)})")
        elif tuple(params[name].shape) != tuple(t.shape):
            problems.append(f"{name}: stored {tuple(params[name].shape)} vs expected {tuple(t.shape)}")
    if problems:
        raise CheckpointMismatch(problems)
    with torch.no_grad():
        for name, t in own.items():
            t.copy_(params[name])
    copy_teacher_from_student(seg)
    return seg


def ema_update(teacher: nn.Module, student: nn.Module, eta: float) -> None:
    """theta_t <- eta * theta_t + (1 - eta) * theta_s, in place and off the tape."""
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"EMA coefficient must lie in [0, 1], got {eta}")
    tp, sp = list(teacher.parameters()), list(student.parameters())
    if [t.shape for t in tp] != [s.shape for s in sp]:
        raise ValueError("teacher and student parameter shapes differ")
    with torch.no_grad():
        for t, s in zip(tp, sp):
            t.mul_(eta).add_(s, alpha=1.0 - eta)
