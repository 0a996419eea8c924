"""Differentiable array operations and the Adam optimizer.

Every array in the pipeline is a ``torch.Tensor`` (aliased here as ``DiffArray``)
and gradients come from torch's define-by-run autograd: the tape is rebuilt on
each forward pass. The functions below pin down the exact operation set, shape
rules and numeric guards the rest of the package relies on.

Backward semantics: gradients accumulate into ``.grad`` of leaf tensors across
backward passes on *different* graphs; calling :func:`backward` twice on the same
graph raises ``RuntimeError`` because the tape is released after the first pass.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import torch
import torch.nn.functional as F

DiffArray = torch.Tensor

LOG_FLOOR = 1e-12
LEAKY_SLOPE = 0.01


def tensor(data, dtype: torch.dtype = torch.float32, requires_grad: bool = False) -> DiffArray:
    return torch.tensor(data, dtype=dtype, requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# convolution


def conv2d(x: DiffArray, kernel: DiffArray, bias: DiffArray | None = None,
           stride: int = 1, padding: int = 0) -> DiffArray:
    """Cross-correlation of an NCHW input with an OIkk kernel.

    Output spatial size per dim is ``(H + 2*padding - k) // stride + 1``.
    """
    if x.dim() != 4:
        raise ValueError(f"conv2d input must be NCHW, got shape {tuple(x.shape)}")
    if kernel.dim() != 4:
        raise ValueError(f"conv2d kernel must be OIkk, got shape {tuple(kernel.shape)}")
    n, c, h, w = x.shape
    o, i, kh, kw = kernel.shape
    if c != i:
        raise ValueError(f"conv2d channel mismatch: input has {c} channels, kernel expects {i}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ValueError(
            f"conv2d kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}"
        )
    if bias is not None and bias.shape != (o,):
        raise ValueError(f"conv2d bias must have shape ({o},), got {tuple(bias.shape)}")
    return F.conv2d(x, kernel, bias, stride=stride, padding=padding)


# ---------------------------------------------------------------------------
# elementwise suite


def add(a: DiffArray, b: DiffArray) -> DiffArray:
    return a + b


def subtract(a: DiffArray, b: DiffArray) -> DiffArray:
    return a - b


def hadamard(a: DiffArray, b: DiffArray) -> DiffArray:
    """Elementwise product; shapes must match exactly (no broadcasting)."""
    if a.shape != b.shape:
        raise ValueError(f"hadamard shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return a * b


def scale(a: DiffArray, s: float) -> DiffArray:
    return a * s


def exp(a: DiffArray) -> DiffArray:
    return torch.exp(a)


def log(a: DiffArray) -> DiffArray:
    """Natural log with inputs clamped at ``LOG_FLOOR`` (no -inf)."""
    return torch.log(torch.clamp(a, min=LOG_FLOOR))


def leaky_relu(a: DiffArray, slope: float = LEAKY_SLOPE) -> DiffArray:
    return F.leaky_relu(a, slope)


def sigmoid(a: DiffArray) -> DiffArray:
    return torch.sigmoid(a)


def mean(a: DiffArray) -> DiffArray:
    """Mean over all elements -> scalar."""
    return a.mean()


def sum(a: DiffArray) -> DiffArray:  # noqa: A001 - mirrors the op name
    """Sum over all elements -> scalar."""
    return a.sum()


def softmax(logits: DiffArray, dim: int = 1) -> DiffArray:
    """Softmax over the class axis (dim 1 for NCHW); shape preserved."""
    return torch.softmax(logits, dim=dim)


def instance_norm(a: DiffArray, eps: float = 1e-5) -> DiffArray:
    """Per-sample, per-channel standardisation over the spatial axes."""
    mu = a.mean(dim=(-2, -1), keepdim=True)
    var = ((a - mu) ** 2).mean(dim=(-2, -1), keepdim=True)
    return (a - mu) / torch.sqrt(var + eps)


def upsample2x(a: DiffArray) -> DiffArray:
    """Nearest-neighbour 2x upsample: (N,C,H,W) -> (N,C,2H,2W)."""
    return F.interpolate(a, scale_factor=2, mode="nearest")


def _check_even(a: DiffArray, op: str) -> None:
    if a.shape[-1] % 2 or a.shape[-2] % 2:
        raise ValueError(f"{op} needs even spatial dims, got {tuple(a.shape[-2:])}")


def max_pool2x(a: DiffArray) -> DiffArray:
    """2x2 max downsample: (N,C,H,W) -> (N,C,H/2,W/2)."""
    _check_even(a, "max_pool2x")
    return F.max_pool2d(a, 2)


def avg_pool2x(a: DiffArray) -> DiffArray:
    """2x2 average downsample: (N,C,H,W) -> (N,C,H/2,W/2)."""
    _check_even(a, "avg_pool2x")
    return F.avg_pool2d(a, 2)


def global_avg_pool(a: DiffArray) -> DiffArray:
    """Mean over spatial dims: (N,C,H,W) -> (N,C)."""
    return a.mean(dim=(-2, -1))


def matmul(a: DiffArray, b: DiffArray) -> DiffArray:
    """Matrix product with batch broadcasting: (...,m,k) @ (...,k,n) -> (...,m,n)."""
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dims differ: {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def l2_norm(a: DiffArray, dim: int = -1) -> DiffArray:
    """Euclidean norm along ``dim`` (dim removed)."""
    return torch.linalg.vector_norm(a, dim=dim)


def inner(a: DiffArray, b: DiffArray, dim: int = -1) -> DiffArray:
    """Inner product along ``dim`` (dim removed)."""
    if a.shape != b.shape:
        raise ValueError(f"inner shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a * b).sum(dim=dim)


# ---------------------------------------------------------------------------
# backward


def backward(loss: DiffArray) -> None:
    if loss.numel() != 1 or loss.dim() > 1:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise ValueError("loss is not connected to any tensor that requires grad")
    loss.backward()


def numeric_grad(fn: Callable[[DiffArray], DiffArray], x: DiffArray, eps: float = 1e-6) -> DiffArray:
    """Central finite-difference gradient of scalar ``fn`` at ``x``.

    Only forward evaluations are used, so this is independent of autograd.
    """
    x = x.detach().clone()
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    with torch.no_grad():
        for k in range(flat.numel()):
            orig = flat[k].item()
            flat[k] = orig + eps
            fp = float(fn(x))
            flat[k] = orig - eps
            fm = float(fn(x))
            flat[k] = orig
            gflat[k] = (fp - fm) / (2 * eps)
    return g


def relative_error(analytic: DiffArray, numeric: DiffArray, floor: float = 1e-6) -> float:
    """max |a - n| / max(max|n|, floor): one scale for the whole gradient."""
    denom = max(float(numeric.abs().max()), floor)
    return float((analytic - numeric).abs().max()) / denom


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, torch.Tensor] = field(default_factory=dict)
    second_moment: dict[str, torch.Tensor] = field(default_factory=dict)


def adam_step(params: Mapping[str, DiffArray], grads: Mapping[str, DiffArray | None],
              state: AdamState) -> None:
    """One bias-corrected Adam update, in place on ``params``.

    Parameters whose gradient is ``None`` are skipped and keep their moments.
    """
    if state.lr < 0:
        raise ValueError(f"learning rate must be >= 0, got {state.lr}")
    for name, g in grads.items():
        if g is not None and not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter '{name}'")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {tuple(g.shape)} != parameter '{name}' {tuple(p.shape)}")
            m = state.first_moment.get(name)
            if m is None:
                m = state.first_moment[name] = torch.zeros_like(p)
                state.second_moment[name] = torch.zeros_like(p)
            v = state.second_moment[name]
            m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            denom = (v / bc2).sqrt_().add_(state.epsilon)
            p.addcdiv_(m, denom, value=-state.lr / bc1)


class Adam:
    """Adam over a fixed, named parameter group; reads gradients from ``.grad``."""

    def __init__(self, named_params: Iterable[tuple[str, torch.nn.Parameter]], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        self.params = dict(named_params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = value

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, {k: p.grad for k, p in self.params.items()}, self.state)


def seeded_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed) % (2 ** 63))
    return g


def fingerprint(tensors: Iterable[torch.Tensor]) -> str:
    """Content hash of a tensor sequence (bit-level), for parameter audits."""
    h = hashlib.sha256()
    for t in tensors:
        h.update(t.detach().contiguous().cpu().numpy().tobytes())
    return h.hexdigest()

