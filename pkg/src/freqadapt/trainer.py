"""Source pre-training, filter-driven source-free adaptation, evaluation, checkpoints."""

from __future__ import annotations

import contextlib
import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
import torch
from scipy import ndimage
from torch import nn

from . import compute as C
from .data import Sample, dsc, iou, stack_images, stack_masks, write_metrics_csv
from .filtnet import InformationFilter, filter_forward, init_filter
from .mi import VariationalGaussian, init_variational, loss_likelihood, loss_mi
from .objectives import (filter_objective, loss_con, loss_pl, model_objective, pseudo_label,
                         source_loss)
from .segnet import (STUDENT, TEACHER, CheckpointMismatch, Segmentor, copy_teacher_from_student,
                     ema_update, init_from_source, init_segmentor, seg_forward)
from .spectral import filter_with_mask, fixed_highpass_mask

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# configuration


@dataclass
class AdaptConfig:
    tau: float = 0.8
    alpha1: float = 0.5
    alpha2: float = 1.0
    alpha3: float = 1.0
    eta: float = 0.9995
    lr: float = 1e-3
    batch_size: int = 2
    epochs: int = 40
    seed: int = 0
    image_size: int = 64
    in_channels: int = 1
    num_classes: int = 2
    seg_width: int = 8
    seg_levels: int = 3
    # per-sample instance normalisation inside the segmentor (no running statistics)
    seg_norm: bool = True
    filter_width: int = 4
    q_hidden: int = 1024
    # a floor well above the module default keeps the frozen-q CLUB gradient on the filter bounded
    q_logvar_min: float = -1.0
    q_logvar_max: float = 10.0
    # Adam steps fitting q alone on L_Li before the first adaptation iteration
    q_warmup: int = 500
    # False flips the consistency term to raw cosine similarity
    negate_consistency: bool = True
    # "learned" | "fixed" | "none"
    filter_mode: str = "learned"
    highpass_threshold: float = 0.0
    # pre-training only: held-out fraction used to pick the best epoch
    val_fraction: float = 0.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("tau", "eta", "highpass_threshold"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        for name in ("alpha1", "alpha2", "alpha3", "lr"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.q_warmup < 0:
            raise ValueError("q_warmup must be >= 0")
        for name in ("batch_size", "in_channels", "seg_width", "seg_levels", "filter_width", "q_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.filter_mode not in ("learned", "fixed", "none"):
            raise ValueError(f"filter_mode must be learned|fixed|none, got {self.filter_mode!r}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, raw: dict) -> "AdaptConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**raw)

    @classmethod
    def from_json(cls, text: str) -> "AdaptConfig":
        return cls.from_dict(json.loads(text))

    def replace(self, **changes) -> "AdaptConfig":
        return AdaptConfig.from_dict({**self.to_dict(), **changes})


def lr_at(epoch: int, epochs: int, lr0: float) -> float:
    """Constant for the first half, then linear decay reaching 0 at the end of training."""
    half = epochs // 2
    if epoch < half:
        return lr0
    return lr0 * (epochs - epoch) / (epochs - half)


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"AIFW"
VERSION = 1
DTYPE_F32 = 0


class CheckpointFormatError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, torch.Tensor]
    config: dict
    history: list[dict] = field(default_factory=list, compare=False)

    def group(self, prefix: str) -> dict[str, torch.Tensor]:
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}

    @property
    def adapt_config(self) -> AdaptConfig:
        return AdaptConfig.from_dict(self.config)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(ckpt.tensors))]
    for name, t in ckpt.tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]}...")
        arr = t.detach().cpu().contiguous().to(torch.float32).numpy()
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(struct.pack("<B", DTYPE_F32))
        out.append(arr.astype("<f4", copy=False).tobytes(order="C"))
    cfg = json.dumps(ckpt.config, sort_keys=True).encode("utf-8")
    out.append(struct.pack("<I", len(cfg)) + cfg)
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointFormatError(
                f"truncated checkpoint at byte offset {self.pos}: need {n} bytes for {what}, "
                f"{len(self.buf) - self.pos} left"
            )
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def parse_checkpoint(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r} at byte offset 0 (expected {MAGIC!r})")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported version {version} at byte offset 4")
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H", "name length")
        start = r.pos
        try:
            name = r.take(nlen, "name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError(f"invalid UTF-8 tensor name at byte offset {start}") from exc
        (rank,) = r.unpack("<B", f"rank of {name}")
        shape = r.unpack(f"<{rank}I", f"dims of {name}") if rank else ()
        dt_off = r.pos
        (dtype,) = r.unpack("<B", f"dtype of {name}")
        if dtype != DTYPE_F32:
            raise CheckpointFormatError(f"unsupported dtype code {dtype} at byte offset {dt_off}")
        numel = int(np.prod(shape, dtype=np.int64)) if rank else 1
        payload = r.take(4 * numel, f"payload of {name}")
        arr = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
        tensors[name] = torch.from_numpy(arr.copy())
    (clen,) = r.unpack("<I", "config length")
    cfg_off = r.pos
    try:
        config = json.loads(r.take(clen, "config").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"bad config JSON at byte offset {cfg_off}: {exc}") from exc
    if r.pos != len(buf):
        raise CheckpointFormatError(f"{len(buf) - r.pos} trailing bytes at byte offset {r.pos}")
    return Checkpoint(tensors, config)


def load_checkpoint(path: str | Path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())


def _collect(prefix: str, module: nn.Module) -> dict[str, torch.Tensor]:
    return {f"{prefix}.{k}": v.detach().clone().float() for k, v in module.state_dict().items()}


def make_checkpoint(config: AdaptConfig, seg: Segmentor, filt: InformationFilter | None = None,
                    q: VariationalGaussian | None = None) -> Checkpoint:
    tensors: dict[str, torch.Tensor] = {}
    for name in ("encoder", "student", "teacher"):
        tensors.update(_collect(name, getattr(seg, name)))
    if filt is not None:
        tensors.update(_collect("filter", filt))
    if q is not None:
        tensors.update(_collect("q", q))
    return Checkpoint(tensors, config.to_dict())


def _load_module(module: nn.Module, params: dict[str, torch.Tensor], prefix: str) -> None:
    own = module.state_dict()
    problems = [f"{prefix}.{k}: missing" for k in own if k not in params]
    problems += [f"{prefix}.{k}: stored {tuple(params[k].shape)} vs expected {tuple(v.shape)}"
                 for k, v in own.items() if k in params and params[k].shape != v.shape]
    if problems:
        raise CheckpointMismatch(problems)
    module.load_state_dict(params)


def restore(ckpt: Checkpoint, config: AdaptConfig | None = None):
    """Rebuild (segmentor, filter or None, q or None) from a checkpoint."""
    cfg = config or ckpt.adapt_config
    seg = Segmentor(cfg.in_channels, cfg.num_classes, cfg.seg_width, cfg.seg_levels, cfg.seg_norm)
    for name in ("encoder", "student", "teacher"):
        _load_module(getattr(seg, name), ckpt.group(name), name)
    filt = q = None
    if ckpt.group("filter"):
        filt = InformationFilter(cfg.in_channels, cfg.filter_width)
        _load_module(filt, ckpt.group("filter"), "filter")
    if ckpt.group("q"):
        q = VariationalGaussian(seg.embed_dim, cfg.q_hidden, cfg.q_logvar_min, cfg.q_logvar_max)
        _load_module(q, ckpt.group("q"), "q")
    return seg, filt, q


# ---------------------------------------------------------------------------
# helpers


@contextlib.contextmanager
def frozen(*modules: nn.Module | None) -> Iterator[None]:
    """Temporarily stop gradient recording for the given modules' parameters."""
    params = [p for m in modules if m is not None for p in m.parameters()]
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, flag in zip(params, saved):
            p.requires_grad_(flag)


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _named(prefix: str, module: nn.Module) -> list[tuple[str, nn.Parameter]]:
    return [(f"{prefix}.{k}", p) for k, p in module.named_parameters()]


def _sample_scores(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> tuple[float, float]:
    classes = range(1, num_classes)
    return (float(np.mean([dsc(pred, gt, c) for c in classes])),
            float(np.mean([iou(pred, gt, c) for c in classes])))


class TrainingDiverged(FloatingPointError):
    pass


def _check_finite(iteration: int, **losses: torch.Tensor) -> None:
    vals = {k: float(v.detach()) for k, v in losses.items()}
    if not all(math.isfinite(v) for v in vals.values()):
        breakdown = ", ".join(f"{k}={v:.6g}" for k, v in vals.items())
        raise TrainingDiverged(f"non-finite loss at iteration {iteration}: {breakdown}")


# ---------------------------------------------------------------------------
# filtering at inference / adaptation time


class FixedFilter:
    """A non-learnable high-pass spectral mask standing in for the learned filter."""

    def __init__(self, size_hw: tuple[int, int], threshold: float):
        self.threshold = threshold
        self.mask = fixed_highpass_mask(size_hw[0], size_hw[1], threshold)

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        return filter_with_mask(x, self.mask.to(x.dtype))


def apply_filter(filt, x: torch.Tensor) -> torch.Tensor:
    if filt is None:
        return x
    if isinstance(filt, InformationFilter):
        return filter_forward(filt, x)[0]
    return filt(x)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    rows: list[tuple[str, float, float]]
    predictions: np.ndarray | None = None

    @property
    def mean_dsc(self) -> float:
        return float(np.mean([r[1] for r in self.rows])) if self.rows else float("nan")

    @property
    def mean_iou(self) -> float:
        return float(np.mean([r[2] for r in self.rows])) if self.rows else float("nan")

    def write_csv(self, path: str | Path) -> None:
        write_metrics_csv(self.rows, path)


def predict(seg: Segmentor, images: np.ndarray, filt=None, chunk: int = 16) -> np.ndarray:
    """Student-branch argmax labels for (N, C, H, W) images, optionally filtered first."""
    out = []
    with torch.no_grad():
        for i in range(0, len(images), chunk):
            x = torch.from_numpy(images[i:i + chunk])
            _, p = seg_forward(seg, apply_filter(filt, x), STUDENT)
            out.append(torch.argmax(p, dim=1).numpy())
    return np.concatenate(out) if out else np.zeros((0,) + images.shape[2:], dtype=np.int64)


def build_filter(ckpt: Checkpoint, cfg: AdaptConfig, filt: InformationFilter | None):
    if cfg.filter_mode == "fixed":
        return FixedFilter((cfg.image_size, cfg.image_size), cfg.highpass_threshold)
    return filt


def evaluate(ckpt: Checkpoint, dataset: Sequence[Sample], use_filter: bool = True) -> EvalResult:
    """Per-sample DSC / IoU of the student branch on f(x) (or x when use_filter is False)."""
    if not dataset:
        return EvalResult([])
    masks = stack_masks(dataset)
    cfg = ckpt.adapt_config
    seg, filt, _ = restore(ckpt, cfg)
    images = stack_images(dataset)
    chosen = None
    if use_filter:
        chosen = build_filter(ckpt, cfg.replace(image_size=images.shape[-1]), filt)
    pred = predict(seg, images, chosen)
    rows = [(s.id, *_sample_scores(pr, m, cfg.num_classes)) for s, pr, m in zip(dataset, pred, masks)]
    return EvalResult(rows, pred)


def edge_gradient(images: np.ndarray, masks: np.ndarray, band: int = 2) -> float:
    """Mean Sobel magnitude within ``band`` pixels of ground-truth foreground."""
    vals = []
    for img, m in zip(images, masks):
        fg = m > 0
        if not fg.any():
            continue
        zone = ndimage.binary_dilation(fg, iterations=band)
        g = img[0].astype(np.float64)
        mag = np.hypot(ndimage.sobel(g, axis=0), ndimage.sobel(g, axis=1))
        vals.append(mag[zone].mean())
    return float(np.mean(vals)) if vals else float("nan")


def filtered_images(ckpt: Checkpoint, images: np.ndarray) -> np.ndarray:
    cfg = ckpt.adapt_config
    _, filt, _ = restore(ckpt, cfg)
    chosen = build_filter(ckpt, cfg.replace(image_size=images.shape[-1]), filt)
    with torch.no_grad():
        return apply_filter(chosen, torch.from_numpy(images)).numpy()


# ---------------------------------------------------------------------------
# source pre-training


def pretrain_source(dataset: Sequence[Sample], config: AdaptConfig) -> Checkpoint:
    """Supervised training of encoder + decoder on labelled source data.

    ``history`` on the returned checkpoint holds the per-epoch training DSC
    (and validation DSC when ``val_fraction > 0``, in which case the best
    validation epoch is kept).
    """
    if any(s.mask is None for s in dataset):
        raise ValueError("source pre-training needs a fully labelled dataset")
    cfg = config
    rng = np.random.default_rng([cfg.seed, 11])
    samples = list(dataset)
    val: list[Sample] = []
    if cfg.val_fraction > 0 and len(samples) > 1:
        perm = rng.permutation(len(samples))
        n_val = max(1, int(round(cfg.val_fraction * len(samples))))
        val = [samples[i] for i in sorted(perm[:n_val])]
        samples = [samples[i] for i in sorted(perm[n_val:])]
    images, masks = stack_images(samples), stack_masks(samples)
    seg = init_segmentor(cfg.seed, cfg.in_channels, cfg.num_classes, cfg.seg_width, cfg.seg_levels, cfg.seg_norm)
    opt = C.Adam(_named("encoder", seg.encoder) + _named("student", seg.student), lr=cfg.lr)
    history: list[dict] = []
    best: tuple[float, Checkpoint] | None = None
    for epoch in range(cfg.epochs):
        opt.lr = lr_at(epoch, cfg.epochs, cfg.lr)
        losses = []
        for it, idx in enumerate(_batches(len(samples), cfg.batch_size, rng)):
            x = torch.from_numpy(images[idx])
            y = torch.from_numpy(masks[idx])
            _, p = seg_forward(seg, x, STUDENT)
            loss = source_loss(p, y)
            _check_finite(epoch * len(samples) + it, source_loss=loss)
            opt.zero_grad()
            C.backward(loss)
            opt.step()
            losses.append(float(loss.detach()))
        copy_teacher_from_student(seg)
        ckpt = make_checkpoint(cfg, seg)
        row = {"epoch": epoch, "loss": float(np.mean(losses)), "lr": opt.lr,
               "train_dsc": evaluate(ckpt, samples, use_filter=False).mean_dsc}
        if val:
            row["val_dsc"] = evaluate(ckpt, val, use_filter=False).mean_dsc
            if best is None or row["val_dsc"] > best[0]:
                best = (row["val_dsc"], ckpt)
        history.append(row)
        log.info("pretrain epoch %d: %s", epoch, row)
    copy_teacher_from_student(seg)
    out = best[1] if best is not None else make_checkpoint(cfg, seg)
    out.history = history
    return out


# ---------------------------------------------------------------------------
# adaptation

LOG_FIELDS = ("epoch", "loss_pl", "loss_mi", "loss_li", "loss_con", "lr")

# callback(stage, iteration) with stage in {"step1", "step2", "ema"}
Hook = Callable[[str, int], None]


@dataclass
class Adapter:
    """Mutable adaptation state: the models and the two optimiser groups."""

    config: AdaptConfig
    seg: Segmentor
    filt: InformationFilter | None
    q: VariationalGaussian
    fixed: FixedFilter | None = None
    opt_filter: C.Adam | None = None
    opt_model: C.Adam | None = None

    @classmethod
    def from_source(cls, source: Checkpoint, config: AdaptConfig) -> "Adapter":
        cfg = config
        seg = init_from_source({**{f"encoder.{k}": v for k, v in source.group("encoder").items()},
                                **{f"student.{k}": v for k, v in source.group("student").items()}},
                               cfg.in_channels, cfg.num_classes, cfg.seg_width, cfg.seg_levels, cfg.seg_norm)
        filt = fixed = None
        if cfg.filter_mode == "learned":
            filt = init_filter(cfg.seed + 1, cfg.in_channels, cfg.filter_width)
        elif cfg.filter_mode == "fixed":
            fixed = FixedFilter((cfg.image_size, cfg.image_size), cfg.highpass_threshold)
        q = init_variational(cfg.seed + 2, seg.embed_dim, cfg.q_hidden, cfg.q_logvar_min, cfg.q_logvar_max)
        ad = cls(cfg, seg, filt, q, fixed)
        if filt is not None:
            ad.opt_filter = C.Adam(_named("filter", filt), lr=cfg.lr)
        ad.opt_model = C.Adam(_named("encoder", seg.encoder) + _named("student", seg.student)
                              + _named("q", q), lr=cfg.lr)
        return ad

    def set_lr(self, lr: float) -> None:
        for opt in (self.opt_filter, self.opt_model):
            if opt is not None:
                opt.lr = lr

    def warm_up_q(self, images: np.ndarray, rng: np.random.Generator) -> float | None:
        """Fit q alone on L_Li with every other parameter fixed; returns the last loss."""
        cfg = self.config
        if cfg.q_warmup == 0:
            return None
        opt = C.Adam(_named("q", self.q), lr=cfg.lr)
        size = min(cfg.batch_size, len(images))
        loss = None
        for _ in range(cfg.q_warmup):
            x = torch.from_numpy(images[rng.choice(len(images), size, replace=False)])
            with torch.no_grad():
                z_t, _ = seg_forward(self.seg, x, TEACHER)
                z_s, _ = seg_forward(self.seg, self.filtered(x), STUDENT)
            loss = loss_likelihood(self.q, z_s, z_t)
            opt.zero_grad()
            C.backward(loss)
            opt.step()
        return float(loss.detach())

    def filtered(self, x: torch.Tensor) -> torch.Tensor:
        if self.filt is not None:
            return filter_forward(self.filt, x)[0]
        if self.fixed is not None:
            return self.fixed(x)
        return x

    def iteration(self, x: torch.Tensor, it: int, hook: Hook | None = None) -> dict[str, float]:
        """One pass of the two-step update followed by the teacher EMA."""
        cfg, seg, q = self.config, self.seg, self.q
        z_t, p_t = seg_forward(seg, x, TEACHER)
        pl = pseudo_label(p_t)
        stats: dict[str, float] = {}

        # step 1: filter only, everything downstream frozen
        if self.filt is not None:
            with frozen(seg, q):
                x_f, _ = filter_forward(self.filt, x)
                z_s, p_s = seg_forward(seg, x_f, STUDENT)
                l_pl1 = loss_pl(pl, p_s, cfg.tau)
                l_mi = loss_mi(q, z_s, z_t)
                loss1 = filter_objective(l_pl1, l_mi, cfg.alpha1)
                _check_finite(it, loss_pl=l_pl1, loss_mi=l_mi, filter_objective=loss1)
                self.opt_filter.zero_grad()
                if loss1.requires_grad:
                    C.backward(loss1)
                self.opt_filter.step()
            stats["loss_mi"] = float(l_mi.detach())
        if hook:
            hook("step1", it)

        # step 2: encoder, student decoder and q; the filter is a fixed preprocessor
        with torch.no_grad():
            x_f = self.filtered(x)
        z_s, p_s = seg_forward(seg, x_f, STUDENT)
        l_pl = loss_pl(pl, p_s, cfg.tau)
        l_li = loss_likelihood(q, z_s, z_t)
        l_con = loss_con(z_s, z_t, negate=cfg.negate_consistency)
        loss2 = model_objective(l_pl, l_li, l_con, cfg.alpha2, cfg.alpha3)
        _check_finite(it, loss_pl=l_pl, loss_li=l_li, loss_con=l_con, model_objective=loss2)
        if "loss_mi" not in stats:
            with torch.no_grad():
                stats["loss_mi"] = float(loss_mi(q, z_s, z_t))
        self.opt_model.zero_grad()
        C.backward(loss2)
        self.opt_model.step()
        if hook:
            hook("step2", it)

        ema_update(seg.teacher, seg.student, cfg.eta)
        if hook:
            hook("ema", it)
        stats.update(loss_pl=float(l_pl.detach()), loss_li=float(l_li.detach()), loss_con=float(l_con.detach()))
        return stats

    def checkpoint(self) -> Checkpoint:
        return make_checkpoint(self.config, self.seg, self.filt, self.q)


def adapt(target: Sequence[Sample], source: Checkpoint, config: AdaptConfig,
          hook: Hook | None = None) -> Checkpoint:
    """Unsupervised adaptation on target images; masks, if present, are ignored.

    q is first fitted alone for ``q_warmup`` steps so that L_Li starts from a
    meaningful density. Per iteration: teacher pass on x, step 1 updates the filter on
    L_PL + a1 L_MI, step 2 recomputes the student pass on the updated filter
    output and updates encoder / student / q on L_PL + a2 L_Li + a3 L_Con,
    then the teacher decoder tracks the student by EMA. The last epoch's
    parameters are returned; ``history`` holds one log row per epoch.
    """
    cfg = config
    if not target:
        raise ValueError("empty target dataset")
    images = stack_images(target)
    if images.shape[-1] != cfg.image_size or images.shape[-2] != cfg.image_size:
        cfg = cfg.replace(image_size=images.shape[-1])
    ad = Adapter.from_source(source, cfg)
    rng = np.random.default_rng([cfg.seed, 23])
    warm = ad.warm_up_q(images, rng)
    if warm is not None:
        log.info("q warm-up: L_Li %.4f after %d steps", warm, cfg.q_warmup)
    history = []
    it = 0
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg.epochs, cfg.lr)
        ad.set_lr(lr)
        acc: dict[str, list[float]] = {}
        for idx in _batches(len(images), cfg.batch_size, rng):
            stats = ad.iteration(torch.from_numpy(images[idx]), it, hook)
            for k, v in stats.items():
                acc.setdefault(k, []).append(v)
            it += 1
        row = {"epoch": epoch, **{k: float(np.mean(acc[k])) for k in LOG_FIELDS[1:-1]}, "lr": lr}
        history.append(row)
        log.info("adapt epoch %d: %s", epoch, row)
    out = ad.checkpoint()
    out.history = history
    return out


def write_log_csv(history: Sequence[dict], path: str | Path, fields_: Sequence[str] = LOG_FIELDS) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields_), extrasaction="ignore")
        w.writeheader()
        for row in history:
            w.writerow(row)
