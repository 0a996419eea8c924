"""Synthetic curvilinear-structure benchmark, dataset files and DSC / IoU."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage
from scipy.spatial import cKDTree

IMAGE_EXTS = (".png", ".pgm")
SENSOR_GRAIN = 0.07


@dataclass
class Sample:
    image: np.ndarray          # (C, H, W) float32 in [0, 1]
    mask: np.ndarray | None    # (H, W) int64 class map, None when unlabeled
    id: str


@dataclass(frozen=True)
class DomainShiftSpec:
    brightness_delta: float = 0.0
    contrast_gain: float = 1.0
    gamma: float = 1.0
    gaussian_noise_sigma: float = 0.0
    blur_radius: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.contrast_gain < 0 or self.gamma <= 0:
            raise ValueError("contrast_gain must be >= 0 and gamma > 0")
        if self.gaussian_noise_sigma < 0 or self.blur_radius < 0:
            raise ValueError("noise sigma and blur radius must be >= 0")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DomainShiftSpec":
        raw = json.loads(text)
        if not isinstance(raw, dict):
            raise ValueError("shift spec must be a JSON object")
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown shift fields: {sorted(unknown)}")
        return cls(**raw)


IDENTITY_SHIFT = DomainShiftSpec()


# ---------------------------------------------------------------------------
# generation


def _stroke_points(rng: np.random.Generator, size: int) -> np.ndarray:
    """Smooth random walk: heading driven by a bounded random curvature."""
    length = rng.uniform(0.5, 1.1) * size
    substeps = 4
    n = int(length * substeps)
    pos = rng.uniform(0.1, 0.9, size=2) * size
    heading = rng.uniform(0, 2 * np.pi)
    kappa = rng.normal(0, 0.002, size=n).cumsum()
    kappa = np.clip(kappa, -0.015, 0.015)
    angles = heading + np.cumsum(kappa)
    steps = np.stack([np.cos(angles), np.sin(angles)], axis=1) / substeps
    return pos + np.cumsum(steps, axis=0)


def _rasterize(points: np.ndarray, width: float, size: int) -> np.ndarray:
    inside = (points[:, 0] > -width) & (points[:, 0] < size + width) & \
             (points[:, 1] > -width) & (points[:, 1] < size + width)
    pts = points[inside]
    if len(pts) == 0:
        return np.zeros((size, size), dtype=bool)
    yy, xx = np.mgrid[0:size, 0:size]
    grid = np.stack([yy.ravel(), xx.ravel()], axis=1).astype(np.float64)
    dist, _ = cKDTree(pts).query(grid, k=1)
    return (dist <= width / 2.0).reshape(size, size)


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    noise = ndimage.gaussian_filter(rng.normal(size=(size, size)), sigma=size / 8, mode="wrap")
    noise = (noise - noise.mean()) / (noise.std() + 1e-12)
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    tilt = rng.uniform(-0.08, 0.08) * (yy - 0.5) + rng.uniform(-0.08, 0.08) * (xx - 0.5)
    return rng.uniform(0.5, 0.65) + 0.06 * noise + tilt


def clean_sample(seed: int, index: int, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Unshifted (image, mask) pair for one (seed, index)."""
    rng = np.random.default_rng([int(seed), int(index)])
    img = _background(rng, size)
    mask = np.zeros((size, size), dtype=bool)
    for _ in range(int(rng.integers(3, 9))):
        width = float(rng.integers(1, 4))
        stroke = _rasterize(_stroke_points(rng, size), width, size)
        depth = rng.uniform(0.18, 0.3)
        img = np.where(stroke & ~mask, img - depth, img)
        mask |= stroke
    img = img + rng.normal(0.0, SENSOR_GRAIN, size=img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return img[None], mask.astype(np.int64)


def apply_shift(image: np.ndarray, spec: DomainShiftSpec, rng: np.random.Generator | None = None,
                clamp: bool = True) -> np.ndarray:
    """contrast -> gamma -> brightness -> blur -> additive noise -> clamp.

    Stages at their identity setting are skipped, so the identity spec returns
    the input unchanged.
    """
    x = np.asarray(image, dtype=np.float64)
    if spec.contrast_gain != 1.0:
        x = 0.5 + spec.contrast_gain * (x - 0.5)
    if spec.gamma != 1.0:
        x = np.clip(x, 0.0, 1.0) ** spec.gamma
    if spec.brightness_delta != 0.0:
        x = x + spec.brightness_delta
    if spec.blur_radius > 0:
        sig = (0,) * (x.ndim - 2) + (spec.blur_radius, spec.blur_radius)
        x = ndimage.gaussian_filter(x, sigma=sig, mode="reflect")
    if spec.gaussian_noise_sigma > 0:
        rng = rng if rng is not None else np.random.default_rng(spec.seed)
        x = x + rng.normal(0.0, spec.gaussian_noise_sigma, size=x.shape)
    if clamp:
        x = np.clip(x, 0.0, 1.0)
    return x.astype(np.asarray(image).dtype, copy=False)


def synth_generate(n: int, spec: DomainShiftSpec = IDENTITY_SHIFT, seed: int = 0, size: int = 64) -> list[Sample]:
    """n labelled samples; the clean content depends only on (seed, index)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if size % 4:
        raise ValueError(f"size must be divisible by 4, got {size}")
    out = []
    for i in range(n):
        img, mask = clean_sample(seed, i, size)
        rng = np.random.default_rng([int(spec.seed), int(seed), i])
        out.append(Sample(apply_shift(img, spec, rng=rng), mask, f"{i:05d}"))
    return out


# ---------------------------------------------------------------------------
# files


def _read_gray(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "P", "1"):
                im = im.convert("L")
            return np.asarray(im, dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise ValueError(f"cannot read image file {path}: {exc}") from exc


def _find(folder: Path) -> dict[str, Path]:
    if not folder.is_dir():
        return {}
    found: dict[str, Path] = {}
    for p in folder.iterdir():
        if p.suffix.lower() in IMAGE_EXTS:
            if p.stem in found:
                raise ValueError(f"duplicate id {p.stem!r} in {folder}")
            found[p.stem] = p
    return found


def load_dataset(root: str | Path) -> list[Sample]:
    """Read ``images/<id>.png|pgm`` with optional ``masks/<id>.png|pgm``.

    Mask value 255 means class 1; other values are taken as class indices.
    """
    root = Path(root)
    images, masks = _find(root / "images"), _find(root / "masks")
    out = []
    for sid in sorted(images):
        img = _read_gray(images[sid])
        mask = None
        if sid in masks:
            m = _read_gray(masks[sid])
            if m.shape != img.shape:
                raise ValueError(f"mask {masks[sid]} has shape {m.shape}, image has {img.shape}")
            mask = np.where(m == 255, 1, m).astype(np.int64)
        out.append(Sample((img.astype(np.float32) / 255.0)[None], mask, sid))
    return out


def save_dataset(samples: Iterable[Sample], root: str | Path, fmt: str = "png") -> int:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    count = 0
    for s in samples:
        if s.image.shape[0] != 1:
            raise ValueError("only single-channel images can be written as 8-bit grayscale")
        px = np.round(np.clip(s.image[0], 0, 1) * 255).astype(np.uint8)
        Image.fromarray(px).save(root / "images" / f"{s.id}.{fmt}")
        if s.mask is not None:
            (root / "masks").mkdir(exist_ok=True)
            m = s.mask.astype(np.uint8)
            if m.max(initial=0) <= 1:
                m = m * 255
            Image.fromarray(m).save(root / "masks" / f"{s.id}.{fmt}")
        count += 1
    return count


def stack_images(samples: Sequence[Sample]) -> np.ndarray:
    return np.stack([s.image for s in samples]).astype(np.float32)


def stack_masks(samples: Sequence[Sample]) -> np.ndarray:
    if any(s.mask is None for s in samples):
        raise ValueError("dataset contains unlabeled samples")
    return np.stack([s.mask for s in samples])


# ---------------------------------------------------------------------------
# metrics


def _sets(pred: np.ndarray, gt: np.ndarray, class_id: int) -> tuple[np.ndarray, np.ndarray]:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred == class_id, gt == class_id


def dsc(pred: np.ndarray, gt: np.ndarray, class_id: int = 1) -> float:
    """2|P & G| / (|P| + |G|); 1.0 when both are empty."""
    p, g = _sets(pred, gt, class_id)
    total = int(p.sum()) + int(g.sum())
    return 1.0 if total == 0 else 2.0 * int((p & g).sum()) / total


def iou(pred: np.ndarray, gt: np.ndarray, class_id: int = 1) -> float:
    """|P & G| / |P | G|; 1.0 when both are empty."""
    p, g = _sets(pred, gt, class_id)
    union = int((p | g).sum())
    return 1.0 if union == 0 else int((p & g).sum()) / union


def write_metrics_csv(rows: Sequence[tuple[str, float, float]], path: str | Path) -> None:
    """Per-sample rows plus a trailing ``mean`` summary row."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "dsc", "iou"])
        for sid, d, j in rows:
            w.writerow([sid, f"{d:.6f}", f"{j:.6f}"])
        if rows:
            w.writerow(["mean", f"{np.mean([r[1] for r in rows]):.6f}", f"{np.mean([r[2] for r in rows]):.6f}"])
        else:
            w.writerow(["mean", "nan", "nan"])
