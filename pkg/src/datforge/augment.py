"""Weak (crop, flip) and strong (photometric + Cutout) augmentation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from datforge.scenegen import BoxLabel, LabeledImage


@dataclass(frozen=True)
class GeometricRecord:
    crop_x: float
    crop_y: float
    crop_size: float
    flip: bool

    @classmethod
    def identity(cls, image_size: int) -> "GeometricRecord":
        return cls(0.0, 0.0, float(image_size), False)


@dataclass(frozen=True)
class AugmentConfig:
    crop_scale: tuple[float, float] = (0.75, 1.0)
    flip_prob: float = 0.5
    blur_prob: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 1.5)
    jitter_prob: float = 0.8
    jitter_range: tuple[float, float] = (0.6, 1.4)
    gray_prob: float = 0.2
    cutout_prob: float = 0.7
    cutout_count: tuple[int, int] = (1, 3)
    cutout_side: tuple[float, float] = (0.15, 0.30)

    def __post_init__(self):
        lo, hi = self.crop_scale
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError(f"crop_scale must lie in (0, 1], got {self.crop_scale}")


@dataclass
class AugmentedPair:
    weak: LabeledImage
    strong: LabeledImage
    record: GeometricRecord


def _resize_crop(img: np.ndarray, rec: GeometricRecord, size: int) -> np.ndarray:
    """Bilinear resample of the crop window back to ``size`` (pixel-centre convention)."""
    scale = rec.crop_size / size
    pos = rec.crop_x + (np.arange(size) + 0.5) * scale - 0.5
    posy = rec.crop_y + (np.arange(size) + 0.5) * scale - 0.5
    h, w = img.shape[1:]

    def weights(p, n):
        p = np.clip(p, 0, n - 1)
        lo = np.floor(p).astype(int)
        hi = np.minimum(lo + 1, n - 1)
        return lo, hi, p - lo

    x0, x1, fx = weights(pos, w)
    y0, y1, fy = weights(posy, h)
    top = img[:, y0][:, :, x0] * (1 - fx) + img[:, y0][:, :, x1] * fx
    bot = img[:, y1][:, :, x0] * (1 - fx) + img[:, y1][:, :, x1] * fx
    return (top * (1 - fy)[None, :, None] + bot * fy[None, :, None]).astype(img.dtype)


def apply_geometry(img: np.ndarray, rec: GeometricRecord) -> np.ndarray:
    size = img.shape[-1]
    out = img
    if (rec.crop_x, rec.crop_y, rec.crop_size) != (0.0, 0.0, float(size)):
        out = _resize_crop(img, rec, size)
    if rec.flip:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def transform_boxes(boxes, record: GeometricRecord, image_size: int, min_size: float = 1.0) -> list[BoxLabel]:
    """Map boxes through crop-resize then flip; clip and drop boxes thinner than ``min_size``."""
    s = image_size / record.crop_size
    out = []
    for b in boxes:
        x0 = (b.x_min - record.crop_x) * s
        x1 = (b.x_max - record.crop_x) * s
        y0 = (b.y_min - record.crop_y) * s
        y1 = (b.y_max - record.crop_y) * s
        x0, x1 = max(x0, 0.0), min(x1, float(image_size))
        y0, y1 = max(y0, 0.0), min(y1, float(image_size))
        if x1 - x0 < min_size or y1 - y0 < min_size:
            continue
        if record.flip:
            x0, x1 = image_size - x1, image_size - x0
        out.append(BoxLabel(b.class_id, x0, y0, x1, y1))
    return out


def sample_geometry(rng: np.random.Generator, image_size: int, config: AugmentConfig) -> GeometricRecord:
    lo, hi = config.crop_scale
    side = int(round(image_size * rng.uniform(lo, hi)))
    side = max(1, min(side, image_size))
    cx = int(rng.integers(0, image_size - side + 1))
    cy = int(rng.integers(0, image_size - side + 1))
    flip = bool(rng.random() < config.flip_prob)
    return GeometricRecord(float(cx), float(cy), float(side), flip)


def weak_augment(item: LabeledImage, rng: np.random.Generator,
                 config: AugmentConfig = AugmentConfig()) -> tuple[LabeledImage, GeometricRecord]:
    size = item.image.shape[-1]
    rec = sample_geometry(rng, size, config)
    return augment_with(item, rec), rec


def augment_with(item: LabeledImage, rec: GeometricRecord) -> LabeledImage:
    size = item.image.shape[-1]
    return LabeledImage(apply_geometry(item.image, rec), transform_boxes(item.boxes, rec, size), item.image_id)


def _grayscale(img: np.ndarray) -> np.ndarray:
    lum = 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
    return np.broadcast_to(lum, img.shape).copy()


def strong_augment(weak: LabeledImage, rng: np.random.Generator,
                   config: AugmentConfig = AugmentConfig()) -> LabeledImage:
    """Blur, colour jitter, grayscale, then Cutout on the weak view; boxes are untouched."""
    img = weak.image.astype(np.float64)
    if rng.random() < config.blur_prob:
        sigma = rng.uniform(*config.blur_sigma)
        img = gaussian_filter(img, sigma=(0, sigma, sigma), mode="nearest")
    if rng.random() < config.jitter_prob:
        lo, hi = config.jitter_range
        for kind in rng.permutation(3):
            f = rng.uniform(lo, hi)
            if kind == 0:  # brightness
                img = img * f
            elif kind == 1:  # contrast
                img = (img - img.mean()) * f + img.mean()
            else:  # saturation
                gray = _grayscale(img)
                img = (img - gray) * f + gray
            img = np.clip(img, 0.0, 1.0)
    if rng.random() < config.gray_prob:
        img = _grayscale(img)
    if rng.random() < config.cutout_prob:
        size = img.shape[-1]
        for _ in range(int(rng.integers(config.cutout_count[0], config.cutout_count[1] + 1))):
            ch = max(1, int(round(size * rng.uniform(*config.cutout_side))))
            cw = max(1, int(round(size * rng.uniform(*config.cutout_side))))
            y = int(rng.integers(0, size - ch + 1))
            x = int(rng.integers(0, size - cw + 1))
            img[:, y : y + ch, x : x + cw] = 0.0
    return LabeledImage(np.clip(img, 0.0, 1.0).astype(np.float32), list(weak.boxes), weak.image_id)


def make_pair(item: LabeledImage, rng: np.random.Generator, config: AugmentConfig = AugmentConfig()) -> AugmentedPair:
    weak, rec = weak_augment(item, rng, config)
    return AugmentedPair(weak, strong_augment(weak, rng, config), rec)


@dataclass
class PairBatch:
    ids: list[int]
    weak: np.ndarray  # [B, 3, H, W]
    strong: np.ndarray  # [B, 3, H, W]
    boxes: list[list[BoxLabel]]  # shared by both views
    records: list[GeometricRecord]

    def both_views(self) -> tuple[np.ndarray, list[list[BoxLabel]]]:
        """Images stacked weak-then-strong with the matching box lists."""
        return np.concatenate([self.weak, self.strong]), self.boxes + self.boxes


def augment_batch(items, rng: np.random.Generator, config: AugmentConfig = AugmentConfig()) -> PairBatch:
    pairs = [make_pair(it, rng, config) for it in items]
    return PairBatch(
        [p.weak.image_id for p in pairs],
        np.stack([p.weak.image for p in pairs]),
        np.stack([p.strong.image for p in pairs]),
        [p.weak.boxes for p in pairs],
        [p.record for p in pairs],
    )
