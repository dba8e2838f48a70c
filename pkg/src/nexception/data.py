"""Datasets and evaluation-time image geometry.

Two on-disk formats are supported, both flat binary label+pixel records
(3072 pixel bytes per image, planar RGB, 32x32): the 100-class layout with
a coarse and a fine label byte (3074 bytes/record, the fine label is used)
and the 10-class layout with a single label byte (3073 bytes/record).

A synthetic palette dataset gives tests a linearly separable task: each
class owns a base RGB color and samples are that color plus pixel noise.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError

# Channel statistics of the large natural-image corpus; evaluation and
# training both normalize with these.
MEAN_RGB = np.array([0.485, 0.456, 0.406], dtype=np.float32)
STD_RGB = np.array([0.229, 0.224, 0.225], dtype=np.float32)

_RECORD_BYTES = {"cifar100": 2 + 3072, "cifar10": 1 + 3072}


@dataclass
class Dataset:
    """In-memory image classification dataset: uint8 NCHW images + labels."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.dtype != np.uint8:
            raise FormatError(f"images must be uint8 NCHW, got {self.images.dtype} "
                              f"shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise FormatError(f"{len(self.images)} images vs {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.num_classes,
                       name=self.name, meta=self.meta)


def load_cifar(path: str, variant: str = "cifar100") -> Dataset:
    """Parse a flat binary record file. The byte length must be an exact
    multiple of the record size."""
    if variant not in _RECORD_BYTES:
        raise ConfigError(f"variant must be one of {sorted(_RECORD_BYTES)}, "
                          f"got '{variant}'")
    rec = _RECORD_BYTES[variant]
    size = os.path.getsize(path)
    if size == 0 or size % rec:
        raise FormatError(f"{path}: {size} bytes is not a multiple of the "
                          f"{rec}-byte {variant} record")
    raw = np.fromfile(path, dtype=np.uint8).reshape(-1, rec)
    if variant == "cifar100":
        labels = raw[:, 1].astype(np.int64)   # fine label; byte 0 is coarse
        pixels = raw[:, 2:]
        num_classes = 100
    else:
        labels = raw[:, 0].astype(np.int64)
        pixels = raw[:, 1:]
        num_classes = 10
    images = pixels.reshape(-1, 3, 32, 32)
    if labels.max(initial=0) >= num_classes:
        raise FormatError(f"{path}: label {labels.max()} out of range for "
                          f"{num_classes} classes")
    return Dataset(images, labels, num_classes, name=variant)


def synthetic_palette(n: int, *, num_classes: int = 10, hw: int = 32,
                      noise: float = 12.0, seed: int = 0) -> Dataset:
    """Linearly separable color-blob task.

    Class c's images are its palette color plus Gaussian pixel noise (in
    0..255 units). Labels cycle 0,1,...,k-1 so every prefix is nearly
    balanced. The palette sits in ``meta['palette']``.
    """
    rng = np.random.default_rng([int(seed), 0xDA7A])
    palette = rng.integers(40, 216, size=(num_classes, 3)).astype(np.float32)
    labels = (np.arange(n) % num_classes).astype(np.int64)
    base = palette[labels][:, :, None, None]
    imgs = base + rng.normal(scale=noise, size=(n, 3, hw, hw)).astype(np.float32)
    images = np.clip(np.rint(imgs), 0, 255).astype(np.uint8)
    return Dataset(images, labels, num_classes, name="palette",
                   meta={"palette": palette, "noise": noise})


# -- geometry -------------------------------------------------------------------


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-center bilinear resample of a float CHW image."""
    c, h, w = img.shape
    if out_h < 1 or out_w < 1:
        raise ConfigError(f"bad resize target {out_h}x{out_w}")
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(np.int64)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[None, :, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, None, :]
    tl = img[:, y0[:, None], x0[None, :]]
    tr = img[:, y0[:, None], x1[None, :]]
    bl = img[:, y1[:, None], x0[None, :]]
    br = img[:, y1[:, None], x1[None, :]]
    top = tl * (1.0 - wx) + tr * wx
    bot = bl * (1.0 - wx) + br * wx
    return (top * (1.0 - wy) + bot * wy).astype(img.dtype)


def center_crop(img: np.ndarray, size_h: int, size_w: int) -> np.ndarray:
    c, h, w = img.shape
    if size_h > h or size_w > w:
        raise ConfigError(f"crop {size_h}x{size_w} larger than image {h}x{w}")
    top = (h - size_h) // 2
    left = (w - size_w) // 2
    return img[:, top:top + size_h, left:left + size_w]


def eval_transform(img_u8: np.ndarray, target_hw: tuple[int, int],
                   crop_ratio: float = 0.95) -> np.ndarray:
    """Evaluation geometry: scale the shorter side to round(target / ratio),
    keeping aspect, then center-crop to the target. Returns float32 in
    [0, 255]."""
    th, tw = target_hw
    x = img_u8.astype(np.float32)
    h, w = x.shape[1], x.shape[2]
    short_target = int(round(min(th, tw) / crop_ratio))
    if h <= w:
        nh, nw = short_target, max(1, int(round(w * short_target / h)))
    else:
        nh, nw = max(1, int(round(h * short_target / w))), short_target
    if (nh, nw) != (h, w):
        x = resize_bilinear(x, nh, nw)
    return center_crop(x, th, tw)


def normalize_batch(batch: np.ndarray) -> np.ndarray:
    """uint8 or [0,255] float NCHW -> float32, unit-range then standardized."""
    x = batch.astype(np.float32) / 255.0
    return (x - MEAN_RGB[None, :, None, None]) / STD_RGB[None, :, None, None]
