"""Training-time augmentation: a ten-op RandAugment pool, mixup, cutmix,
and random erasing.

RandAugment operates on uint8 CHW images in [0, 255]; mixing and erasing
operate on float batches. All randomness comes from a caller-supplied
generator so a (seed, epoch, step) keyed stream reproduces bit for bit.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

from .errors import ConfigError

_FILL = 128.0        # gray used for pixels pulled in from outside the frame
_MAX_MAGNITUDE = 10.0
_MAX_TRANSLATE = 0.3  # fraction of the image side at magnitude 10
_MAX_SHEAR = 0.3
_MAX_ROTATE = 30.0   # degrees at magnitude 10
_ENHANCE_SPAN = 0.9  # brightness/contrast/sharpness factor reach at magnitude 10


def _affine(img: np.ndarray, matrix: np.ndarray, offset: np.ndarray) -> np.ndarray:
    out = np.empty_like(img, dtype=np.float32)
    for c in range(img.shape[0]):
        ndimage.affine_transform(img[c].astype(np.float32), matrix, offset=offset,
                                 output=out[c], order=1, mode="constant",
                                 cval=_FILL)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def _centered(img: np.ndarray, matrix: np.ndarray,
              shift: np.ndarray | None = None) -> np.ndarray:
    h, w = img.shape[1], img.shape[2]
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = center - matrix @ center
    if shift is not None:
        offset = offset + shift
    return _affine(img, matrix, offset)


def _signed(level: float, rng: np.random.Generator) -> float:
    return level if rng.random() < 0.5 else -level


def _translate_x(img, m, rng):
    dx = _signed(m / _MAX_MAGNITUDE * _MAX_TRANSLATE * img.shape[2], rng)
    return _centered(img, np.eye(2), np.array([0.0, dx]))


def _translate_y(img, m, rng):
    dy = _signed(m / _MAX_MAGNITUDE * _MAX_TRANSLATE * img.shape[1], rng)
    return _centered(img, np.eye(2), np.array([dy, 0.0]))


def _shear_x(img, m, rng):
    k = _signed(m / _MAX_MAGNITUDE * _MAX_SHEAR, rng)
    return _centered(img, np.array([[1.0, 0.0], [k, 1.0]]))


def _shear_y(img, m, rng):
    k = _signed(m / _MAX_MAGNITUDE * _MAX_SHEAR, rng)
    return _centered(img, np.array([[1.0, k], [0.0, 1.0]]))


def _rotate(img, m, rng):
    theta = math.radians(_signed(m / _MAX_MAGNITUDE * _MAX_ROTATE, rng))
    c, s = math.cos(theta), math.sin(theta)
    return _centered(img, np.array([[c, -s], [s, c]]))


def _enhance_factor(m, rng):
    return 1.0 + _signed(m / _MAX_MAGNITUDE * _ENHANCE_SPAN, rng)


def _to_u8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def _brightness(img, m, rng):
    return _to_u8(img.astype(np.float32) * _enhance_factor(m, rng))


def _contrast(img, m, rng):
    f = _enhance_factor(m, rng)
    lum = (0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]).mean()
    return _to_u8(lum + (img.astype(np.float32) - lum) * f)


_SMOOTH = np.array([[1, 1, 1], [1, 5, 1], [1, 1, 1]], dtype=np.float32) / 13.0


def _sharpness(img, m, rng):
    f = _enhance_factor(m, rng)
    x = img.astype(np.float32)
    smooth = np.stack([ndimage.convolve(x[c], _SMOOTH, mode="nearest")
                       for c in range(x.shape[0])])
    return _to_u8(smooth + (x - smooth) * f)


def _posterize(img, m, rng):
    dropped = int(m * 4 / _MAX_MAGNITUDE)
    if dropped <= 0:
        return img
    mask = np.uint8(0xFF << dropped & 0xFF)
    return img & mask


def _solarize(img, m, rng):
    threshold = 256 - int(round(m * 25.6))
    return np.where(img.astype(np.int16) >= threshold, 255 - img, img).astype(np.uint8)


RAND_AUGMENT_OPS = (
    ("translate_x", _translate_x),
    ("translate_y", _translate_y),
    ("shear_x", _shear_x),
    ("shear_y", _shear_y),
    ("rotate", _rotate),
    ("brightness", _brightness),
    ("contrast", _contrast),
    ("sharpness", _sharpness),
    ("posterize", _posterize),
    ("solarize", _solarize),
)


def rand_augment(img: np.ndarray, rng: np.random.Generator, *, num_ops: int = 2,
                 magnitude: float = 7.0, magnitude_std: float = 0.5) -> np.ndarray:
    """Apply ``num_ops`` randomly chosen ops (with replacement) at a noisy
    magnitude drawn per op from N(magnitude, magnitude_std), clipped to
    [0, 10]. Magnitude 0 is the identity for every op."""
    if img.dtype != np.uint8 or img.ndim != 3:
        raise ConfigError(f"rand_augment expects uint8 CHW, got {img.dtype} "
                          f"shape {img.shape}")
    for _ in range(num_ops):
        idx = int(rng.integers(len(RAND_AUGMENT_OPS)))
        m = float(np.clip(rng.normal(magnitude, magnitude_std), 0.0, _MAX_MAGNITUDE))
        if m == 0.0:
            continue
        img = RAND_AUGMENT_OPS[idx][1](img, m, rng)
    return img


# -- batch-level label mixing ---------------------------------------------------


def one_hot(labels: np.ndarray, num_classes: int, smoothing: float = 0.0) -> np.ndarray:
    """Rows always sum to exactly 1; smoothing spreads ``smoothing`` mass
    uniformly over all classes."""
    if smoothing < 0 or smoothing >= 1:
        raise ConfigError(f"smoothing must be in [0, 1), got {smoothing}")
    off = smoothing / num_classes
    out = np.full((len(labels), num_classes), off, dtype=np.float64)
    out[np.arange(len(labels)), labels] = 1.0 - smoothing + off
    return out


def mixup_batch(x: np.ndarray, y: np.ndarray, alpha: float,
                rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, float]:
    """Convex-combine the batch with its reversal; alpha == 0 is the identity
    (lambda pinned to 1, arrays returned untouched)."""
    if alpha == 0.0:
        return x, y, 1.0
    lam = float(rng.beta(alpha, alpha))
    xr = x[::-1]
    yr = y[::-1]
    return lam * x + (1.0 - lam) * xr, lam * y + (1.0 - lam) * yr, lam


def cutmix_batch(x: np.ndarray, y: np.ndarray, alpha: float,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, float]:
    """Paste a box from the reversed batch; the label weight is the exact
    surviving pixel fraction after the box is clipped to the frame."""
    if alpha == 0.0:
        return x, y, 1.0
    lam = float(rng.beta(alpha, alpha))
    h, w = x.shape[2], x.shape[3]
    cut = math.sqrt(1.0 - lam)
    ch, cw = int(h * cut), int(w * cut)
    cy, cx = int(rng.integers(h)), int(rng.integers(w))
    y1, y2 = max(cy - ch // 2, 0), min(cy + ch // 2, h)
    x1, x2 = max(cx - cw // 2, 0), min(cx + cw // 2, w)
    out = x.copy()
    out[:, :, y1:y2, x1:x2] = x[::-1, :, y1:y2, x1:x2]
    lam_adj = 1.0 - ((y2 - y1) * (x2 - x1)) / (h * w)
    return out, lam_adj * y + (1.0 - lam_adj) * y[::-1], lam_adj


def mix_batch(x: np.ndarray, y: np.ndarray, *, mixup_alpha: float,
              cutmix_alpha: float, rng: np.random.Generator
              ) -> tuple[np.ndarray, np.ndarray, float, str]:
    """Apply mixup or cutmix (a fair coin picks when both are enabled)."""
    use_mixup = mixup_alpha > 0.0
    use_cutmix = cutmix_alpha > 0.0
    if use_mixup and use_cutmix:
        use_mixup = rng.random() < 0.5
        use_cutmix = not use_mixup
    if use_cutmix:
        xm, ym, lam = cutmix_batch(x, y, cutmix_alpha, rng)
        return xm, ym, lam, "cutmix"
    if use_mixup:
        xm, ym, lam = mixup_batch(x, y, mixup_alpha, rng)
        return xm, ym, lam, "mixup"
    return x, y, 1.0, "none"


def random_erasing(x: np.ndarray, rng: np.random.Generator, *, prob: float,
                   area_range: tuple[float, float] = (0.02, 1.0 / 3.0),
                   aspect_range: tuple[float, float] = (0.3, 10.0 / 3.0),
                   max_tries: int = 10) -> np.ndarray:
    """Blank a random rectangle of one float CHW image with pixel noise.
    Returns the input object unchanged when the coin says no."""
    if prob <= 0.0 or rng.random() >= prob:
        return x
    c, h, w = x.shape
    for _ in range(max_tries):
        area = float(rng.uniform(*area_range)) * h * w
        log_aspect = float(rng.uniform(math.log(aspect_range[0]),
                                       math.log(aspect_range[1])))
        aspect = math.exp(log_aspect)
        eh = int(round(math.sqrt(area * aspect)))
        ew = int(round(math.sqrt(area / aspect)))
        if eh < 1 or ew < 1 or eh >= h or ew >= w:
            continue
        top = int(rng.integers(h - eh + 1))
        left = int(rng.integers(w - ew + 1))
        out = x.copy()
        out[:, top:top + eh, left:left + ew] = rng.normal(
            size=(c, eh, ew)).astype(x.dtype)
        return out
    return x
