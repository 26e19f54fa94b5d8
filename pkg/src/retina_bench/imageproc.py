"""Image preprocessing primitives.

Images are plain numpy arrays of floats in [0, 1]: ``(H, W)`` for a single
channel, ``(H, W, 3)`` for RGB.
"""

from __future__ import annotations

import numpy as np

TARGET_SIZE = 224
GREEN_TARGET_MEAN = 0.5
GREEN_TARGET_STD = 0.15
DEGENERATE_STD = 1e-6


class ImageError(ValueError):
    pass


class EmptyImage(ImageError):
    pass


class ZeroTargetDimension(ImageError):
    pass


class NotThreeChannel(ImageError):
    pass


class NotSingleChannel(ImageError):
    pass


def check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim not in (2, 3) or img.size == 0:
        raise EmptyImage(f"expected a non-empty (H, W) or (H, W, 3) array, got shape {img.shape}")
    if img.ndim == 3 and img.shape[2] not in (1, 3):
        raise ImageError(f"unsupported channel count {img.shape[2]}")
    if not np.all(np.isfinite(img)) or img.min() < 0.0 or img.max() > 1.0:
        raise ImageError("pixel values must be finite and within [0, 1]")
    return img


def _axis_weights(n_in: int, n_out: int):
    # half-pixel centres, clamped at the borders
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize_bilinear(img: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim not in (2, 3) or img.size == 0:
        raise EmptyImage("cannot resize an empty image")
    if out_w < 1 or out_h < 1:
        raise ZeroTargetDimension(f"target size {out_w}x{out_h}")
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    y0, y1, fy = _axis_weights(h, out_h)
    x0, x1, fx = _axis_weights(w, out_w)
    if img.ndim == 3:
        fy = fy[:, None, None]
        fx = fx[None, :, None]
    else:
        fy = fy[:, None]
        fx = fx[None, :]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    out = top * (1 - fy) + bot * fy
    # convex combination; clip only guards against last-ulp overshoot
    return np.clip(out, img.min(), img.max())


def split_channels(img: np.ndarray):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise NotThreeChannel(f"expected (H, W, 3), got {img.shape}")
    return img[:, :, 0].copy(), img[:, :, 1].copy(), img[:, :, 2].copy()


def merge_channels(r: np.ndarray, g: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.stack([r, g, b], axis=-1)


def normalize_green(g: np.ndarray) -> np.ndarray:
    """Standardise to mean 0.5 / std 0.15, then clamp to [0, 1].

    Images with std below 1e-6 map to a uniform 0.5.
    """
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 2:
        raise NotSingleChannel(f"expected (H, W), got {g.shape}")
    mu = g.mean()
    sigma = g.std()
    if sigma < DEGENERATE_STD:
        return np.full_like(g, GREEN_TARGET_MEAN)
    return np.clip(GREEN_TARGET_MEAN + GREEN_TARGET_STD * (g - mu) / sigma, 0.0, 1.0)


def integral_image(g: np.ndarray) -> np.ndarray:
    """Summed-area table of shape (H + 1, W + 1) with a zero top row and left column."""
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 2:
        raise NotSingleChannel(f"expected (H, W), got {g.shape}")
    s = np.zeros((g.shape[0] + 1, g.shape[1] + 1))
    s[1:, 1:] = g.cumsum(axis=0).cumsum(axis=1)
    return s


def box_sum(s: np.ndarray, y: int, x: int, h: int, w: int) -> float:
    """Sum of the ``h`` x ``w`` box with top-left pixel (y, x), clipped to the image."""
    H, W = s.shape[0] - 1, s.shape[1] - 1
    y0, x0 = min(max(y, 0), H), min(max(x, 0), W)
    y1, x1 = min(max(y + h, 0), H), min(max(x + w, 0), W)
    return s[y1, x1] - s[y0, x1] - s[y1, x0] + s[y0, x0]


def preprocess_bovw(img: np.ndarray, size: int = TARGET_SIZE) -> np.ndarray:
    """Resize to ``size`` x ``size`` and normalise the green channel only."""
    img = check_image(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise NotThreeChannel(f"expected (H, W, 3), got {img.shape}")
    r, g, b = split_channels(resize_bilinear(img, size, size))
    return merge_channels(r, normalize_green(g), b)


def preprocess_deep(img: np.ndarray, size: int = TARGET_SIZE) -> np.ndarray:
    img = check_image(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise NotThreeChannel(f"expected (H, W, 3), got {img.shape}")
    return resize_bilinear(img, size, size)
