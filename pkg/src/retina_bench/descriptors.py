"""Local descriptors: upright SURF at fast-Hessian keypoints, HOG and LBP on a patch grid.

Every descriptor is 64-D so one codebook can quantise the pooled matrix.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import ndimage

from .imageproc import NotSingleChannel, integral_image

DIM = 64
PATCH = 28
DEFAULT_SURF_THRESHOLD = 2e-4
N_OCTAVES = 4
LAYERS_PER_OCTAVE = 4
DESCRIPTOR_MARGIN = 10.0  # in units of keypoint scale
_ZERO_NORM = 1e-8
MAX_REFINE_OFFSET = 1.0  # in grid samples / layers, per dimension


class DescriptorError(ValueError):
    pass


class NonDivisibleDimensions(DescriptorError):
    pass


class WrongPatchSize(DescriptorError):
    pass


class KeypointOutOfBounds(DescriptorError):
    pass


class Kind(enum.IntEnum):
    SURF = 0
    HOG = 1
    LBP = 2


class Channel(enum.IntEnum):
    R = 0
    G = 1
    B = 2


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    scale: float
    response: float


@dataclass
class Descriptor:
    values: np.ndarray
    kind: Kind
    channel: Channel


@dataclass
class DescriptorSet:
    """All descriptors of one image, stored as an ``(n, 64)`` matrix plus tags."""

    values: np.ndarray = field(default_factory=lambda: np.zeros((0, DIM)))
    kinds: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int8))
    channels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int8))

    def __len__(self) -> int:
        return len(self.values)

    def __iter__(self):
        for v, k, c in zip(self.values, self.kinds, self.channels):
            yield Descriptor(v, Kind(int(k)), Channel(int(c)))

    def count(self, kind: Kind | None = None, channel: Channel | None = None) -> int:
        mask = np.ones(len(self), dtype=bool)
        if kind is not None:
            mask &= self.kinds == kind
        if channel is not None:
            mask &= self.channels == channel
        return int(mask.sum())

    def select(self, kind: Kind) -> np.ndarray:
        return self.values[self.kinds == kind]

    @classmethod
    def concat(cls, parts) -> "DescriptorSet":
        parts = list(parts)
        if not parts:
            return cls()
        return cls(
            np.concatenate([p.values for p in parts]),
            np.concatenate([p.kinds for p in parts]),
            np.concatenate([p.channels for p in parts]),
        )


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n < _ZERO_NORM:
        return np.zeros_like(v)
    return v / n


def _single(g) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 2:
        raise NotSingleChannel(f"expected (H, W), got {g.shape}")
    return g


# ---------------------------------------------------------------- patch grid


def extract_patch_grid(g: np.ndarray, patch: int = PATCH) -> list[np.ndarray]:
    g = _single(g)
    h, w = g.shape
    if patch < 1 or h % patch or w % patch:
        raise NonDivisibleDimensions(f"{w}x{h} is not divisible into {patch}x{patch} patches")
    return [g[r:r + patch, c:c + patch] for r in range(0, h, patch) for c in range(0, w, patch)]


def _patch_stack(g: np.ndarray, patch: int = PATCH) -> np.ndarray:
    g = _single(g)
    h, w = g.shape
    if h % patch or w % patch:
        raise NonDivisibleDimensions(f"{w}x{h} is not divisible into {patch}x{patch} patches")
    return (g.reshape(h // patch, patch, w // patch, patch)
            .transpose(0, 2, 1, 3).reshape(-1, patch, patch))


# ----------------------------------------------------------------------- HOG

HOG_CELLS = 4
HOG_BINS = 4


def hog_patches(patches: np.ndarray) -> np.ndarray:
    """HOG for a stack of 28x28 patches, one 64-D row per patch.

    Centred-difference gradients (edge-replicated), 4x4 cells of 7x7 pixels,
    4 unsigned orientation bins centred on 0, 45, 90 and 135 degrees with
    linear vote splitting between neighbouring bins.
    """
    p = np.asarray(patches, dtype=np.float64)
    if p.ndim != 3 or p.shape[1:] != (PATCH, PATCH):
        raise WrongPatchSize(f"expected 28x28 patches, got {p.shape[1:]}")
    pad = np.pad(p, ((0, 0), (1, 1), (1, 1)), mode="edge")
    gx = pad[:, 1:-1, 2:] - pad[:, 1:-1, :-2]
    gy = pad[:, 2:, 1:-1] - pad[:, :-2, 1:-1]
    mag = np.hypot(gx, gy)
    ang = np.mod(np.arctan2(gy, gx), np.pi)
    pos = ang / (np.pi / HOG_BINS)
    lo = np.floor(pos).astype(np.intp) % HOG_BINS
    frac = pos - np.floor(pos)
    hi = (lo + 1) % HOG_BINS

    n = len(p)
    cell = PATCH // HOG_CELLS
    cell_idx = (np.arange(PATCH) // cell)
    cid = (cell_idx[:, None] * HOG_CELLS + cell_idx[None, :])  # (28, 28)
    base = (np.arange(n)[:, None, None] * HOG_CELLS * HOG_CELLS + cid[None]) * HOG_BINS
    hist = np.zeros(n * DIM)
    np.add.at(hist, (base + lo).ravel(), (mag * (1 - frac)).ravel())
    np.add.at(hist, (base + hi).ravel(), (mag * frac).ravel())
    hist = hist.reshape(n, DIM)
    return np.stack([_unit(h) for h in hist])


def hog_patch(patch: np.ndarray) -> np.ndarray:
    patch = np.asarray(patch, dtype=np.float64)
    if patch.shape != (PATCH, PATCH):
        raise WrongPatchSize(f"expected 28x28 patch, got {patch.shape}")
    return hog_patches(patch[None])[0]


# ----------------------------------------------------------------------- LBP

# neighbour offsets (dy, dx), counter-clockwise from east; bit p = neighbour p
_LBP_OFFSETS = ((0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1))
LBP_BINS = 59


@lru_cache(maxsize=1)
def uniform_lookup() -> np.ndarray:
    """Map each 8-bit code to its uniform-pattern bin (0..57) or the catch-all bin 58."""
    table = np.full(256, LBP_BINS - 1, dtype=np.intp)
    nxt = 0
    for code in range(256):
        bits = [(code >> i) & 1 for i in range(8)]
        transitions = sum(bits[i] != bits[(i + 1) % 8] for i in range(8))
        if transitions <= 2:
            table[code] = nxt
            nxt += 1
    assert nxt == LBP_BINS - 1
    return table


def lbp_codes(p: np.ndarray) -> np.ndarray:
    """8-bit radius-1 codes of the interior pixels of a patch stack ``(n, h, w)``."""
    centre = p[:, 1:-1, 1:-1]
    h, w = centre.shape[1:]
    codes = np.zeros(centre.shape, dtype=np.intp)
    for bit, (dy, dx) in enumerate(_LBP_OFFSETS):
        nb = p[:, 1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
        codes |= (nb >= centre).astype(np.intp) << bit
    return codes


def lbp_patches(patches: np.ndarray) -> np.ndarray:
    p = np.asarray(patches, dtype=np.float64)
    if p.ndim != 3 or p.shape[1:] != (PATCH, PATCH):
        raise WrongPatchSize(f"expected 28x28 patches, got {p.shape[1:]}")
    bins = uniform_lookup()[lbp_codes(p)].reshape(len(p), -1)
    out = np.zeros((len(p), DIM))
    for i, b in enumerate(bins):
        hist = np.bincount(b, minlength=LBP_BINS).astype(np.float64)
        hist /= hist.sum()
        out[i, :LBP_BINS] = hist / np.linalg.norm(hist)
    return out


def lbp_patch(patch: np.ndarray) -> np.ndarray:
    patch = np.asarray(patch, dtype=np.float64)
    if patch.shape != (PATCH, PATCH):
        raise WrongPatchSize(f"expected 28x28 patch, got {patch.shape}")
    return lbp_patches(patch[None])[0]


# ---------------------------------------------------------------------- SURF


def filter_sizes(octave: int) -> list[int]:
    """Box-filter side lengths of one octave: 9,15,21,27 / 15,27,39,51 / ..."""
    return [3 * ((2 ** (octave + 1)) * (i + 1) + 1) for i in range(LAYERS_PER_OCTAVE)]


def _boxes(s, rows, cols, dy, dx, h, w):
    # rows/cols are arithmetic progressions, so every corner lookup is a strided slice
    step_r = rows[1] - rows[0] if len(rows) > 1 else 1
    step_c = cols[1] - cols[0] if len(cols) > 1 else 1

    def corner(oy, ox):
        r = rows[0] + oy
        c = cols[0] + ox
        return s[r:r + step_r * (len(rows) - 1) + 1:step_r, c:c + step_c * (len(cols) - 1) + 1:step_c]

    return corner(dy + h, dx + w) - corner(dy, dx + w) - corner(dy + h, dx) + corner(dy, dx)


def hessian_layer(s: np.ndarray, size: int, step: int):
    """Approximate det(H) on the ``step`` grid for one filter size.

    Returns ``(det, valid)`` arrays on the full grid; positions where the
    filter does not fit inside the image are zero and flagged invalid.
    """
    H, W = s.shape[0] - 1, s.shape[1] - 1
    gy = np.arange(0, H, step)
    gx = np.arange(0, W, step)
    det = np.zeros((len(gy), len(gx)))
    valid = np.zeros_like(det, dtype=bool)
    lobe = size // 3
    border = (size - 1) // 2
    ry = (gy >= border) & (gy + border <= H - 1)
    rx = (gx >= border) & (gx + border <= W - 1)
    if not ry.any() or not rx.any():
        return det, valid
    rows, cols = gy[ry], gx[rx]
    wide = 2 * lobe - 1
    dxx = (_boxes(s, rows, cols, -lobe + 1, -border, wide, size)
           - 3 * _boxes(s, rows, cols, -lobe + 1, -(lobe // 2), wide, lobe))
    dyy = (_boxes(s, rows, cols, -border, -lobe + 1, size, wide)
           - 3 * _boxes(s, rows, cols, -(lobe // 2), -lobe + 1, lobe, wide))
    dxy = (_boxes(s, rows, cols, -lobe, 1, lobe, lobe)
           + _boxes(s, rows, cols, 1, -lobe, lobe, lobe)
           - _boxes(s, rows, cols, -lobe, -lobe, lobe, lobe)
           - _boxes(s, rows, cols, 1, 1, lobe, lobe))
    inv_area = 1.0 / (size * size)
    dxx *= inv_area
    dyy *= inv_area
    dxy *= inv_area
    det[np.ix_(ry, rx)] = dxx * dyy - 0.81 * dxy * dxy
    valid[np.ix_(ry, rx)] = True
    return det, valid


_NMS_FOOTPRINT = np.ones((3, 3, 3), dtype=bool)
_NMS_FOOTPRINT[1, 1, 1] = False


def _refine(stack, i, r, c):
    v = stack
    dx = (v[i, r, c + 1] - v[i, r, c - 1]) / 2
    dy = (v[i, r + 1, c] - v[i, r - 1, c]) / 2
    ds = (v[i + 1, r, c] - v[i - 1, r, c]) / 2
    centre = v[i, r, c]
    dxx = v[i, r, c + 1] + v[i, r, c - 1] - 2 * centre
    dyy = v[i, r + 1, c] + v[i, r - 1, c] - 2 * centre
    dss = v[i + 1, r, c] + v[i - 1, r, c] - 2 * centre
    dxy = (v[i, r + 1, c + 1] - v[i, r + 1, c - 1] - v[i, r - 1, c + 1] + v[i, r - 1, c - 1]) / 4
    dxs = (v[i + 1, r, c + 1] - v[i + 1, r, c - 1] - v[i - 1, r, c + 1] + v[i - 1, r, c - 1]) / 4
    dys = (v[i + 1, r + 1, c] - v[i + 1, r - 1, c] - v[i - 1, r + 1, c] + v[i - 1, r - 1, c]) / 4
    hess = np.array([[dxx, dxy, dxs], [dxy, dyy, dys], [dxs, dys, dss]])
    grad = np.array([dx, dy, ds])
    try:
        return -np.linalg.solve(hess, grad)
    except np.linalg.LinAlgError:
        return None


def detect_surf(g: np.ndarray, threshold: float = DEFAULT_SURF_THRESHOLD) -> list[Keypoint]:
    """Fast-Hessian keypoints over four octaves, strongest first."""
    g = _single(g)
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    s = integral_image(g)
    keypoints = []
    for octave in range(N_OCTAVES):
        step = 2 ** octave
        sizes = filter_sizes(octave)
        layers = [hessian_layer(s, size, step) for size in sizes]
        stack = np.stack([d for d, _ in layers])
        valid = np.stack([v for _, v in layers])
        if not valid[-1].any():
            continue
        neigh = ndimage.maximum_filter(stack, footprint=_NMS_FOOTPRINT,
                                       mode="constant", cval=-np.inf)
        # a candidate's whole 3x3x3 neighbourhood must be valid; the layer
        # above has the widest border
        cand = (stack > threshold) & (stack > neigh)
        cand[0] = False
        cand[-1] = False
        for i in (1, 2):
            cand[i] &= ndimage.minimum_filter(valid[i + 1].astype(np.uint8), size=3,
                                              mode="constant", cval=0).astype(bool)
        for i, r, c in zip(*np.nonzero(cand)):
            off = _refine(stack, i, r, c)
            # box-filter peaks sit up to one sample off the grid at coarse octaves
            if off is None or np.any(np.abs(off) > MAX_REFINE_OFFSET):
                continue
            filt_step = sizes[i] - sizes[i - 1]
            keypoints.append(Keypoint(
                x=float((c + off[0]) * step),
                y=float((r + off[1]) * step),
                scale=float(1.2 / 9.0 * (sizes[i] + off[2] * filt_step)),
                response=float(stack[i, r, c]),
            ))
    keypoints.sort(key=lambda k: (-k.response, k.y, k.x))
    return suppress_duplicates(keypoints)


def suppress_duplicates(keypoints: list[Keypoint]) -> list[Keypoint]:
    """Drop keypoints lying within one scale unit of a stronger one.

    Neighbouring octaves overlap in scale, so one blob is often a maximum in
    two of them at (nearly) the same position. Input must be strongest first.
    """
    kept: list[Keypoint] = []
    for k in keypoints:
        if all(np.hypot(k.x - o.x, k.y - o.y) >= max(k.scale, o.scale) for o in kept):
            kept.append(k)
    return kept


SURF_GRID = 20  # sample points per side of the descriptor window
SURF_SUB = 5  # sample points per side of one subregion


def _haar(s, rows, cols, size):
    half = size // 2
    dx = (_pairs(s, rows - half, cols, size, half) - _pairs(s, rows - half, cols - half, size, half))
    dy = (_pairs(s, rows, cols - half, half, size) - _pairs(s, rows - half, cols - half, half, size))
    return dx / (size * size), dy / (size * size)


def _pairs(s, r0, c0, h, w):
    # elementwise (not outer) box sums with clipping to the image
    H, W = s.shape[0] - 1, s.shape[1] - 1
    ya, xa = np.clip(r0, 0, H), np.clip(c0, 0, W)
    yb, xb = np.clip(r0 + h, 0, H), np.clip(c0 + w, 0, W)
    return s[yb, xb] - s[ya, xb] - s[yb, xa] + s[ya, xa]


def has_descriptor_margin(kp: Keypoint, width: int, height: int) -> bool:
    m = DESCRIPTOR_MARGIN * kp.scale
    return m <= kp.x <= width - 1 - m and m <= kp.y <= height - 1 - m


def describe_surf(g: np.ndarray, kp: Keypoint, integral: np.ndarray | None = None) -> np.ndarray:
    """Upright 64-D SURF descriptor.

    A 20s x 20s window around the keypoint is sampled on a 20x20 grid with
    spacing s; Haar responses of side 2s are Gaussian weighted (sigma 3.3s)
    and summed per 5x5-sample subregion as (dx, dy, |dx|, |dy|).
    """
    g = _single(g)
    h, w = g.shape
    if not has_descriptor_margin(kp, w, h):
        raise KeypointOutOfBounds(f"keypoint ({kp.x:.1f}, {kp.y:.1f}) scale {kp.scale:.2f} "
                                  f"too close to the border of a {w}x{h} image")
    s = integral if integral is not None else integral_image(g)
    scale = kp.scale
    size = max(2, 2 * int(round(scale)))
    off = (np.arange(SURF_GRID) - (SURF_GRID - 1) / 2) * scale
    u, v = np.meshgrid(off, off)  # u along x, v along y; rows of the grid follow y
    cols = np.rint(kp.x + u).astype(np.intp)
    rows = np.rint(kp.y + v).astype(np.intp)
    rx, ry = _haar(s, rows, cols, size)
    wgt = np.exp(-(u * u + v * v) / (2 * (3.3 * scale) ** 2))
    rx *= wgt
    ry *= wgt
    n = SURF_GRID // SURF_SUB
    shape = (n, SURF_SUB, n, SURF_SUB)
    rx = rx.reshape(shape)
    ry = ry.reshape(shape)
    desc = np.stack([
        rx.sum(axis=(1, 3)), ry.sum(axis=(1, 3)),
        np.abs(rx).sum(axis=(1, 3)), np.abs(ry).sum(axis=(1, 3)),
    ], axis=-1)
    return _unit(desc.reshape(DIM))


def write_keypoints_csv(keypoints, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["x", "y", "scale", "response"])
        for k in keypoints:
            wr.writerow([repr(k.x), repr(k.y), repr(k.scale), repr(k.response)])


# ------------------------------------------------------------------ per image


def extract_channel(g: np.ndarray, channel: Channel,
                    threshold: float = DEFAULT_SURF_THRESHOLD) -> DescriptorSet:
    g = _single(g)
    h, w = g.shape
    s = integral_image(g)
    surf = [describe_surf(g, kp, s) for kp in detect_surf(g, threshold)
            if has_descriptor_margin(kp, w, h)]
    patches = _patch_stack(g)
    hog = hog_patches(patches)
    lbp = lbp_patches(patches)
    surf_arr = np.array(surf).reshape(-1, DIM)
    values = np.concatenate([surf_arr, hog, lbp])
    kinds = np.concatenate([
        np.full(len(surf_arr), Kind.SURF, dtype=np.int8),
        np.full(len(hog), Kind.HOG, dtype=np.int8),
        np.full(len(lbp), Kind.LBP, dtype=np.int8),
    ])
    return DescriptorSet(values, kinds, np.full(len(values), channel, dtype=np.int8))


def extract_all(img: np.ndarray, threshold: float = DEFAULT_SURF_THRESHOLD) -> DescriptorSet:
    """Descriptors of a preprocessed ``(224, 224, 3)`` image, channels R, G, B in order."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DescriptorError(f"expected (H, W, 3), got {img.shape}")
    return DescriptorSet.concat(
        extract_channel(img[:, :, c], Channel(c), threshold) for c in range(3))
