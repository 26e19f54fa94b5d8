"""Deterministic synthetic three-class fundus-like corpus.

Normal images carry dark curvilinear vessels, exudate images carry bright
sharp-edged irregular blobs, drusen images carry many small dim dots. All
randomness comes from SplitMix64; image ``i`` (over the whole corpus) uses the
stream seeded with ``seed ^ i``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .dataset import ClassLabel, DatasetManifest, ManifestEntry, save_image, write_manifest
from .rng import SplitMix64, splitmix64_block

SOURCE = "synthetic"
_BG_COLOUR = np.array([0.72, 0.36, 0.16])
_LESION_COLOUR = np.array([1.0, 0.95, 0.62])


@dataclass(frozen=True)
class SynthConfig:
    per_class: int = 10
    size: int = 224
    seed: int = 0
    exudate_count: tuple[int, int] = (3, 10)
    exudate_radius: tuple[float, float] = (4.0, 12.0)
    drusen_count: tuple[int, int] = (8, 30)
    drusen_radius: tuple[float, float] = (1.0, 3.0)
    vessel_count: tuple[int, int] = (4, 7)
    brightness: float = 0.85
    noise: float = 0.01

    def __post_init__(self):
        if self.per_class < 1:
            raise ValueError("per_class must be >= 1")
        if self.size < 32:
            raise ValueError("size must be >= 32")
        if min(self.exudate_radius + self.drusen_radius) <= 0:
            raise ValueError("radii must be positive")
        if not 0 < self.brightness <= 1:
            raise ValueError("brightness must be in (0, 1]")


def _normal_noise(seed: int, shape) -> np.ndarray:
    n = int(np.prod(shape))
    raw = splitmix64_block(seed, 2 * n, start=1 << 20)
    u = (raw >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
    u1 = np.maximum(u[:n], 1e-300)
    return (np.sqrt(-2.0 * np.log(u1)) * np.cos(2 * np.pi * u[n:])).reshape(shape)


def _background(rng: SplitMix64, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cx = size / 2 + rng.uniform_range(-0.08, 0.08) * size
    cy = size / 2 + rng.uniform_range(-0.08, 0.08) * size
    r = np.hypot(xx - cx, yy - cy) / (0.5 * size)
    gain = rng.uniform_range(0.85, 1.1)
    falloff = gain * (1.0 - 0.45 * np.clip(r, 0, 1.5) ** 2)
    return falloff[..., None] * _BG_COLOUR[None, None, :]


def _centre_point(rng: SplitMix64, size: int, spread: float = 0.3):
    # uniform in a disc around the image centre
    ang = 2 * np.pi * rng.uniform()
    rad = spread * size * np.sqrt(rng.uniform())
    return size / 2 + rad * np.cos(ang), size / 2 + rad * np.sin(ang)


def _draw_vessels(img, rng: SplitMix64, cfg: SynthConfig):
    size = cfg.size
    darken = np.zeros((size, size))
    ox = size * rng.uniform_range(0.3, 0.7)
    oy = size * rng.uniform_range(0.3, 0.7)
    t = np.linspace(0.0, 1.0, 4 * size)
    for _ in range(rng.randint(*cfg.vessel_count)):
        ang = 2 * np.pi * rng.uniform()
        length = size * rng.uniform_range(0.45, 0.8)
        bend = rng.uniform_range(-0.6, 0.6)
        width = rng.uniform_range(1.2, 2.6)
        ex, ey = ox + length * np.cos(ang), oy + length * np.sin(ang)
        mx = (ox + ex) / 2 - bend * (ey - oy) / 2
        my = (oy + ey) / 2 + bend * (ex - ox) / 2
        px = np.rint((1 - t) ** 2 * ox + 2 * (1 - t) * t * mx + t ** 2 * ex).astype(int)
        py = np.rint((1 - t) ** 2 * oy + 2 * (1 - t) * t * my + t ** 2 * ey).astype(int)
        inside = (px >= 0) & (px < size) & (py >= 0) & (py < size)
        if not inside.any():
            continue
        line = np.ones((size, size), dtype=bool)
        line[py[inside], px[inside]] = False
        dist = ndimage.distance_transform_edt(line)
        darken = np.maximum(darken, np.exp(-0.5 * (dist / width) ** 2))
    img *= (1.0 - 0.45 * darken)[..., None]


def _draw_exudates(img, rng: SplitMix64, cfg: SynthConfig):
    size = cfg.size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    mask = np.zeros((size, size))
    for _ in range(rng.randint(*cfg.exudate_count)):
        cx, cy = _centre_point(rng, size)
        radius = rng.uniform_range(*cfg.exudate_radius)
        # irregular outline: union of a main disc and two offset lobes
        for lobe in range(3):
            r = radius if lobe == 0 else radius * rng.uniform_range(0.4, 0.75)
            a = 2 * np.pi * rng.uniform()
            off = 0.0 if lobe == 0 else radius * rng.uniform_range(0.4, 0.8)
            d = np.hypot(xx - (cx + off * np.cos(a)), yy - (cy + off * np.sin(a)))
            mask = np.maximum(mask, np.clip(r + 0.5 - d, 0.0, 1.0))
    alpha = cfg.brightness * mask
    img[:] = img * (1 - alpha[..., None]) + _LESION_COLOUR * alpha[..., None]


def _draw_drusen(img, rng: SplitMix64, cfg: SynthConfig):
    size = cfg.size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    alpha = np.zeros((size, size))
    for _ in range(rng.randint(*cfg.drusen_count)):
        cx, cy = _centre_point(rng, size, spread=0.32)
        radius = rng.uniform_range(*cfg.drusen_radius)
        a = rng.uniform_range(0.35, 0.55) * cfg.brightness
        d2 = (xx - cx) ** 2 + (yy - cy) ** 2
        alpha = np.maximum(alpha, a * np.exp(-0.5 * d2 / radius ** 2))
    img[:] = img * (1 - alpha[..., None]) + _LESION_COLOUR * alpha[..., None]


def render_image(label: ClassLabel, image_seed: int, cfg: SynthConfig) -> np.ndarray:
    rng = SplitMix64(image_seed)
    img = _background(rng, cfg.size)
    if label == ClassLabel.NORMAL:
        _draw_vessels(img, rng, cfg)
    elif label == ClassLabel.EXUDATES:
        _draw_exudates(img, rng, cfg)
    else:
        _draw_drusen(img, rng, cfg)
    if cfg.noise > 0:
        img += cfg.noise * _normal_noise(image_seed, img.shape)
    # quantise exactly as the PNG round trip does
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def generate_images(cfg: SynthConfig):
    """Yield ``(filename, label, image)`` in class order, without touching disk."""
    index = 0
    for label in ClassLabel:
        for j in range(cfg.per_class):
            name = f"{label.name.lower()}_{j:04d}.png"
            yield name, label, render_image(label, cfg.seed ^ index, cfg)
            index += 1


def generate(cfg: SynthConfig, out_dir) -> tuple[list[np.ndarray], DatasetManifest]:
    """Write PNGs plus ``manifest.csv`` into ``out_dir``; return the images and manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    images, entries = [], []
    for name, label, img in generate_images(cfg):
        save_image(img, out / name)
        images.append(img)
        entries.append(ManifestEntry(name, label, SOURCE))
    manifest = DatasetManifest(entries, root=out)
    write_manifest(manifest, out / "manifest.csv")
    return images, manifest
