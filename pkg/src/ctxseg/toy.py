"""Synthetic desk-scale corpus: textured blobs whose class depends on texture
and local context, grouped into pseudo acquisition centers by a global color
shift.

Class layout (4 classes): 0 = smooth background; 1 = striped blob on
background; 2 = speckled blob; 3 = striped blob nested inside a speckled
blob. Classes 1 and 3 share the same stripe texture, so only the
surrounding region separates them - crops that change the visible context
genuinely change the available evidence.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from PIL import Image

from .data import write_manifest


def _smooth_noise(rng: np.random.Generator, size: int, cells: int, channels: int = 3) -> np.ndarray:
    coarse = rng.uniform(0.0, 1.0, size=(cells, cells, channels))
    img = Image.fromarray((coarse * 255).astype(np.uint8))
    img = img.resize((size, size), Image.BILINEAR)
    return np.asarray(img, dtype=np.float64) / 255.0


def _ellipse_mask(size: int, cy: float, cx: float, ry: float, rx: float,
                  angle: float) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size]
    y, x = ys - cy, xs - cx
    ca, sa = math.cos(angle), math.sin(angle)
    u = (x * ca + y * sa) / rx
    v = (-x * sa + y * ca) / ry
    return u**2 + v**2 <= 1.0


def _stripes(size: int, period: float, phase: float) -> np.ndarray:
    ys = np.arange(size, dtype=np.float64)[:, None]
    wave = 0.5 + 0.5 * np.sin(2 * math.pi * ys / period + phase)
    return np.broadcast_to(wave, (size, size))


def _speckle(rng: np.random.Generator, size: int) -> np.ndarray:
    noise = rng.uniform(0.0, 1.0, size=(size, size))
    # one smoothing pass keeps the texture high-frequency but not pixel-iid
    padded = np.pad(noise, 1, mode="edge")
    return (padded[:-2, 1:-1] + padded[2:, 1:-1] + padded[1:-1, :-2]
            + padded[1:-1, 2:] + noise) / 5.0


def _paint(image: np.ndarray, region: np.ndarray, texture: np.ndarray,
           tint: tuple[float, float, float]) -> None:
    field = 0.15 + 0.85 * texture
    for c in range(3):
        image[..., c][region] = field[region] * tint[c]


def _center_transform(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    # equal-magnitude, random-direction displacements keep every center
    # comparably far from the others (no outlier domains)
    gain = 1.0 + rng.uniform(0.10, 0.18, size=3) * rng.choice([-1, 1], size=3)
    shift = rng.uniform(0.14, 0.20, size=3) * rng.choice([-1, 1], size=3)
    return gain, shift


def generate_image(rng: np.random.Generator, size: int, n_classes: int,
                   gain: np.ndarray, shift: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One (image, mask) pair before center color transform is baked in."""
    image = 0.45 + 0.25 * _smooth_noise(rng, size, cells=6)
    mask = np.zeros((size, size), dtype=np.uint8)
    stripes = _stripes(size, period=8.0, phase=rng.uniform(0, 2 * math.pi))
    speckle = _speckle(rng, size)

    def rand_ellipse(r_lo: float, r_hi: float, margin: float = 0.12):
        ry = rng.uniform(r_lo, r_hi)
        rx = rng.uniform(r_lo, r_hi)
        cy = rng.uniform(margin * size, (1 - margin) * size)
        cx = rng.uniform(margin * size, (1 - margin) * size)
        return _ellipse_mask(size, cy, cx, ry, rx, rng.uniform(0, math.pi)), (cy, cx, ry, rx)

    stripe_tint = (0.55, 0.75, 0.55)
    speckle_tint = (0.8, 0.55, 0.5)

    if n_classes >= 2:
        for _ in range(rng.integers(2, 4)):
            region, _ = rand_ellipse(size * 0.10, size * 0.18)
            _paint(image, region, stripes, stripe_tint)
            mask[region] = 1
    if n_classes >= 3:
        for _ in range(rng.integers(2, 4)):
            parent, (cy, cx, ry, rx) = rand_ellipse(size * 0.14, size * 0.22)
            _paint(image, parent, speckle, speckle_tint)
            mask[parent] = 2
            if n_classes >= 4 and rng.uniform() < 0.85:
                child = _ellipse_mask(size, cy + rng.uniform(-2, 2), cx + rng.uniform(-2, 2),
                                      ry * 0.45, rx * 0.45, rng.uniform(0, math.pi))
                child &= parent
                _paint(image, child, stripes, stripe_tint)
                mask[child] = 3
    image = np.clip(image * gain + shift, 0.0, 1.0)
    return image, mask


def gen_toy_corpus(out_dir: str | Path, n_images: int = 200, size: int = 96,
                   n_classes: int = 4, seed: int = 0, n_centers: int = 8,
                   center_prefix: str = "c", ignore_index: int = 255) -> Path:
    """Write a labeled corpus of n_images under out_dir and return the manifest path.

    Images are assigned round-robin to n_centers pseudo centers; each center
    applies a fixed random color gain/shift, which makes mean image color a
    strong center predictor (a deliberate domain-shift property).
    """
    if not (2 <= n_classes <= 4):
        raise ValueError("toy corpus supports 2 to 4 classes")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    transforms = [_center_transform(rng) for _ in range(n_centers)]
    entries = []
    for i in range(n_images):
        center = i % n_centers
        gain, shift = transforms[center]
        image, mask = generate_image(rng, size, n_classes, gain, shift)
        name = f"img_{i:04d}"
        img_path = f"images/{name}.png"
        mask_path = f"masks/{name}.png"
        Image.fromarray((image * 255).round().astype(np.uint8)).save(out_dir / img_path)
        Image.fromarray(mask).save(out_dir / mask_path)
        entries.append({"path": img_path, "mask_path": mask_path,
                        "center_id": f"{center_prefix}{center}"})
    return write_manifest(out_dir, classes=n_classes, ignore_index=ignore_index,
                          entries=entries)
