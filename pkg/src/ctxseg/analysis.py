"""Diagnostics: neighborhood density maps and per-pixel embedding export.

The density map measures, for each position, the mean Euclidean distance
between the centered patch and its four axis-aligned neighbor patches; high
values mark low-density regions (boundaries), low values dense clusters.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import Sample
from .model import SegModel


def density_map(values, patch: int = 21, neighbor_offset: int | None = None) -> np.ndarray:
    """Mean patch distance to the 4 neighbors at the given offset (default: patch size).

    ``values`` is (H, W, D); the result is (H, W) with NaN where the center
    or any neighbor patch does not fit. Distances are plain L2 over the
    flattened patch content (all channels).
    """
    if torch.is_tensor(values):
        values = values.detach().cpu().numpy()
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 2:
        values = values[..., None]
    if values.ndim != 3:
        raise ValueError(f"expected (H, W, D) input, got shape {values.shape}")
    if patch % 2 != 1 or patch < 1:
        raise ValueError(f"patch size must be odd and positive, got {patch}")
    offset = patch if neighbor_offset is None else neighbor_offset
    h, w, _ = values.shape
    half = patch // 2
    if h < patch + 2 * offset or w < patch + 2 * offset:
        raise ValueError(
            f"input {h}x{w} too small for patch {patch} with neighbor offset {offset}")

    # squared difference against each shifted copy, then box-sum over the
    # patch window via an integral image
    out = np.full((h, w), np.nan)
    acc = np.zeros((h, w))
    shifts = ((offset, 0), (-offset, 0), (0, offset), (0, -offset))
    lo_h, hi_h = half + offset, h - half - offset   # valid center rows [lo, hi)
    lo_w, hi_w = half + offset, w - half - offset
    if lo_h >= hi_h or lo_w >= hi_w:
        raise ValueError("no valid center positions for the requested geometry")
    for dy, dx in shifts:
        shifted = np.roll(values, shift=(-dy, -dx), axis=(0, 1))
        sq = ((values - shifted) ** 2).sum(axis=2)
        integral = np.zeros((h + 1, w + 1))
        integral[1:, 1:] = sq.cumsum(axis=0).cumsum(axis=1)
        y0 = np.arange(lo_h, hi_h) - half
        x0 = np.arange(lo_w, hi_w) - half
        box = (integral[np.ix_(y0 + patch, x0 + patch)]
               - integral[np.ix_(y0, x0 + patch)]
               - integral[np.ix_(y0 + patch, x0)]
               + integral[np.ix_(y0, x0)])
        acc[lo_h:hi_h, lo_w:hi_w] += np.sqrt(np.maximum(box, 0.0))
    out[lo_h:hi_h, lo_w:hi_w] = acc[lo_h:hi_h, lo_w:hi_w] / len(shifts)
    return out


@torch.no_grad()
def feature_density_map(model: SegModel, sample: Sample, patch: int = 21,
                        neighbor_offset: int | None = None) -> np.ndarray:
    """Density map in feature space, after bilinear upsampling to image size."""
    model.eval()
    dtype = next(model.parameters()).dtype
    feats = model.extract_features(sample.image.to(dtype)[None])
    up = F.interpolate(feats.values, size=feats.input_size, mode="bilinear",
                       align_corners=False)
    return density_map(up[0].permute(1, 2, 0), patch=patch, neighbor_offset=neighbor_offset)


@torch.no_grad()
def export_embeddings(model: SegModel, samples: list[Sample], out_path: str | Path,
                      per_image: int = 100, seed: int = 0) -> int:
    """Write subsampled per-pixel feature vectors to a TSV for external projection.

    Columns: sample_id, label, f0..f{D-1}. Features are upsampled to image
    resolution first; labels come from the ground-truth mask, so samples
    without masks are skipped. Pixel coordinates are drawn from a generator
    seeded with ``seed``, so the export is reproducible.
    """
    model.eval()
    rng = torch.Generator()
    rng.manual_seed(seed)
    dtype = next(model.parameters()).dtype
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    rows = 0
    writer = None
    with open(out_path, "w", newline="") as fh:
        for sample in samples:
            if sample.mask is None:
                continue
            feats = model.extract_features(sample.image.to(dtype)[None])
            up = F.interpolate(feats.values, size=feats.input_size, mode="bilinear",
                               align_corners=False)[0]          # (D, H, W)
            d, h, w = up.shape
            if writer is None:
                writer = csv.writer(fh, delimiter="\t")
                writer.writerow(["sample_id", "label"] + [f"f{i}" for i in range(d)])
            count = min(per_image, h * w)
            flat_idx = torch.randperm(h * w, generator=rng)[:count]
            ys, xs = flat_idx // w, flat_idx % w
            for y, x in zip(ys.tolist(), xs.tolist()):
                vec = up[:, y, x].tolist()
                writer.writerow([sample.source_id, int(sample.mask[y, x])]
                                + [f"{v:.6g}" for v in vec])
                rows += 1
    return rows


def export_pixel_coordinates(samples: list[Sample], shapes: list[tuple[int, int]],
                             per_image: int = 100, seed: int = 0) -> list[tuple[str, int, int]]:
    """Recompute the (sample_id, y, x) coordinates export_embeddings drew."""
    rng = torch.Generator()
    rng.manual_seed(seed)
    coords = []
    for sample, (h, w) in zip(samples, shapes):
        if sample.mask is None:
            continue
        count = min(per_image, h * w)
        flat_idx = torch.randperm(h * w, generator=rng)[:count]
        for i in flat_idx.tolist():
            coords.append((sample.source_id, i // w, i % w))
    return coords


def save_density_outputs(dmap: np.ndarray, out_dir: str | Path, stem: str) -> tuple[Path, Path]:
    """Save a density map as a raw float array and an 8-bit raster preview."""
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    raw_path = out_dir / f"{stem}.npy"
    np.save(raw_path, dmap)
    finite = np.isfinite(dmap)
    img = np.zeros_like(dmap)
    if finite.any():
        vals = dmap[finite]
        span = vals.max() - vals.min()
        img[finite] = (vals - vals.min()) / (span if span > 0 else 1.0)
    png_path = out_dir / f"{stem}.png"
    Image.fromarray((img * 255).astype(np.uint8)).save(png_path)
    return raw_path, png_path
