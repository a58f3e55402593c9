"""Corpus loading, label-fraction splitting, augmentation, and crop-pair sampling.

Conventions: images are float32 tensors (3, H, W) with values in [0, 1];
masks are int64 tensors (H, W) whose values are class indices in
[0, classes) or the corpus ignore index.

Corpus layout: a directory containing a JSON manifest plus raster files.
The manifest holds ``classes``, ``ignore_index`` and an ``entries`` list of
``{"path": ..., "mask_path": ..., "center_id": ...}`` records; ``mask_path``
and ``center_id`` are optional per entry. Masks are single-channel integer
rasters (e.g. 8-bit PNG).
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, replace
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .config import AugmentConfig

SUPPORTED_FRACTIONS = (
    Fraction(1),
    Fraction(1, 2),
    Fraction(1, 4),
    Fraction(1, 8),
    Fraction(1, 16),
    Fraction(1, 32),
)


@dataclass
class Sample:
    image: torch.Tensor                 # (3, H, W) float32 in [0, 1]
    mask: torch.Tensor | None           # (H, W) int64, or None for unlabeled
    source_id: str
    center_id: str | None = None

    @property
    def labeled(self) -> bool:
        return self.mask is not None


@dataclass
class CropPair:
    crop1: torch.Tensor                 # (3, H_in, W_in)
    crop2: torch.Tensor
    rect1: tuple[float, float, float, float]   # overlap (x0, y0, x1, y1) in crop1 coords
    rect2: tuple[float, float, float, float]
    overlap_fraction: float


@dataclass
class SplitSpec:
    mode: str                           # "by_center" | "by_image"
    fraction: Fraction
    seed: int
    round_up: bool = False

    def __post_init__(self):
        if self.mode not in ("by_center", "by_image"):
            raise ValueError(f"unknown split mode '{self.mode}'")
        self.fraction = parse_fraction(self.fraction)


def parse_fraction(value) -> Fraction:
    frac = Fraction(value)
    if frac not in SUPPORTED_FRACTIONS:
        supported = ", ".join(str(f) for f in SUPPORTED_FRACTIONS)
        raise ValueError(f"unsupported label fraction {value}; supported: {supported}")
    return frac


class CorpusError(RuntimeError):
    """Raised when a corpus directory or one of its files is invalid."""


def _load_image(path: Path) -> torch.Tensor:
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    except OSError as exc:
        raise CorpusError(f"unreadable image file {path}: {exc}") from exc
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def _load_mask(path: Path) -> torch.Tensor:
    try:
        with Image.open(path) as img:
            arr = np.asarray(img, dtype=np.int64)
    except OSError as exc:
        raise CorpusError(f"unreadable mask file {path}: {exc}") from exc
    if arr.ndim == 3:
        arr = arr[..., 0]
    return torch.from_numpy(arr)


def load_manifest(root: str | Path, manifest: str = "manifest.json") -> dict:
    path = Path(root) / manifest
    if not path.exists():
        raise CorpusError(f"manifest not found: {path}")
    spec = json.loads(path.read_text())
    for key in ("classes", "ignore_index", "entries"):
        if key not in spec:
            raise CorpusError(f"manifest {path} missing required field '{key}'")
    return spec


def load_corpus(root: str | Path, manifest: str = "manifest.json") -> list[Sample]:
    """Load every manifest entry into a Sample, ordered by source_id.

    Entries with a ``mask_path`` are labeled; a missing mask file is a hard
    error, as is any mask value outside [0, classes) other than the ignore
    index.
    """
    root = Path(root)
    spec = load_manifest(root, manifest)
    classes = int(spec["classes"])
    ignore = int(spec["ignore_index"])
    samples = []
    for entry in spec["entries"]:
        img_path = root / entry["path"]
        source_id = Path(entry["path"]).stem
        image = _load_image(img_path)
        mask = None
        if entry.get("mask_path"):
            mask_path = root / entry["mask_path"]
            if not mask_path.exists():
                raise CorpusError(f"labeled entry '{source_id}' is missing its mask: {mask_path}")
            mask = _load_mask(mask_path)
            if mask.shape != image.shape[1:]:
                raise CorpusError(
                    f"mask shape {tuple(mask.shape)} does not match image "
                    f"{tuple(image.shape[1:])} for '{source_id}'"
                )
            bad = (mask < 0) | ((mask >= classes) & (mask != ignore))
            if bool(bad.any()):
                raise CorpusError(
                    f"mask for '{source_id}' contains values outside [0, {classes}) "
                    f"and != ignore index {ignore}"
                )
        samples.append(Sample(image=image, mask=mask, source_id=source_id,
                              center_id=entry.get("center_id")))
    ids = [s.source_id for s in samples]
    if len(set(ids)) != len(ids):
        raise CorpusError("duplicate source ids in manifest")
    samples.sort(key=lambda s: s.source_id)
    return samples


def _selected_count(fraction: Fraction, total: int, round_up: bool) -> int:
    exact = fraction * total
    count = math.ceil(exact) if round_up else math.floor(exact)
    return max(1, min(total, count))


def split_labeled(samples: list[Sample], spec: SplitSpec) -> tuple[list[Sample], list[Sample]]:
    """Partition samples into (labeled, unlabeled) per the split spec.

    by_center keeps whole acquisition centers labeled; by_image keeps
    individual images. The fraction is applied over mask-bearing samples;
    samples without masks always land in the unlabeled half, and unlabeled
    samples have their masks stripped. The selection is a seeded shuffle
    over sorted keys, so identical inputs give identical splits.
    """
    if not samples:
        raise ValueError("cannot split an empty corpus")
    masked = [s for s in samples if s.mask is not None]
    if not masked:
        raise ValueError("cannot split a corpus with no masks")
    rng = random.Random(spec.seed)
    if spec.mode == "by_center":
        if any(s.center_id is None for s in masked):
            raise ValueError("by_center split requires center_id on every labeled sample")
        centers = sorted({s.center_id for s in masked})
        rng.shuffle(centers)
        keep = set(centers[: _selected_count(spec.fraction, len(centers), spec.round_up)])
        chosen = {s.source_id for s in masked if s.center_id in keep}
    else:
        order = list(range(len(masked)))
        rng.shuffle(order)
        picked = set(order[: _selected_count(spec.fraction, len(masked), spec.round_up)])
        chosen = {masked[i].source_id for i in picked}
    labeled = [s for s in samples if s.source_id in chosen]
    unlabeled = [replace(s, mask=None) for s in samples if s.source_id not in chosen]
    if not labeled:
        raise ValueError(f"fraction {spec.fraction} selects zero labeled samples")
    return labeled, unlabeled


def _resize_image(image: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    return F.interpolate(image[None], size=size, mode="bilinear", align_corners=False)[0]


def sample_crop_pair(
    image: torch.Tensor,
    overlap_range: tuple[float, float],
    out_size: tuple[int, int],
    rng: torch.Generator,
    scale_range: tuple[float, float] = (0.5, 1.0),
    max_tries: int = 100,
) -> CropPair:
    """Draw two square crops of one image whose overlap fraction lies in range.

    The overlap fraction is intersection area over crop area (crops share a
    side length, so the measure is symmetric). Both crops are resized to
    out_size and the shared source rectangle is reported in each crop's
    post-resize coordinates. Raises after max_tries if the requested overlap
    is geometrically infeasible.
    """
    lo, hi = overlap_range
    if not (0.0 < lo <= hi <= 1.0):
        raise ValueError(f"overlap range must satisfy 0 < lo <= hi <= 1, got {overlap_range}")
    out_h, out_w = out_size
    if image.shape[1] < out_h or image.shape[2] < out_w:
        scale = max(out_h / image.shape[1], out_w / image.shape[2])
        new_size = (math.ceil(image.shape[1] * scale), math.ceil(image.shape[2] * scale))
        image = _resize_image(image, new_size)
    _, height, width = image.shape
    min_dim = min(height, width)
    side_lo = max(8, int(round(scale_range[0] * min_dim)))
    side_hi = max(side_lo, int(scale_range[1] * min_dim))

    def _uniform(a: float, b: float) -> float:
        u = torch.rand((), generator=rng).item()
        return a + (b - a) * u

    def _randint(a: int, b: int) -> int:
        # inclusive bounds
        if a == b:
            return a
        return int(torch.randint(a, b + 1, (), generator=rng).item())

    for _ in range(max_tries):
        side = _randint(side_lo, side_hi)
        target = _uniform(lo, hi)
        fx = _uniform(target, 1.0)
        fy = target / fx
        dx = int(round(side * (1.0 - fx)))
        dy = int(round(side * (1.0 - fy)))
        if torch.rand((), generator=rng).item() < 0.5:
            dx = -dx
        if torch.rand((), generator=rng).item() < 0.5:
            dy = -dy
        measured = (side - abs(dx)) * (side - abs(dy)) / side**2
        if not (lo <= measured <= hi):
            continue
        x_lo, x_hi = max(0, -dx), width - side - max(0, dx)
        y_lo, y_hi = max(0, -dy), height - side - max(0, dy)
        if x_hi < x_lo or y_hi < y_lo:
            continue
        x1 = _randint(x_lo, x_hi)
        y1 = _randint(y_lo, y_hi)
        x2, y2 = x1 + dx, y1 + dy

        crop1 = image[:, y1:y1 + side, x1:x1 + side]
        crop2 = image[:, y2:y2 + side, x2:x2 + side]
        if (x1, y1) == (x2, y2):
            crop2 = crop1.clone()
        ix0, iy0 = max(x1, x2), max(y1, y2)
        ix1, iy1 = min(x1, x2) + side, min(y1, y2) + side
        sx, sy = out_w / side, out_h / side
        rect1 = ((ix0 - x1) * sx, (iy0 - y1) * sy, (ix1 - x1) * sx, (iy1 - y1) * sy)
        rect2 = ((ix0 - x2) * sx, (iy0 - y2) * sy, (ix1 - x2) * sx, (iy1 - y2) * sy)
        return CropPair(
            crop1=_resize_image(crop1, out_size),
            crop2=_resize_image(crop2, out_size),
            rect1=rect1,
            rect2=rect2,
            overlap_fraction=measured,
        )
    raise RuntimeError(
        f"could not realize an overlap in [{lo}, {hi}] after {max_tries} tries "
        f"(image {height}x{width}, sides [{side_lo}, {side_hi}])"
    )


def _gaussian_kernel1d(sigma: float, radius: int, dtype, device) -> torch.Tensor:
    x = torch.arange(-radius, radius + 1, dtype=dtype, device=device)
    k = torch.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(image: torch.Tensor, sigma: float) -> torch.Tensor:
    """Separable gaussian blur of a (3, H, W) image."""
    radius = max(1, int(math.ceil(3.0 * sigma)))
    k = _gaussian_kernel1d(sigma, radius, image.dtype, image.device)
    c = image.shape[0]
    pad = (radius, radius)
    x = image[None]
    x = F.conv2d(F.pad(x, pad + (0, 0), mode="reflect"), k.view(1, 1, 1, -1).expand(c, 1, 1, -1), groups=c)
    x = F.conv2d(F.pad(x, (0, 0) + pad, mode="reflect"), k.view(1, 1, -1, 1).expand(c, 1, -1, 1), groups=c)
    return x[0]


GRAY_WEIGHTS = (0.299, 0.587, 0.114)


def augment(sample: Sample, policy: AugmentConfig, rng: torch.Generator) -> Sample:
    """Apply flips (mirrored onto the mask) and photometric jitter (image only).

    All probabilities zero gives back the sample unchanged. Geometric
    transforms use the same draw for image and mask; photometric transforms
    never touch the mask and keep the image in [0, 1].
    """
    image, mask = sample.image, sample.mask

    def _hit(p: float) -> bool:
        return p > 0 and torch.rand((), generator=rng).item() < p

    if _hit(policy.hflip):
        image = torch.flip(image, dims=(2,))
        mask = torch.flip(mask, dims=(1,)) if mask is not None else None
    if _hit(policy.vflip):
        image = torch.flip(image, dims=(1,))
        mask = torch.flip(mask, dims=(0,)) if mask is not None else None
    if _hit(policy.blur):
        lo, hi = policy.blur_sigma
        sigma = lo + (hi - lo) * torch.rand((), generator=rng).item()
        image = gaussian_blur(image, sigma)
    if _hit(policy.color_jitter):
        s = policy.jitter_strength
        gain = 1.0 + (torch.rand((3, 1, 1), generator=rng) * 2 - 1) * s
        shift = (torch.rand((3, 1, 1), generator=rng) * 2 - 1) * s * 0.5
        image = image * gain + shift
    if _hit(policy.grayscale):
        w = torch.tensor(GRAY_WEIGHTS, dtype=image.dtype).view(3, 1, 1)
        gray = (image * w).sum(dim=0, keepdim=True)
        image = gray.expand_as(image).contiguous()
    image = image.clamp(0.0, 1.0)
    return replace(sample, image=image, mask=mask)


def resize_sample(sample: Sample, size: tuple[int, int]) -> Sample:
    """Resize image bilinearly and mask (if any) with nearest neighbor."""
    if sample.image.shape[1:] == size:
        return sample
    image = _resize_image(sample.image, size)
    mask = sample.mask
    if mask is not None:
        mask = F.interpolate(mask[None, None].float(), size=size, mode="nearest")[0, 0].long()
    return replace(sample, image=image, mask=mask)


def write_manifest(root: str | Path, classes: int, ignore_index: int, entries: list[dict],
                   manifest: str = "manifest.json") -> Path:
    path = Path(root) / manifest
    path.write_text(json.dumps(
        {"classes": classes, "ignore_index": ignore_index, "entries": entries}, indent=1))
    return path
