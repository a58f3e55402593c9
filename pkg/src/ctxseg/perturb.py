"""Stochastic feature perturbations for cross-consistency training.

All three operators act on (B, D, H, W) feature tensors, draw fresh
randomness from the supplied generator on every call, and are differentiable
w.r.t. the features once the draw is fixed.
"""

from __future__ import annotations

import torch

from .config import PerturbConfig


def _uniform_like(shape, lo: float, hi: float, ref: torch.Tensor,
                  rng: torch.Generator) -> torch.Tensor:
    return torch.empty(shape, dtype=ref.dtype, device=ref.device).uniform_(lo, hi, generator=rng)


def feature_noise(f: torch.Tensor, lo: float, hi: float, rng: torch.Generator) -> torch.Tensor:
    """Multiplicative uniform noise: f * noise + f with noise ~ U(lo, hi) per element.

    lo == hi == 0 is a bitwise identity; lo == hi == 1 doubles the features.
    """
    if lo > hi:
        raise ValueError(f"noise interval requires lo <= hi, got ({lo}, {hi})")
    noise = _uniform_like(f.shape, lo, hi, f, rng)
    return f * noise + f


def feature_dropout(f: torch.Tensor, lo: float, hi: float, rng: torch.Generator,
                    literal: bool = False, drop_low: bool = False) -> torch.Tensor:
    """Zero whole spatial positions selected by a normalized channel-sum threshold.

    The channel sum is min-max normalized per sample to [0, 1]; one threshold
    gamma ~ U(lo, hi) is drawn per sample and positions with normalized value
    >= gamma are zeroed across all channels (drop_low=True inverts the
    comparison and drops the low-activation side instead). A spatially
    constant channel sum keeps everything (no-op). With literal=True the mask
    multiplies the normalized map itself, broadcast over channels, rather
    than the original features.
    """
    if not (0.0 < lo <= hi < 1.0):
        raise ValueError(f"feature dropout thresholds must satisfy 0 < lo <= hi < 1, got ({lo}, {hi})")
    if f.dim() != 4:
        raise ValueError(f"expected (B, D, H, W) features, got {tuple(f.shape)}")
    b = f.shape[0]
    s = f.sum(dim=1)                                           # (B, H, W)
    mn = s.amin(dim=(1, 2), keepdim=True)
    mx = s.amax(dim=(1, 2), keepdim=True)
    span = mx - mn
    flat = span <= 0
    norm = (s - mn) / torch.where(flat, torch.ones_like(span), span)
    gamma = _uniform_like((b, 1, 1), lo, hi, f, rng)
    keep = norm >= gamma if drop_low else norm < gamma
    keep = keep | flat                                          # constant map: keep all
    mask = keep.to(f.dtype).unsqueeze(1)                        # (B, 1, H, W)
    base = norm.unsqueeze(1).expand_as(f) if literal else f
    return base * mask


def spatial_dropout(f: torch.Tensor, keep_prob: float, rng: torch.Generator,
                    is_drop_prob: bool = False) -> torch.Tensor:
    """Bernoulli mask per spatial position, broadcast over channels, no rescaling."""
    if not (0.0 < keep_prob < 1.0):
        raise ValueError(f"dropout probability must lie in (0, 1), got {keep_prob}")
    p_keep = 1.0 - keep_prob if is_drop_prob else keep_prob
    if f.dim() != 4:
        raise ValueError(f"expected (B, D, H, W) features, got {tuple(f.shape)}")
    b, _, h, w = f.shape
    u = torch.rand((b, 1, h, w), dtype=f.dtype, device=f.device, generator=rng)
    mask = (u < p_keep).to(f.dtype)
    return f * mask


def perturb_features(f: torch.Tensor, ptype: str, cfg: PerturbConfig,
                     rng: torch.Generator) -> torch.Tensor:
    """Dispatch one freshly-drawn perturbation of the given type."""
    if ptype == "noise":
        return feature_noise(f, cfg.noise_lo, cfg.noise_hi, rng)
    if ptype == "feat_dropout":
        return feature_dropout(f, cfg.fdrop_lo, cfg.fdrop_hi, rng,
                               literal=cfg.fdrop_literal, drop_low=cfg.fdrop_drop_low)
    if ptype == "dropout":
        return spatial_dropout(f, cfg.dropout_keep, rng, is_drop_prob=cfg.dropout_is_drop_prob)
    raise ValueError(f"unknown perturbation type '{ptype}'")
