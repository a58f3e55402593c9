"""Loss components: supervised CE, directional pixel contrast, cross-consistency,
entropy, and their weighted combination.

The contrastive loss is directional: per overlap pixel, the lower-confidence
view is pulled toward the higher-confidence one (strictly higher, and only
above the confidence threshold), while bank entries and same-view pixels
with a different pseudo-label push it away. The confident side and all
negatives are gradient-detached by default.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import torch
import torch.nn.functional as F

from .model import PredictionMap

WARN_COUNTS = {"ce_all_ignore": 0, "overlap_skipped": 0}


def supervised_ce(pred: PredictionMap, target: torch.Tensor, ignore_index: int = 255) -> torch.Tensor:
    """Mean cross-entropy over non-ignored pixels of an upsampled prediction.

    Returns 0 (and bumps WARN_COUNTS["ce_all_ignore"]) when every pixel is
    ignored.
    """
    logits = pred.logits
    if target.dim() == logits.dim() - 2:
        target = target[None]
    if logits.shape[2:] != target.shape[1:] or logits.shape[0] != target.shape[0]:
        raise ValueError(
            f"prediction {tuple(logits.shape)} does not match target {tuple(target.shape)}")
    valid = target != ignore_index
    n = int(valid.sum())
    if n == 0:
        WARN_COUNTS["ce_all_ignore"] += 1
        return logits.sum() * 0.0
    logp = F.log_softmax(logits, dim=1)
    safe_target = torch.where(valid, target, torch.zeros_like(target))
    picked = logp.gather(1, safe_target.unsqueeze(1)).squeeze(1)
    return -(picked * valid.to(picked.dtype)).sum() / n


def pseudo_labels(pred: PredictionMap) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-pixel (confidence, label) from the prediction, gradient-severed."""
    probs = pred.probs.detach()
    conf, labels = probs.max(dim=1)
    return conf, labels


def _grid_for_rect(rect, stride: int, feat_hw: tuple[int, int],
                   grid_hw: tuple[int, int], dtype, device) -> torch.Tensor:
    """grid_sample coordinates covering ``rect`` (crop pixel coords) on a feature map."""
    x0, y0, x1, y1 = (v / stride for v in rect)
    hf, wf = feat_hw
    hg, wg = grid_hw
    # continuous feature coords of cell centers inside the rect
    xs = x0 + (torch.arange(wg, dtype=dtype, device=device) + 0.5) * (x1 - x0) / wg
    ys = y0 + (torch.arange(hg, dtype=dtype, device=device) + 0.5) * (y1 - y0) / hg
    # align_corners=False normalization: pixel-center c maps to (2c + 1)/size - 1,
    # with c = continuous coord - 0.5, i.e. 2*coord/size - 1.
    xn = 2.0 * xs / wf - 1.0
    yn = 2.0 * ys / hf - 1.0
    gy, gx = torch.meshgrid(yn, xn, indexing="ij")
    return torch.stack([gx, gy], dim=-1)                        # (Hg, Wg, 2)


def overlap_grid_size(rect1, stride: int) -> tuple[int, int]:
    x0, y0, x1, y1 = rect1
    return int(round((y1 - y0) / stride)), int(round((x1 - x0) / stride))


def resample_overlap(values: torch.Tensor, rect, stride: int,
                     grid_hw: tuple[int, int]) -> torch.Tensor:
    """Bilinearly resample the rect region of a (C, Hf, Wf) map onto grid_hw."""
    grid = _grid_for_rect(rect, stride, values.shape[1:], grid_hw, values.dtype, values.device)
    out = F.grid_sample(values[None], grid[None], mode="bilinear",
                        padding_mode="border", align_corners=False)
    return out[0]                                               # (C, Hg, Wg)


def align_overlap(map1: torch.Tensor, map2: torch.Tensor, rect1, rect2, stride: int):
    """Resample both overlap patches onto a common grid sized from rect1.

    Returns (flat1, flat2, (Hg, Wg)) with flatN of shape (Hg*Wg, C) and
    positional correspondence, or None (counted) when the overlap spans less
    than one feature cell.
    """
    hg, wg = overlap_grid_size(rect1, stride)
    if hg < 1 or wg < 1:
        WARN_COUNTS["overlap_skipped"] += 1
        return None
    a1 = resample_overlap(map1, rect1, stride, (hg, wg))
    a2 = resample_overlap(map2, rect2, stride, (hg, wg))
    c = map1.shape[0]
    return a1.reshape(c, -1).T, a2.reshape(c, -1).T, (hg, wg)


@dataclass
class ContrastiveContext:
    """One direction (view 1 -> view 2) of the pixel contrastive loss.

    proj1/proj2 are the aligned overlap projections (N, P); conf/labels are
    per-pixel confidences and pseudo-labels from the main classifier.
    neg_vectors/neg_labels hold the shared memory-bank draw; when
    negative_sampler is set it is called per gated pixel with that pixel's
    label instead (fresh per-pixel draws).
    """
    proj1: torch.Tensor
    proj2: torch.Tensor
    conf1: torch.Tensor
    conf2: torch.Tensor
    labels1: torch.Tensor
    labels2: torch.Tensor
    neg_vectors: torch.Tensor | None = None
    neg_labels: torch.Tensor | None = None
    threshold: float = 0.75
    temperature: float = 0.1
    detach_target: bool = True
    mean_over_positives: bool = True
    negative_sampler: Callable[[int], tuple[torch.Tensor, torch.Tensor]] | None = field(
        default=None, repr=False)


def _unit(x: torch.Tensor) -> torch.Tensor:
    return F.normalize(x, dim=-1, eps=1e-12)


def directional_contrastive_pair(ctx: ContrastiveContext) -> torch.Tensor:
    """One direction of the contrastive loss, averaged over gated positives.

    Per pixel i with conf1_i > threshold and conf1_i < conf2_i:
      -log  s(p1_i, p2_i) / ( s(p1_i, p2_i) + sum over negatives s(p1_i, n) )
    where s(a, b) = exp(cos(a, b) / temperature) and the negatives are the
    bank entries plus every view-2 pixel whose pseudo-label differs from
    labels1_i. The target side and the negatives carry no gradient when
    detach_target is set.
    """
    n = ctx.proj1.shape[0]
    if n == 0:
        return torch.zeros((), dtype=ctx.proj1.dtype)
    pos = (ctx.conf1 > ctx.threshold) & (ctx.conf1 < ctx.conf2)
    if not bool(pos.any()):
        return ctx.proj1.sum() * 0.0
    tau = ctx.temperature
    p2 = ctx.proj2.detach() if ctx.detach_target else ctx.proj2
    n1 = _unit(ctx.proj1)
    n2 = _unit(p2)
    s_pos = torch.exp((n1 * n2).sum(dim=1) / tau)               # (N,)
    pair_logits = torch.exp(n1 @ n2.T / tau)                    # (N, N)
    pair_mask = ctx.labels2[None, :] != ctx.labels1[:, None]
    denom = s_pos + (pair_logits * pair_mask.to(s_pos.dtype)).sum(dim=1)

    idx = torch.nonzero(pos, as_tuple=False).squeeze(1)
    if ctx.negative_sampler is not None:
        contributions = []
        for i in idx.tolist():
            vecs, labels = ctx.negative_sampler(int(ctx.labels1[i]))
            if vecs is None or not vecs.numel():
                contributions.append(s_pos.new_zeros(()))
                continue
            nb = _unit(vecs.detach().to(n1.dtype))
            keep = labels != ctx.labels1[i]
            sims = torch.exp(n1[i] @ nb.T / tau)
            contributions.append((sims * keep.to(sims.dtype)).sum())
        denom = denom + torch.zeros_like(s_pos).index_put((idx,), torch.stack(contributions))
    elif ctx.neg_vectors is not None and ctx.neg_vectors.numel():
        nb = _unit(ctx.neg_vectors.detach().to(n1.dtype))
        bank_logits = torch.exp(n1 @ nb.T / tau)                # (N, Q)
        bank_mask = ctx.neg_labels[None, :] != ctx.labels1[:, None]
        denom = denom + (bank_logits * bank_mask.to(s_pos.dtype)).sum(dim=1)

    per_pixel_loss = -(torch.log(s_pos) - torch.log(denom))
    gated = per_pixel_loss * pos.to(per_pixel_loss.dtype)
    divisor = int(pos.sum()) if ctx.mean_over_positives else n
    return gated.sum() / divisor


def directional_contrastive(ctx12: ContrastiveContext, ctx21: ContrastiveContext) -> torch.Tensor:
    """Sum of both directions of the pixel contrastive loss."""
    return directional_contrastive_pair(ctx12) + directional_contrastive_pair(ctx21)


def cross_consistency(main_pred: PredictionMap, aux_preds: list[PredictionMap],
                      detach_target: bool = True) -> torch.Tensor:
    """Mean squared distance between main and auxiliary class probabilities.

    Averaged over heads, pixels and classes; the main prediction acts as the
    (detached) target by default.
    """
    if not aux_preds:
        raise ValueError("cross_consistency requires at least one auxiliary prediction")
    target = main_pred.probs.detach() if detach_target else main_pred.probs
    total = None
    for aux in aux_preds:
        if aux.probs.shape != target.shape:
            raise ValueError(
                f"auxiliary prediction {tuple(aux.probs.shape)} does not match "
                f"main {tuple(target.shape)}")
        term = ((aux.probs - target) ** 2).mean()
        total = term if total is None else total + term
    return total / len(aux_preds)


def entropy_loss(pred: PredictionMap) -> torch.Tensor:
    """Mean per-pixel prediction entropy in nats, with 0*log(0) = 0."""
    p = pred.probs
    ent = -torch.special.xlogy(p, p).sum(dim=1)                 # (B, h, w)
    return ent.mean()


def total_loss(parts: dict, weights) -> tuple[torch.Tensor, dict[str, float]]:
    """Weighted combination of the loss parts plus a float breakdown for logging.

    ``parts`` maps {"sup", "cont", "cross", "ent"} to scalars (tensors or
    floats); missing parts count as zero.
    """
    def _get(name):
        v = parts.get(name, 0.0)
        return v if torch.is_tensor(v) else torch.tensor(float(v))

    sup, cont, cross, ent = (_get(k) for k in ("sup", "cont", "cross", "ent"))
    total = (weights.w_sup * sup + weights.w_cont * cont
             + weights.w_cross * cross + weights.w_ent * ent)
    breakdown = {
        "l_sup": float(sup.detach()), "l_cont": float(cont.detach()),
        "l_cross": float(cross.detach()), "l_ent": float(ent.detach()),
        "total": float(total.detach()),
    }
    return total, breakdown
