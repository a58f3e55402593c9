"""Shared encoder-decoder, projection head, main and auxiliary pixel classifiers.

Any backbone works as long as it maps (B, 3, H, W) -> (B, D, ceil(H/s),
ceil(W/s)) and exposes ``stride`` and ``out_channels`` attributes. The
bundled ReferenceBackbone is a small stride-8 conv net meant for desk-scale
runs and tests, not paper-scale training.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

PERTURB_TYPES = ("noise", "feat_dropout", "dropout")

CHECKPOINT_SCHEMA = 1


@dataclass
class FeatureMap:
    values: torch.Tensor        # (B, D, H', W')
    stride: int
    input_size: tuple[int, int]


@dataclass
class PredictionMap:
    logits: torch.Tensor        # (B, C, h, w)
    probs: torch.Tensor
    upsampled: bool


def _norm(channels: int) -> nn.GroupNorm:
    # GroupNorm keeps per-item forward passes identical to batched ones.
    return nn.GroupNorm(min(8, channels), channels)


class ReferenceBackbone(nn.Module):
    """Three stride-2 stages followed by two dilated refinement blocks (stride 8)."""

    def __init__(self, width: int = 32, out_channels: int = 64):
        super().__init__()
        w = width
        self.stride = 8
        self.out_channels = out_channels
        self.encoder = nn.Sequential(
            nn.Conv2d(3, w, 3, stride=2, padding=1), _norm(w), nn.ReLU(inplace=True),
            nn.Conv2d(w, w, 3, padding=1), _norm(w), nn.ReLU(inplace=True),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1), _norm(2 * w), nn.ReLU(inplace=True),
            nn.Conv2d(2 * w, 2 * w, 3, padding=1), _norm(2 * w), nn.ReLU(inplace=True),
            nn.Conv2d(2 * w, 4 * w, 3, stride=2, padding=1), _norm(4 * w), nn.ReLU(inplace=True),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(4 * w, 4 * w, 3, padding=2, dilation=2), _norm(4 * w), nn.ReLU(inplace=True),
            nn.Conv2d(4 * w, out_channels, 3, padding=1), _norm(out_channels), nn.ReLU(inplace=True),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.encoder(x))


class SegModel(nn.Module):
    """Backbone + projector + main classifier + K auxiliary classifiers per perturbation type.

    Auxiliary classifiers share the main classifier's architecture (1x1 conv)
    but never its parameters.
    """

    def __init__(self, backbone: nn.Module, num_classes: int, proj_dim: int = 128,
                 aux_heads: int = 4, perturb_types: tuple[str, ...] = PERTURB_TYPES):
        super().__init__()
        if num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        self.backbone = backbone
        self.num_classes = num_classes
        self.proj_dim = proj_dim
        self.aux_heads = aux_heads
        self.perturb_types = tuple(perturb_types)
        d = backbone.out_channels
        self.classifier = nn.Conv2d(d, num_classes, 1)
        # per-pixel FC -> ReLU -> FC, realized as 1x1 convolutions
        self.projector = nn.Sequential(
            nn.Conv2d(d, proj_dim, 1), nn.ReLU(inplace=True), nn.Conv2d(proj_dim, proj_dim, 1))
        self.aux_classifiers = nn.ModuleDict({
            t: nn.ModuleList([nn.Conv2d(d, num_classes, 1) for _ in range(aux_heads)])
            for t in self.perturb_types
        })

    def extract_features(self, x: torch.Tensor) -> FeatureMap:
        if x.dim() == 3:
            x = x[None]
        if x.dim() != 4 or x.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) input, got {tuple(x.shape)}")
        values = self.backbone(x)
        return FeatureMap(values=values, stride=self.backbone.stride,
                          input_size=(x.shape[2], x.shape[3]))

    def project(self, f: FeatureMap) -> torch.Tensor:
        """Per-pixel projection map (B, P, H', W'); not normalized here."""
        return self.projector(f.values)

    def _predict(self, head: nn.Module, f: FeatureMap, upsample: bool) -> PredictionMap:
        logits = head(f.values)
        if upsample:
            logits = F.interpolate(logits, size=f.input_size, mode="bilinear",
                                   align_corners=False)
        return PredictionMap(logits=logits, probs=logits.softmax(dim=1), upsampled=upsample)

    def classify(self, f: FeatureMap, upsample: bool = False) -> PredictionMap:
        return self._predict(self.classifier, f, upsample)

    def aux_classify(self, f: FeatureMap, k: int, ptype: str) -> PredictionMap:
        """Auxiliary head (k, ptype) at feature resolution (never upsampled)."""
        if ptype not in self.aux_classifiers:
            raise KeyError(f"unknown perturbation type '{ptype}'; have {self.perturb_types}")
        heads = self.aux_classifiers[ptype]
        if not (0 <= k < len(heads)):
            raise IndexError(f"auxiliary head index {k} out of range [0, {len(heads)})")
        return self._predict(heads[k], f, upsample=False)

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        groups = {
            "backbone": list(self.backbone.parameters()),
            "classifier": list(self.classifier.parameters()),
            "projector": list(self.projector.parameters()),
        }
        for t, heads in self.aux_classifiers.items():
            groups[f"aux_{t}"] = [p for h in heads for p in h.parameters()]
        return groups


def build_model(num_classes: int, width: int = 32, feature_dim: int = 64,
                proj_dim: int = 128, aux_heads: int = 4,
                pretrained: str = "") -> SegModel:
    backbone = ReferenceBackbone(width=width, out_channels=feature_dim)
    if pretrained:
        state = torch.load(pretrained, map_location="cpu", weights_only=True)
        backbone.load_state_dict(state)
    return SegModel(backbone, num_classes=num_classes, proj_dim=proj_dim, aux_heads=aux_heads)


def save_checkpoint(path: str | Path, model: SegModel, optimizer=None, epoch: int = 0,
                    config: dict | None = None, bank_state: dict | None = None) -> None:
    """Write a versioned checkpoint archive with all parameter groups."""
    payload = {
        "schema": CHECKPOINT_SCHEMA,
        "epoch": epoch,
        "model_state": model.state_dict(),
        "model_meta": {
            "num_classes": model.num_classes,
            "proj_dim": model.proj_dim,
            "aux_heads": model.aux_heads,
            "perturb_types": list(model.perturb_types),
        },
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "config": config,
        "bank_state": bank_state,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str | Path, model: SegModel, optimizer=None) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    schema = payload.get("schema")
    if schema != CHECKPOINT_SCHEMA:
        raise ValueError(f"unsupported checkpoint schema {schema} (expected {CHECKPOINT_SCHEMA})")
    model.load_state_dict(payload["model_state"])
    if optimizer is not None and payload.get("optimizer_state") is not None:
        optimizer.load_state_dict(payload["optimizer_state"])
    return payload
