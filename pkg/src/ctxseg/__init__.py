"""Semi-supervised semantic segmentation with consistency against changing
contexts (directional pixel contrast over overlapping crops) and feature
perturbations (auxiliary-classifier cross-consistency), plus entropy
minimization."""

from .bank import BankEntry, MemoryBank
from .config import Config, load_config
from .data import CropPair, Sample, SplitSpec, load_corpus, sample_crop_pair, split_labeled
from .losses import (ContrastiveContext, align_overlap, cross_consistency,
                     directional_contrastive, directional_contrastive_pair,
                     entropy_loss, supervised_ce, total_loss)
from .metrics import ConfusionMatrix, metrics
from .model import FeatureMap, PredictionMap, ReferenceBackbone, SegModel, build_model
from .perturb import feature_dropout, feature_noise, spatial_dropout
from .train import Trainer, evaluate, poly_lr, run_experiment

__version__ = "0.1.0"

__all__ = [
    "BankEntry", "MemoryBank", "Config", "load_config", "CropPair", "Sample",
    "SplitSpec", "load_corpus", "sample_crop_pair", "split_labeled",
    "ContrastiveContext", "align_overlap", "cross_consistency",
    "directional_contrastive", "directional_contrastive_pair", "entropy_loss",
    "supervised_ce", "total_loss", "ConfusionMatrix", "metrics", "FeatureMap",
    "PredictionMap", "ReferenceBackbone", "SegModel", "build_model",
    "feature_dropout", "feature_noise", "spatial_dropout", "Trainer", "evaluate",
    "poly_lr", "run_experiment",
]
