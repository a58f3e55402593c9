"""End-to-end training loop: supervised warm-up, the three unsupervised branches,
poly LR schedule, seeding, logging, checkpointing, and multi-seed experiments.

Per step: (1) labeled batch -> upsampled CE; (2) unlabeled batch -> main
prediction at feature resolution, K perturbed copies per type through the
auxiliary heads (cross-consistency) and the entropy penalty; (3) an
overlapping crop pair per unlabeled image -> aligned projections ->
directional contrastive loss with memory-bank negatives; (4) one SGD step on
the weighted total. During warm-up only (1) runs.
"""

from __future__ import annotations

import json
import math
import statistics
from dataclasses import replace
from pathlib import Path

import torch

from .bank import MemoryBank, entries_as_tensors
from .config import Config, config_to_dict, save_config
from .data import Sample, SplitSpec, augment, resize_sample, sample_crop_pair, split_labeled
from .losses import (ContrastiveContext, align_overlap, cross_consistency,
                     directional_contrastive_pair, entropy_loss, pseudo_labels,
                     supervised_ce, total_loss)
from .metrics import ConfusionMatrix, metrics, save_report
from .model import FeatureMap, SegModel, build_model, save_checkpoint
from .perturb import perturb_features


def poly_lr(step: int, max_steps: int, base_lr: float, power: float) -> float:
    """base_lr * (1 - step/max_steps) ** power."""
    if not (0 <= step <= max_steps):
        raise ValueError(f"step {step} outside [0, {max_steps}]")
    return base_lr * (1.0 - step / max_steps) ** power


def _photometric_only(policy):
    return replace(policy, hflip=0.0, vflip=0.0)


class Trainer:
    """Owns one model + bank + optimizer; all randomness flows from the seed."""

    def __init__(self, cfg: Config, labeled: list[Sample], unlabeled: list[Sample],
                 seed: int, run_dir: str | Path | None = None, ignore_index: int = 255):
        if not labeled:
            raise ValueError("training requires at least one labeled sample")
        self.cfg = cfg
        self.seed = seed
        self.ignore_index = ignore_index
        self.run_dir = Path(run_dir) if run_dir is not None else None
        size = cfg.data.input_size
        self.labeled = [resize_sample(s, (size, size)) for s in labeled]
        self.unlabeled = [resize_sample(s, (size, size)) for s in unlabeled]

        torch.manual_seed(seed)
        self.model = build_model(
            num_classes=cfg.model.num_classes, width=cfg.model.width,
            feature_dim=cfg.model.feature_dim, proj_dim=cfg.model.proj_dim,
            aux_heads=cfg.perturb.aux_heads, pretrained=cfg.model.pretrained)
        self.dtype = torch.float64 if cfg.train.float64 else torch.float32
        self.model.to(self.dtype)
        self.optimizer = torch.optim.SGD(
            self.model.parameters(), lr=cfg.train.base_lr,
            momentum=cfg.train.momentum, weight_decay=cfg.train.weight_decay)
        self.bank = MemoryBank(capacity=cfg.bank.capacity)

        def gen(offset: int) -> torch.Generator:
            g = torch.Generator()
            g.manual_seed(seed * 1_000_003 + offset)
            return g

        self.g_order = gen(1)
        self.g_aug = gen(2)
        self.g_crop = gen(3)
        self.g_perturb = gen(4)
        self.g_bank = gen(5)

        base = len(self.unlabeled) if self.unlabeled else len(self.labeled)
        batch = cfg.train.unlabeled_batch_size if self.unlabeled else cfg.train.batch_size
        self.steps_per_epoch = max(1, math.ceil(base / batch))
        self.max_steps = cfg.train.epochs * self.steps_per_epoch
        self.warmup_steps = cfg.train.warmup_epochs * self.steps_per_epoch
        self.step_idx = 0
        self._labeled_order: list[int] = []
        self._unlabeled_order: list[int] = []
        self._log_handle = None
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            save_config(cfg, self.run_dir / "config.yaml")
            self._log_handle = open(self.run_dir / "metrics.log", "a")

    # ---------------------------------------------------------------- batches

    def _draw_indices(self, order: list[int], n_total: int, count: int) -> list[int]:
        out = []
        while len(out) < count:
            if not order:
                perm = torch.randperm(n_total, generator=self.g_order).tolist()
                order.extend(perm)
            out.append(order.pop())
        return out

    def _labeled_batch(self) -> tuple[torch.Tensor, torch.Tensor]:
        idx = self._draw_indices(self._labeled_order, len(self.labeled),
                                 self.cfg.train.batch_size)
        images, masks = [], []
        for i in idx:
            s = augment(self.labeled[i], self.cfg.data.augment, self.g_aug)
            images.append(s.image)
            masks.append(s.mask)
        return (torch.stack(images).to(self.dtype), torch.stack(masks))

    def _unlabeled_batch(self, need_pairs: bool = True):
        idx = self._draw_indices(self._unlabeled_order, len(self.unlabeled),
                                 self.cfg.train.unlabeled_batch_size)
        photometric = _photometric_only(self.cfg.data.augment)
        size = (self.cfg.data.input_size, self.cfg.data.input_size)
        images, pairs = [], []
        for i in idx:
            base = self.unlabeled[i]
            # the full view feeds pseudo-label targets (cross-consistency,
            # entropy); it stays unaugmented so those targets are clean
            images.append(base.image)
            if not need_pairs:
                continue
            pair = sample_crop_pair(base.image, self.cfg.data.overlap_range, size,
                                    self.g_crop, scale_range=self.cfg.data.crop_scale)
            crop1 = augment(replace(base, image=pair.crop1, mask=None),
                            photometric, self.g_aug).image
            crop2 = augment(replace(base, image=pair.crop2, mask=None),
                            photometric, self.g_aug).image
            pairs.append(replace(pair, crop1=crop1, crop2=crop2))
        return torch.stack(images).to(self.dtype), (pairs if need_pairs else None)

    # ------------------------------------------------------------------ losses

    def _cross_and_entropy(self, xu: torch.Tensor):
        cfg = self.cfg
        feats = self.model.extract_features(xu)
        main_pred = self.model.classify(feats, upsample=False)
        l_ent = entropy_loss(main_pred) if cfg.loss.w_ent > 0 else None
        l_cross = None
        if cfg.loss.w_cross > 0:
            aux_preds = []
            for ptype in self.model.perturb_types:
                for k in range(self.model.aux_heads):
                    perturbed = perturb_features(feats.values, ptype, cfg.perturb,
                                                 self.g_perturb)
                    fmap = FeatureMap(perturbed, feats.stride, feats.input_size)
                    aux_preds.append(self.model.aux_classify(fmap, k, ptype))
            l_cross = cross_consistency(main_pred, aux_preds,
                                        detach_target=cfg.loss.detach_cross_target)
        return l_cross, l_ent

    def _contrastive(self, pairs):
        cfg = self.cfg
        x1 = torch.stack([p.crop1 for p in pairs]).to(self.dtype)
        x2 = torch.stack([p.crop2 for p in pairs]).to(self.dtype)
        f1 = self.model.extract_features(x1)
        f2 = self.model.extract_features(x2)
        phi1 = self.model.project(f1)
        phi2 = self.model.project(f2)
        probs1 = self.model.classify(f1, upsample=False).probs.detach()
        probs2 = self.model.classify(f2, upsample=False).probs.detach()
        conf1, lab1 = probs1.max(dim=1)
        conf2, lab2 = probs2.max(dim=1)

        def draw_negatives():
            vecs, labels = entries_as_tensors(
                self.bank.sample(cfg.bank.negatives, self.g_bank))
            return vecs, labels

        def sampler(label: int):
            return entries_as_tensors(
                self.bank.sample_negatives(label, cfg.bank.negatives, self.g_bank))

        neg12 = draw_negatives()
        neg21 = draw_negatives()
        total = None
        push_proj, push_conf, push_lab = [], [], []
        for b, pair in enumerate(pairs):
            stride = f1.stride
            aligned = align_overlap(phi1[b], phi2[b], pair.rect1, pair.rect2, stride)
            for phi_full, f, conf, lab in ((phi1, f1, conf1, lab1), (phi2, f2, conf2, lab2)):
                flat = phi_full[b].reshape(phi_full.shape[1], -1).T
                c = conf[b].reshape(-1)
                l = lab[b].reshape(-1)
                if cfg.bank.push_confident_only:
                    keep = c > cfg.loss.threshold
                    flat, c, l = flat[keep], c[keep], l[keep]
                push_proj.append(flat)
                push_conf.append(c)
                push_lab.append(l)
            if aligned is None:
                continue
            a_phi1, a_phi2, grid_hw = aligned
            # align the probability maps with the same grids, then re-derive
            # confidence/pseudo-label so boundary pixels mix distributions
            # instead of integer labels
            a_probs1, a_probs2, _ = align_overlap(probs1[b], probs2[b],
                                                  pair.rect1, pair.rect2, stride)
            a_conf1, a_lab1 = a_probs1.max(dim=1)
            a_conf2, a_lab2 = a_probs2.max(dim=1)
            common = dict(threshold=cfg.loss.threshold, temperature=cfg.loss.temperature,
                          detach_target=cfg.loss.detach_target,
                          mean_over_positives=cfg.loss.mean_over_positives)
            if cfg.bank.per_pixel_negatives:
                ctx12 = ContrastiveContext(a_phi1, a_phi2, a_conf1, a_conf2, a_lab1,
                                           a_lab2, negative_sampler=sampler, **common)
                ctx21 = ContrastiveContext(a_phi2, a_phi1, a_conf2, a_conf1, a_lab2,
                                           a_lab1, negative_sampler=sampler, **common)
            else:
                ctx12 = ContrastiveContext(a_phi1, a_phi2, a_conf1, a_conf2, a_lab1,
                                           a_lab2, neg_vectors=neg12[0],
                                           neg_labels=neg12[1], **common)
                ctx21 = ContrastiveContext(a_phi2, a_phi1, a_conf2, a_conf1, a_lab2,
                                           a_lab1, neg_vectors=neg21[0],
                                           neg_labels=neg21[1], **common)
            pair_loss = (directional_contrastive_pair(ctx12)
                         + directional_contrastive_pair(ctx21))
            total = pair_loss if total is None else total + pair_loss
        l_cont = (total / len(pairs)) if total is not None else None
        if push_proj:
            self.bank.push(torch.cat(push_proj), torch.cat(push_lab),
                           torch.cat(push_conf), self.step_idx,
                           sample_cap=self.cfg.bank.sample_cap, rng=self.g_bank)
        return l_cont

    # ------------------------------------------------------------------- step

    def train_step(self, batch_l, batch_u=None, pairs=None) -> dict:
        """One optimizer step; returns the loss breakdown (floats)."""
        cfg = self.cfg
        self.model.train()
        warmup = self.step_idx < self.warmup_steps
        images_l, masks_l = batch_l
        feats_l = self.model.extract_features(images_l)
        pred_l = self.model.classify(feats_l, upsample=True)
        parts = {"sup": supervised_ce(pred_l, masks_l, self.ignore_index)}
        if not warmup and batch_u is not None and batch_u.shape[0] > 0:
            if cfg.loss.w_cross > 0 or cfg.loss.w_ent > 0:
                l_cross, l_ent = self._cross_and_entropy(batch_u)
                if l_cross is not None:
                    parts["cross"] = l_cross
                if l_ent is not None:
                    parts["ent"] = l_ent
            if cfg.loss.w_cont > 0 and pairs:
                l_cont = self._contrastive(pairs)
                if l_cont is not None:
                    parts["cont"] = l_cont
        weights = cfg.loss if not warmup else replace(
            cfg.loss, w_cont=0.0, w_cross=0.0, w_ent=0.0)
        total, breakdown = total_loss(parts, weights)
        if not torch.isfinite(total):
            raise RuntimeError(f"non-finite loss at step {self.step_idx}: {breakdown}")
        lr = poly_lr(self.step_idx, self.max_steps, cfg.train.base_lr, cfg.train.lr_power)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        self.optimizer.step()
        breakdown["lr"] = lr
        breakdown["step"] = self.step_idx
        self.step_idx += 1
        if self._log_handle is not None:
            self._log_handle.write(json.dumps(breakdown) + "\n")
            self._log_handle.flush()
        return breakdown

    def run_steps(self, n: int) -> list[dict]:
        out = []
        loss_cfg = self.cfg.loss
        unsup_active = bool(self.unlabeled) and (
            loss_cfg.w_cont > 0 or loss_cfg.w_cross > 0 or loss_cfg.w_ent > 0)
        for _ in range(n):
            batch_l = self._labeled_batch()
            batch_u, pairs = (None, None)
            if unsup_active and self.step_idx >= self.warmup_steps:
                batch_u, pairs = self._unlabeled_batch(need_pairs=loss_cfg.w_cont > 0)
            out.append(self.train_step(batch_l, batch_u, pairs))
        return out

    def run(self, test_samples: list[Sample] | None = None) -> dict:
        """Full schedule; returns {"history", "final", "best"} evaluation info."""
        cfg = self.cfg
        best = {"miou": -1.0, "epoch": -1}
        history = []
        for epoch in range(cfg.train.epochs):
            epoch_logs = self.run_steps(self.steps_per_epoch)
            history.append(epoch_logs[-1])
            is_last = epoch == cfg.train.epochs - 1
            if test_samples and ((epoch + 1) % cfg.train.eval_every == 0 or is_last):
                report = evaluate(self.model, test_samples, cfg.model.num_classes,
                                  self.ignore_index)
                if report["miou"] > best["miou"]:
                    best = {"miou": report["miou"], "epoch": epoch}
                    if self.run_dir is not None:
                        self._save(self.run_dir / "checkpoints" / "best.pt", epoch)
            if self.run_dir is not None and (
                    (epoch + 1) % cfg.train.checkpoint_every == 0 or is_last):
                self._save(self.run_dir / "checkpoints" / f"epoch_{epoch + 1:04d}.pt", epoch)
        final = None
        if test_samples:
            final = evaluate(self.model, test_samples, cfg.model.num_classes,
                             self.ignore_index)
        if self._log_handle is not None:
            self._log_handle.close()
            self._log_handle = None
        return {"history": history, "final": final, "best": best}

    def _save(self, path: Path, epoch: int) -> None:
        bank_state = self.bank.state_dict() if self.cfg.bank.serialize else None
        save_checkpoint(path, self.model, self.optimizer, epoch,
                        config=config_to_dict(self.cfg), bank_state=bank_state)


@torch.no_grad()
def evaluate(model: SegModel, samples: list[Sample], num_classes: int,
             ignore_index: int = 255, class_mean_accuracy: bool = False) -> dict:
    """Whole-image evaluation at native resolution via confusion-matrix accumulation."""
    model.eval()
    cm = ConfusionMatrix(num_classes, ignore_index)
    dtype = next(model.parameters()).dtype
    for sample in samples:
        if sample.mask is None:
            continue
        feats = model.extract_features(sample.image.to(dtype)[None])
        pred = model.classify(feats, upsample=True)
        cm.accumulate(pred.probs.argmax(dim=1)[0], sample.mask)
    model.train()
    return metrics(cm, class_mean_accuracy=class_mean_accuracy)


def run_experiment(cfg: Config, train_samples: list[Sample], test_samples: list[Sample],
                   run_dir: str | Path | None = None, ignore_index: int = 255) -> dict:
    """Train one model per seed on its label split and aggregate test metrics.

    Returns per-seed rows plus mean/std for mIoU, mean Dice and accuracy,
    and writes reports under run_dir when given.
    """
    rows = []
    run_dir = Path(run_dir) if run_dir is not None else None
    for seed in cfg.experiment.seeds:
        split = SplitSpec(mode=cfg.data.split_mode, fraction=cfg.data.fraction,
                          seed=seed, round_up=cfg.data.round_centers_up)
        labeled, unlabeled = split_labeled(train_samples, split)
        seed_dir = run_dir / f"seed_{seed}" if run_dir is not None else None
        trainer = Trainer(cfg, labeled, unlabeled, seed=seed, run_dir=seed_dir,
                          ignore_index=ignore_index)
        result = trainer.run(test_samples)
        report = result["final"]
        rows.append({"seed": seed, "miou": report["miou"],
                     "mean_dice": report["mean_dice"], "accuracy": report["accuracy"],
                     "n_labeled": len(labeled), "n_unlabeled": len(unlabeled)})
    summary = {"rows": rows}
    for key in ("miou", "mean_dice", "accuracy"):
        values = [r[key] for r in rows]
        summary[f"{key}_mean"] = statistics.fmean(values)
        summary[f"{key}_std"] = statistics.stdev(values) if len(values) > 1 else 0.0
    if run_dir is not None:
        save_report(summary, run_dir / "reports" / "summary.json")
        lines = [f"seed {r['seed']}: mIoU {r['miou']:.4f} dice {r['mean_dice']:.4f} "
                 f"acc {r['accuracy']:.4f}" for r in rows]
        lines.append(f"mean mIoU {summary['miou_mean']:.4f} (+/- {summary['miou_std']:.4f})")
        (run_dir / "reports" / "summary.txt").write_text("\n".join(lines) + "\n")
    return summary
