import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ctxseg.losses import (WARN_COUNTS, ContrastiveContext, align_overlap,
                           cross_consistency, directional_contrastive,
                           directional_contrastive_pair, entropy_loss, supervised_ce,
                           total_loss)
from ctxseg.config import LossConfig
from ctxseg.model import PredictionMap
from oracles import (ce_oracle, contrastive_pair_oracle, cross_consistency_oracle,
                     entropy_oracle, finite_difference_grad, relative_error)


def pred_from_logits(logits, upsampled=False):
    return PredictionMap(logits=logits, probs=logits.softmax(dim=1), upsampled=upsampled)


def random_context(seed, n=16, p=8, c=3, n_bank=6, threshold=0.4, temperature=0.1,
                   dtype=torch.float64, **kwargs):
    g = torch.Generator().manual_seed(seed)
    def r(*shape):
        return torch.rand(*shape, generator=g, dtype=dtype)
    return ContrastiveContext(
        proj1=r(n, p) * 2 - 1,
        proj2=r(n, p) * 2 - 1,
        conf1=r(n),
        conf2=r(n),
        labels1=torch.randint(0, c, (n,), generator=g),
        labels2=torch.randint(0, c, (n,), generator=g),
        neg_vectors=(r(n_bank, p) * 2 - 1) if n_bank else None,
        neg_labels=torch.randint(0, c, (n_bank,), generator=g) if n_bank else None,
        threshold=threshold,
        temperature=temperature,
        **kwargs,
    )


def oracle_of(ctx):
    return contrastive_pair_oracle(
        ctx.proj1.tolist(), ctx.proj2.tolist(), ctx.conf1.tolist(), ctx.conf2.tolist(),
        ctx.labels1.tolist(), ctx.labels2.tolist(),
        ctx.neg_vectors.tolist() if ctx.neg_vectors is not None else [],
        ctx.neg_labels.tolist() if ctx.neg_labels is not None else [],
        ctx.threshold, ctx.temperature, ctx.mean_over_positives)


class TestSupervisedCE:
    def test_perfect_prediction_is_zero(self):
        target = torch.randint(0, 3, (1, 4, 4))
        logits = torch.full((1, 3, 4, 4), -50.0)
        logits.scatter_(1, target.unsqueeze(1), 50.0)
        loss = supervised_ce(pred_from_logits(logits, True), target)
        assert float(loss) < 1e-8

    def test_uniform_prediction_is_log_c(self):
        logits = torch.zeros(1, 5, 4, 4)
        target = torch.randint(0, 5, (1, 4, 4))
        loss = supervised_ce(pred_from_logits(logits, True), target)
        assert abs(float(loss) - 1.6094379124341003) < 1e-6

    def test_matches_scalar_oracle(self):
        g = torch.Generator().manual_seed(3)
        logits = torch.randn(1, 3, 4, 4, generator=g, dtype=torch.float64)
        target = torch.randint(0, 3, (1, 4, 4), generator=g)
        loss = supervised_ce(pred_from_logits(logits, True), target)
        expect = ce_oracle(logits[0].tolist(), target[0].tolist())
        assert abs(float(loss) - expect) / abs(expect) < 1e-5

    def test_ignore_pixels_excluded(self):
        logits = torch.randn(1, 3, 2, 2, dtype=torch.float64)
        target = torch.tensor([[[0, 255], [255, 2]]])
        loss = supervised_ce(pred_from_logits(logits, True), target)
        expect = ce_oracle(logits[0].tolist(), target[0].tolist())
        assert abs(float(loss) - expect) < 1e-10

    def test_all_ignore_returns_zero_and_counts(self):
        before = WARN_COUNTS["ce_all_ignore"]
        logits = torch.randn(1, 3, 2, 2)
        target = torch.full((1, 2, 2), 255)
        assert float(supervised_ce(pred_from_logits(logits, True), target)) == 0.0
        assert WARN_COUNTS["ce_all_ignore"] == before + 1

    def test_shape_mismatch_rejected(self):
        logits = torch.randn(1, 3, 4, 4)
        with pytest.raises(ValueError, match="match"):
            supervised_ce(pred_from_logits(logits, True), torch.zeros(1, 5, 5).long())


class TestAlignOverlap:
    def test_identity_alignment(self):
        m = torch.arange(72, dtype=torch.float64).reshape(2, 6, 6)
        rect = (0.0, 0.0, 48.0, 48.0)
        a1, a2, hw = align_overlap(m, m.clone(), rect, rect, stride=8)
        assert hw == (6, 6)
        assert float((a1 - m.reshape(2, -1).T).abs().max()) < 1e-5
        assert float((a1 - a2).abs().max()) < 1e-9

    def test_grid_sized_from_first_rect(self):
        m1 = torch.rand(3, 8, 8, dtype=torch.float64)
        m2 = torch.rand(3, 8, 8, dtype=torch.float64)
        rect1 = (0.0, 0.0, 16.0, 16.0)      # 2x2 feature cells at stride 8
        rect2 = (0.0, 0.0, 32.0, 32.0)      # twice the extent
        _, _, hw = align_overlap(m1, m2, rect1, rect2, stride=8)
        assert hw == (2, 2)

    def test_coordinates_agree_after_alignment(self):
        # feature maps encoding their own pixel-center coordinates: aligned
        # positions must land on the same source spot within half a cell
        def coord_map(hf, wf):
            ys, xs = torch.meshgrid(torch.arange(hf, dtype=torch.float64) + 0.5,
                                    torch.arange(wf, dtype=torch.float64) + 0.5,
                                    indexing="ij")
            return torch.stack([xs, ys])

        stride = 8
        m1, m2 = coord_map(12, 12), coord_map(12, 12)
        # same source region seen at offsets (24, 8) px in crop1 vs (0, 0) in crop2
        rect1 = (24.0, 8.0, 88.0, 72.0)
        rect2 = (0.0, 0.0, 64.0, 64.0)
        a1, a2, hw = align_overlap(m1, m2, rect1, rect2, stride)
        shift = torch.tensor([24.0 / stride, 8.0 / stride], dtype=torch.float64)
        assert float(((a1 - shift) - a2).abs().max()) < 0.5

    def test_too_small_overlap_skipped_and_counted(self):
        before = WARN_COUNTS["overlap_skipped"]
        m = torch.rand(2, 6, 6)
        out = align_overlap(m, m, (0.0, 0.0, 3.0, 3.0), (0.0, 0.0, 3.0, 3.0), stride=8)
        assert out is None
        assert WARN_COUNTS["overlap_skipped"] == before + 1


class TestDirectionalContrastivePair:
    def test_all_below_threshold_is_exactly_zero(self):
        ctx = random_context(0, threshold=2.0)   # nothing can exceed 2.0
        assert float(directional_contrastive_pair(ctx)) == 0.0

    def test_single_positive_identical_projections_no_negatives(self):
        phi = torch.tensor([[1.0, 2.0, 3.0]], dtype=torch.float64)
        ctx = ContrastiveContext(
            proj1=phi, proj2=phi.clone(),
            conf1=torch.tensor([0.9]), conf2=torch.tensor([0.95]),
            labels1=torch.tensor([1]), labels2=torch.tensor([1]),
            threshold=0.75, temperature=0.1)
        assert abs(float(directional_contrastive_pair(ctx))) < 1e-12

    @pytest.mark.parametrize("seed", range(8))
    def test_matches_triple_loop_oracle(self, seed):
        ctx = random_context(seed, n=4, p=5, c=3, n_bank=4)
        ours = float(directional_contrastive_pair(ctx))
        expect = oracle_of(ctx)
        assert abs(ours - expect) <= 1e-5 * max(1.0, abs(expect))

    def test_empty_context_returns_zero(self):
        ctx = ContrastiveContext(
            proj1=torch.zeros(0, 4), proj2=torch.zeros(0, 4),
            conf1=torch.zeros(0), conf2=torch.zeros(0),
            labels1=torch.zeros(0, dtype=torch.long),
            labels2=torch.zeros(0, dtype=torch.long))
        assert float(directional_contrastive_pair(ctx)) == 0.0

    def test_gate_zeroes_term_when_target_less_confident(self):
        ctx = random_context(4, threshold=0.0 + 1e-9)
        ctx.conf1 = torch.full_like(ctx.conf1, 0.9)
        ctx.conf2 = torch.full_like(ctx.conf2, 0.8)   # conf1 > conf2 everywhere
        assert float(directional_contrastive_pair(ctx)) == 0.0

    def test_mean_over_all_pixels_flag(self):
        ctx = random_context(5, n=10)
        loss_pos = directional_contrastive_pair(ctx)
        ctx_all = random_context(5, n=10, mean_over_positives=False)
        loss_all = directional_contrastive_pair(ctx_all)
        pos = int(((ctx.conf1 > ctx.threshold) & (ctx.conf1 < ctx.conf2)).sum())
        assert pos > 0
        assert abs(float(loss_all) - float(loss_pos) * pos / 10) < 1e-10

    def test_cosine_scale_invariance(self):
        ctx = random_context(6)
        base = float(directional_contrastive_pair(ctx))
        ctx.proj1 = ctx.proj1 * 7.3
        ctx.proj2 = ctx.proj2 * 0.02
        if ctx.neg_vectors is not None:
            ctx.neg_vectors = ctx.neg_vectors * 12.0
        scaled = float(directional_contrastive_pair(ctx))
        assert abs(base - scaled) < 1e-6

    def test_stop_gradient_on_target_and_negatives(self):
        ctx = random_context(7)
        ctx.proj1.requires_grad_(True)
        ctx.proj2.requires_grad_(True)
        ctx.neg_vectors.requires_grad_(True)
        loss = directional_contrastive_pair(ctx)
        loss.backward()
        assert ctx.proj1.grad is not None and float(ctx.proj1.grad.abs().sum()) > 0
        assert ctx.proj2.grad is None or float(ctx.proj2.grad.abs().sum()) == 0.0
        assert ctx.neg_vectors.grad is None or float(ctx.neg_vectors.grad.abs().sum()) == 0.0

    def test_full_flow_flag_gives_target_gradient(self):
        ctx = random_context(7, detach_target=False)
        ctx.proj2.requires_grad_(True)
        directional_contrastive_pair(ctx).backward()
        assert ctx.proj2.grad is not None and float(ctx.proj2.grad.abs().sum()) > 0

    def test_per_pixel_sampler_matches_shared_draw(self):
        ctx = random_context(8, n=6, n_bank=5)
        shared = float(directional_contrastive_pair(ctx))
        vecs, labels = ctx.neg_vectors, ctx.neg_labels

        def sampler(label):
            keep = labels != label
            return vecs[keep], labels[keep]

        ctx_pp = random_context(8, n=6, n_bank=0, negative_sampler=sampler)
        assert abs(float(directional_contrastive_pair(ctx_pp)) - shared) < 1e-10


class TestDirectionalContrastive:
    def test_both_directions_gated_off(self):
        c12 = random_context(9, threshold=2.0)
        c21 = random_context(10, threshold=2.0)
        assert float(directional_contrastive(c12, c21)) == 0.0

    def test_symmetric_inputs_tie_gives_zero(self):
        ctx = random_context(11)
        ctx.proj2 = ctx.proj1.clone()
        ctx.conf2 = ctx.conf1.clone()
        ctx.labels2 = ctx.labels1.clone()
        swapped = ContrastiveContext(
            proj1=ctx.proj2, proj2=ctx.proj1, conf1=ctx.conf2, conf2=ctx.conf1,
            labels1=ctx.labels2, labels2=ctx.labels1, neg_vectors=ctx.neg_vectors,
            neg_labels=ctx.neg_labels, threshold=ctx.threshold,
            temperature=ctx.temperature)
        assert float(directional_contrastive(ctx, swapped)) == 0.0

    def test_sum_of_directions(self):
        c12 = random_context(12)
        c21 = random_context(13)
        total = float(directional_contrastive(c12, c21))
        assert abs(total - (oracle_of(c12) + oracle_of(c21))) < 1e-6


class TestCrossConsistency:
    def test_identical_predictions_zero(self):
        logits = torch.randn(1, 4, 3, 3)
        main = pred_from_logits(logits)
        assert float(cross_consistency(main, [pred_from_logits(logits.clone())] * 3)) == 0.0

    def test_disjoint_one_hot_closed_form(self):
        c = 5
        main_logits = torch.full((1, c, 2, 2), -100.0)
        main_logits[:, 0] = 100.0
        aux_logits = torch.full((1, c, 2, 2), -100.0)
        aux_logits[:, 3] = 100.0
        loss = cross_consistency(pred_from_logits(main_logits),
                                 [pred_from_logits(aux_logits)])
        assert abs(float(loss) - 2.0 / c) < 1e-6

    @pytest.mark.parametrize("seed", range(4))
    def test_matches_loop_oracle(self, seed):
        g = torch.Generator().manual_seed(seed)
        main = pred_from_logits(torch.randn(1, 3, 4, 4, generator=g, dtype=torch.float64))
        auxs = [pred_from_logits(torch.randn(1, 3, 4, 4, generator=g, dtype=torch.float64))
                for _ in range(6)]
        ours = float(cross_consistency(main, auxs))
        expect = cross_consistency_oracle(
            main.probs[0].tolist(), [a.probs[0].tolist() for a in auxs])
        assert abs(ours - expect) < 1e-6

    def test_empty_aux_list_rejected(self):
        main = pred_from_logits(torch.randn(1, 3, 2, 2))
        with pytest.raises(ValueError):
            cross_consistency(main, [])

    def test_target_detachment(self):
        main_logits = torch.randn(1, 3, 2, 2, requires_grad=True)
        aux_logits = torch.randn(1, 3, 2, 2, requires_grad=True)
        loss = cross_consistency(pred_from_logits(main_logits),
                                 [pred_from_logits(aux_logits)])
        loss.backward()
        assert main_logits.grad is None or float(main_logits.grad.abs().sum()) == 0.0
        assert float(aux_logits.grad.abs().sum()) > 0

    def test_detach_flag_off_lets_gradient_flow(self):
        main_logits = torch.randn(1, 3, 2, 2, requires_grad=True)
        loss = cross_consistency(pred_from_logits(main_logits),
                                 [pred_from_logits(torch.randn(1, 3, 2, 2))],
                                 detach_target=False)
        loss.backward()
        assert float(main_logits.grad.abs().sum()) > 0


class TestEntropy:
    def test_one_hot_is_zero(self):
        logits = torch.full((1, 4, 3, 3), -200.0)
        logits[:, 2] = 200.0
        assert float(entropy_loss(pred_from_logits(logits))) == 0.0

    def test_uniform_is_log_c(self):
        pred = pred_from_logits(torch.zeros(1, 5, 3, 3, dtype=torch.float64))
        assert abs(float(entropy_loss(pred)) - math.log(5)) < 1e-12

    def test_frozen_two_class_value(self):
        p = torch.tensor([0.75, 0.25], dtype=torch.float64).reshape(1, 2, 1, 1)
        pred = PredictionMap(logits=p.log(), probs=p, upsampled=False)
        assert abs(float(entropy_loss(pred)) - 0.5623351446188083) < 1e-12

    @pytest.mark.parametrize("seed", range(4))
    def test_matches_loop_oracle(self, seed):
        g = torch.Generator().manual_seed(seed)
        pred = pred_from_logits(torch.randn(1, 4, 5, 5, generator=g, dtype=torch.float64))
        expect = entropy_oracle(pred.probs[0].tolist())
        assert abs(float(entropy_loss(pred)) - expect) < 1e-10

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.floats(1.0, 6.0))
    def test_sharpening_never_increases_entropy(self, seed, exponent):
        g = torch.Generator().manual_seed(seed)
        probs = torch.rand(1, 4, 3, 3, generator=g, dtype=torch.float64) + 1e-3
        probs = probs / probs.sum(dim=1, keepdim=True)
        sharp = probs ** exponent
        sharp = sharp / sharp.sum(dim=1, keepdim=True)
        before = float(entropy_loss(PredictionMap(probs.log(), probs, False)))
        after = float(entropy_loss(PredictionMap(sharp.log(), sharp, False)))
        assert after <= before + 1e-9


class TestTotalLoss:
    def test_supervised_only_weights(self):
        weights = LossConfig(w_sup=1.0, w_cont=0.0, w_cross=0.0, w_ent=0.0)
        total, parts = total_loss({"sup": torch.tensor(0.37), "cont": torch.tensor(9.0),
                                   "cross": torch.tensor(9.0), "ent": torch.tensor(9.0)},
                                  weights)
        assert abs(float(total) - 0.37) < 1e-7
        assert parts["l_sup"] == pytest.approx(0.37)

    def test_all_zero_parts(self):
        total, _ = total_loss({}, LossConfig())
        assert float(total) == 0.0

    def test_default_weights_on_unit_parts(self):
        parts = {k: torch.tensor(1.0) for k in ("sup", "cont", "cross", "ent")}
        total, _ = total_loss(parts, LossConfig())
        assert abs(float(total) - 1.12) < 1e-7


class TestGradients:
    def test_contrastive_gradient_matches_finite_differences(self):
        ctx = random_context(21, n=5, p=4, c=3, n_bank=3)
        base = ctx.proj1.clone()

        def fn(x):
            c2 = random_context(21, n=5, p=4, c=3, n_bank=3)
            c2.proj1 = x
            return directional_contrastive_pair(c2)

        x = base.clone().requires_grad_(True)
        fn(x).backward()
        fd = finite_difference_grad(lambda t: fn(t), base.clone(), eps=1e-6)
        assert relative_error(x.grad, fd) < 1e-3

    def test_entropy_gradient(self):
        g = torch.Generator().manual_seed(2)
        base = torch.randn(1, 3, 3, 3, generator=g, dtype=torch.float64)

        def fn(logits):
            return entropy_loss(pred_from_logits(logits))

        x = base.clone().requires_grad_(True)
        fn(x).backward()
        fd = finite_difference_grad(lambda t: fn(t), base.clone(), eps=1e-6)
        assert relative_error(x.grad, fd) < 1e-3
