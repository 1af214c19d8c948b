# tests/test_training.py

import dataclasses
import math

import numpy as np
import pytest
import torch
from torch.testing import assert_close

from core.errors import NumericHealthError, ShapeError
from core.geometry import resize_disparity, resize_occlusion_labels
from core.models import LossWeights, RunConfig, TrainConfig
from network.stereo_net import Phase1Intermediates, StereoNet, with_switches
from services.checkpoint_store import CheckpointStore
from training import (
    augment_sample,
    check_finite,
    collate,
    combine_loss_terms,
    cross_entropy_occ,
    iteration_weights,
    loss_on_batch,
    rescale_sample,
    smooth_l1,
    total_loss,
    train_loop,
)

WEIGHTS = LossWeights()


def tiny_run(tiny_config, **train):
    values = dict(batch_size=1, crop_h=32, crop_w=64, val_every=0, log_every=1,
                  checkpoint_every=0, jitter=0.0)
    values.update(train)
    return RunConfig(model=tiny_config, train=TrainConfig(**values))


def saturated_scores(occ_gt, h, w, logit=50.0):
    labels = resize_occlusion_labels(occ_gt, h, w).to(occ_gt.dtype)
    return torch.stack([1.0 - labels, labels], dim=1) * (2 * logit) - logit


def perfect_intermediates(disp_gt, occ_gt, n):
    """Every output equal to its target, occlusion logits saturated at +-50."""
    h, w = disp_gt.shape[-2:]
    d4 = resize_disparity(disp_gt, h // 16, w // 16)
    base_up = resize_disparity(d4, h // 4, w // 4)
    residual = resize_disparity(disp_gt, h // 4, w // 4) - base_up
    o1 = saturated_scores(occ_gt, h // 4, w // 4)
    return Phase1Intermediates(
        d4=d4,
        occ_init=saturated_scores(occ_gt, h // 16, w // 16),
        d1_history=[residual.clone() for _ in range(n)],
        o1_history=[o1.clone() for _ in range(n)],
        base_up=base_up,
        d1=base_up + residual,
        o1=o1,
        d0=disp_gt.clone(),
        d=disp_gt.clone(),
        o=saturated_scores(occ_gt, h, w),
    )


class TestPerPixelLosses:
    @pytest.mark.parametrize("error,expected", [(0.5, 0.125), (3.0, 2.5), (0.0, 0.0)])
    def test_smooth_l1(self, error, expected):
        pred = torch.full((1, 1, 2, 2), error)
        assert_close(smooth_l1(pred, torch.zeros(1, 1, 2, 2)), torch.tensor(expected))

    def test_smooth_l1_mask(self):
        pred = torch.tensor([[[0.5, 3.0]]])
        mask = torch.tensor([[[True, False]]])
        assert_close(smooth_l1(pred, torch.zeros(1, 1, 2), mask), torch.tensor(0.125))

    def test_smooth_l1_shape_mismatch(self):
        with pytest.raises(ShapeError):
            smooth_l1(torch.zeros(1, 2, 2), torch.zeros(1, 2, 3))

    def test_cross_entropy_uniform(self):
        labels = torch.tensor([[[0, 1], [1, 0]]])
        assert_close(cross_entropy_occ(torch.zeros(1, 2, 2, 2), labels), torch.tensor(math.log(2.0)))

    def test_cross_entropy_confident(self):
        scores = torch.zeros(1, 2, 1, 1)
        scores[:, 1] = 40.0
        assert float(cross_entropy_occ(scores, torch.ones(1, 1, 1, dtype=torch.long))) < 1e-8
        assert_close(cross_entropy_occ(scores, torch.zeros(1, 1, 1, dtype=torch.long)),
                     torch.tensor(40.0), atol=1e-4, rtol=0)

    def test_cross_entropy_one_hot_labels(self):
        scores = torch.randn(2, 3, 3)
        one_hot = torch.stack([torch.ones(3, 3), torch.zeros(3, 3)])
        assert_close(cross_entropy_occ(scores, one_hot),
                     cross_entropy_occ(scores, torch.zeros(3, 3, dtype=torch.long)))

    def test_cross_entropy_shape_mismatch(self):
        with pytest.raises(ShapeError):
            cross_entropy_occ(torch.zeros(1, 2, 2, 2), torch.zeros(1, 3, 3, dtype=torch.long))


class TestCompositeLoss:
    def test_iteration_weights(self):
        assert_close(torch.tensor(iteration_weights(2, 0.8)), torch.tensor([0.64, 0.8]))
        assert iteration_weights(0, 0.8) == []

    def test_all_unit_terms(self):
        one = torch.tensor(1.0)
        total, breakdown = combine_loss_terms(one, one, [one], [one], one, WEIGHTS)
        assert_close(total, torch.tensor(38.4))
        assert_close(breakdown["d1"], torch.tensor(1.6))
        assert_close(breakdown["o1"], torch.tensor(0.8))

    def test_linear_in_weights(self):
        terms = [torch.tensor(0.3), torch.tensor(0.7), [torch.tensor(0.2)] * 3,
                 [torch.tensor(0.5)] * 3, torch.tensor(0.9)]
        base, _ = combine_loss_terms(*terms, WEIGHTS)
        doubled = dataclasses.replace(WEIGHTS, lam_d4=64.0, lam_o=4.0, lam_d1=4.0, lam_o1=2.0, lam_d=4.0)
        scaled, _ = combine_loss_terms(*terms, doubled)
        assert_close(scaled, 2 * base)

    def test_mismatched_iteration_lists(self):
        one = torch.tensor(1.0)
        with pytest.raises(ValueError):
            combine_loss_terms(one, one, [one, one], [one], one, WEIGHTS)

    def test_total_loss(self, model, small_scene):
        model.train()
        batch = collate([small_scene])
        total, breakdown, out = loss_on_batch(model, batch, WEIGHTS)
        assert out.iterations == 2
        assert float(total) >= 0
        assert all(float(v) >= 0 for v in breakdown.values())
        assert_close(total, sum(breakdown.values()))

    def test_iteration_count_mismatch(self, model, small_scene):
        batch = collate([small_scene])
        with torch.no_grad():
            out = model.forward_phase1(batch["left"], batch["right"], iters=2)
            with pytest.raises(ValueError):
                total_loss(out, batch["disp_left"], batch["occlusion"], WEIGHTS, 3)

    def test_no_recurrent_iterations(self, model, small_scene):
        variant = with_switches(model, use_rru=False)
        with torch.no_grad():
            _, breakdown, _ = loss_on_batch(variant, collate([small_scene]), WEIGHTS)
        assert float(breakdown["d1"]) == 0.0 and float(breakdown["o1"]) == 0.0

    def test_perfect_prediction_is_nearly_free(self, small_scene):
        disp_gt = small_scene.disp_left[None]
        occ_gt = small_scene.occlusion[None]
        out = perfect_intermediates(disp_gt, occ_gt, n=3)
        total, breakdown = total_loss(out, disp_gt, occ_gt, WEIGHTS, 3)
        assert float(total) < 1e-6
        assert float(breakdown["d1"]) == 0.0 and float(breakdown["d"]) == 0.0

    def test_check_finite(self):
        check_finite({"d4": torch.tensor(1.0)})
        with pytest.raises(NumericHealthError) as err:
            check_finite({"d4": torch.tensor(1.0), "d": torch.tensor(float("nan"))}, step=7)
        assert err.value.term == "d" and err.value.iteration == 7


class TestAugmentation:
    def test_crop_shapes(self, small_scene):
        cfg = TrainConfig(crop_h=32, crop_w=64)
        out = augment_sample(small_scene, cfg, np.random.default_rng(0))
        assert out.left.shape == (3, 32, 64)
        assert out.occlusion.shape == (2, 32, 64)
        assert out.scene_id == small_scene.scene_id

    def test_full_crop_without_jitter_is_identity(self, small_scene):
        cfg = TrainConfig(crop_h=64, crop_w=128, jitter=0.0, vflip_prob=0.0)
        out = augment_sample(small_scene, cfg, np.random.default_rng(0))
        assert torch.equal(out.left, small_scene.left)
        assert torch.equal(out.disp_left, small_scene.disp_left)

    def test_same_seed_same_crop(self, small_scene):
        cfg = TrainConfig(crop_h=32, crop_w=64)
        a = augment_sample(small_scene, cfg, np.random.default_rng(5))
        b = augment_sample(small_scene, cfg, np.random.default_rng(5))
        assert torch.equal(a.left, b.left) and torch.equal(a.disp_left, b.disp_left)

    def test_crop_larger_than_scene(self, small_scene):
        with pytest.raises(ShapeError):
            augment_sample(small_scene, TrainConfig(crop_h=96, crop_w=128), np.random.default_rng(0))

    def test_rescale_halves_disparity(self, small_scene):
        out = rescale_sample(small_scene, 0.5)
        assert out.left.shape == (3, 32, 64)
        assert float(out.disp_left.max()) <= 0.5 * float(small_scene.disp_left.max()) + 1e-4
        assert float(out.disp_left.min()) >= 0.5 * float(small_scene.disp_left.min()) - 1e-4


class TestTrainLoop:
    def test_zero_steps_saves_initialization(self, tiny_config, small_scene, tmp_path):
        result = train_loop([small_scene], [], tiny_run(tiny_config, steps=0), tmp_path)
        torch.manual_seed(0)
        fresh = StereoNet(tiny_config)
        loaded = CheckpointStore(result.checkpoint).load_model()
        for (name, a), (_, b) in zip(fresh.state_dict().items(), loaded.state_dict().items()):
            assert torch.equal(a, b), name
        assert result.metrics.empty
        assert not (tmp_path / "metrics.csv").exists()

    def test_first_step_is_deterministic(self, tiny_config, small_scene, tmp_path):
        cfg = tiny_run(tiny_config, steps=1)
        a = train_loop([small_scene], [], cfg, tmp_path / "a").model.state_dict()
        b = train_loop([small_scene], [], cfg, tmp_path / "b").model.state_dict()
        for name in a:
            assert torch.equal(a[name], b[name]), name

    def test_metrics_log(self, tiny_config, scenes, tmp_path):
        cfg = tiny_run(tiny_config, steps=2, val_every=2)
        result = train_loop(scenes, scenes[:1], cfg, tmp_path)
        assert list(result.metrics["step"]) == [1, 2]
        assert math.isnan(result.metrics["val_epe"].iloc[0])
        assert np.isfinite(result.metrics["val_epe"].iloc[1])
        lines = (tmp_path / "metrics.csv").read_text().splitlines()
        assert lines[0] == "step,total,d4,o,d1,o1,d,val_epe,wall_s"
        assert len(lines) == 3

    @pytest.mark.parametrize("grad_clip,clipped", [(0.0, False), (0.5, True)])
    def test_clipping_is_opt_in(self, tiny_config, small_scene, tmp_path, monkeypatch, grad_clip, clipped):
        calls = []
        real = torch.nn.utils.clip_grad_norm_

        def record(params, max_norm, *args, **kwargs):
            calls.append(max_norm)
            return real(params, max_norm, *args, **kwargs)

        monkeypatch.setattr(torch.nn.utils, "clip_grad_norm_", record)
        train_loop([small_scene], [], tiny_run(tiny_config, steps=1, grad_clip=grad_clip), tmp_path)
        assert calls == ([grad_clip] if clipped else [])
        assert TrainConfig().grad_clip == 0.0

    def test_requires_scenes(self, tiny_config, tmp_path):
        with pytest.raises(ValueError):
            train_loop([], [], tiny_run(tiny_config, steps=1), tmp_path)

    @pytest.mark.slow
    def test_loss_decreases_on_fixed_batch(self, small_scene):
        torch.manual_seed(0)
        model = StereoNet()
        model.train()
        optimizer = torch.optim.Adam(model.parameters(), lr=1e-4)
        batch = collate([augment_sample(small_scene, TrainConfig(), np.random.default_rng(0))])
        totals = []
        for _ in range(51):
            optimizer.zero_grad()
            total, _, _ = loss_on_batch(model, batch, WEIGHTS)
            totals.append(float(total))
            total.backward()
            optimizer.step()
        assert totals[50] < totals[0]
