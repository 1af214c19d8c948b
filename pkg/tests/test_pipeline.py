# tests/test_pipeline.py

import dataclasses
import math
from types import SimpleNamespace

import pytest
import torch
from torch.testing import assert_close

from core.errors import ShapeError
from core.geometry import make_patch_grid, warp_horizontal
from core.models import InferenceConfig, SceneSpec
from core.scoring import epe
from network.stereo_net import with_switches
from pipeline import evaluate_model, infer, run_phase1, run_phase2, ssim, ssim_criterion
from providers.synthetic_provider import generate_scene

CFG = InferenceConfig(patch_h=64, patch_w=64, overlap=32, rru_iters=2)


def pair(h, w, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(3, h, w, generator=g), torch.rand(3, h, w, generator=g)


def base_fields(h, w, seed=1):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(1, h, w, generator=g) * 5, torch.randn(2, h, w, generator=g)


class ConstantDisparityNet:
    """Stands in for the network in phase 1: a fixed disparity at the input scale."""

    def __init__(self, value):
        self.value = value

    def forward_phase1(self, left, right, iters):
        b, _, h, w = left.shape
        return SimpleNamespace(d=torch.full((b, 1, h, w), self.value), o=torch.zeros(b, 2, h, w))


def covering(grid, y, x):
    return [i for i, (r, c) in enumerate(grid.placements)
            if r <= y < r + grid.patch_h and c <= x < c + grid.patch_w]


def seam_pairs(grid):
    """Neighbouring pixels (p, q) covered by different sets of patches."""
    for y in range(grid.image_h):
        for x in range(grid.image_w):
            for q in ((y, x + 1), (y + 1, x)):
                if q[0] < grid.image_h and q[1] < grid.image_w:
                    a, b = covering(grid, y, x), covering(grid, *q)
                    if a != b:
                        yield (y, x), q, a, b


def refined_patches(model, left, right, cfg):
    """Blended two-phase output plus every patch result it was averaged from."""
    phase1 = run_phase1(model, left, right, cfg)
    result = run_phase2(model, left, right, phase1.disparity, phase1.occlusion, cfg)
    warped, _ = warp_horizontal(right, phase1.disparity)
    grid = make_patch_grid(left.shape[1], left.shape[2], cfg.patch_h, cfg.patch_w, cfg.overlap)
    patches = []
    with torch.no_grad():
        for i in range(len(grid)):
            rows, cols = grid.window(i)
            crops = [t[None, :, rows, cols] for t in (left, warped, phase1.disparity, phase1.occlusion)]
            patches.append(model.refine_patch(*crops, iters=cfg.rru_iters).disparity[0, 0])
    return result.disparity.data[0], grid, patches


def patch_value(grid, patches, i, p):
    r, c = grid.placements[i]
    return float(patches[i][p[0] - r, p[1] - c])


def planar_pair(seed=2):
    scene = generate_scene(SceneSpec(seed=seed, image_h=96, image_w=128, n_layers=1, slant_prob=1.0))
    return scene.left.double(), scene.right.double()


SEAM_CFG = InferenceConfig(patch_h=64, patch_w=64, overlap=32, rru_iters=2)


class TestSsim:
    def test_identical_images(self):
        x = torch.rand(3, 20, 20)
        assert ssim(x, x) == pytest.approx(1.0, abs=1e-6)

    def test_noise_lowers_score(self):
        torch.manual_seed(0)
        x = torch.rand(1, 3, 20, 20)
        assert ssim(x, (x + 0.3 * torch.randn_like(x)).clamp(0, 1)) < 0.9

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ssim(torch.rand(3, 8, 8), torch.rand(3, 8, 9))

    def test_criterion_prefers_correct_shift(self):
        torch.manual_seed(1)
        left = torch.rand(1, 3, 32, 32)
        right, _ = warp_horizontal(left, torch.full((1, 1, 32, 32), -2.0))
        score = ssim_criterion(left, right)
        # a level-1 residual of 0.5 is 2 px at full resolution
        assert score(torch.full((1, 1, 8, 8), 0.5)) > score(torch.zeros(1, 1, 8, 8))


class TestPhase1:
    def test_factor_one_is_plain_forward(self, model):
        left, right = pair(64, 96)
        cfg = dataclasses.replace(CFG, downsample_factor=1)
        result = run_phase1(model, left, right, cfg)
        with torch.no_grad():
            out = model.forward_phase1(left[None], right[None], iters=cfg.rru_iters)
        assert torch.equal(result.disparity, out.d[0])
        assert torch.equal(result.occlusion, out.o[0])

    def test_arbitrary_size(self, model):
        left, right = pair(70, 150)
        result = run_phase1(model, left, right, CFG)
        assert result.disparity.shape == (1, 70, 150)
        assert result.occlusion.shape == (2, 70, 150)

    def test_too_small(self, model):
        left, right = pair(40, 40)
        with pytest.raises(ShapeError):
            run_phase1(model, left, right, CFG)

    def test_mismatched_pair(self, model):
        with pytest.raises(ShapeError):
            run_phase1(model, torch.rand(3, 64, 64), torch.rand(3, 64, 96), CFG)

    @pytest.mark.parametrize("factor", [2, 4])
    def test_constant_disparity_comes_back_in_full_resolution_pixels(self, factor):
        left, right = pair(128, 256)
        cfg = dataclasses.replace(CFG, downsample_factor=factor)
        result = run_phase1(ConstantDisparityNet(3.0), left, right, cfg)
        assert_close(result.disparity, torch.full((1, 128, 256), 3.0 * factor))

    def test_units_do_not_depend_on_factor(self):
        left, right = pair(128, 256)
        full = []
        for factor in (2, 4):
            # what a perfect network sees for a 12 px disparity at this scale
            net = ConstantDisparityNet(12.0 / factor)
            cfg = dataclasses.replace(CFG, downsample_factor=factor)
            full.append(run_phase1(net, left, right, cfg).disparity)
        assert_close(full[0], full[1])
        assert_close(full[0], torch.full((1, 128, 256), 12.0))


class TestPhase2:
    def test_zero_residual_keeps_base(self, model):
        variant = with_switches(model, use_nlr=False)
        variant.rru.disp_head.zero_output()
        left, right = pair(64, 96)
        d_base, o_base = base_fields(64, 96)
        result = run_phase2(variant, left, right, d_base, o_base, CFG)
        assert result.patch_count == 2
        assert_close(result.disparity.data, d_base)

    def test_single_patch_matches_refine_patch(self, model):
        left, right = pair(64, 64)
        d_base, o_base = base_fields(64, 64)
        result = run_phase2(model, left, right, d_base, o_base, CFG)
        warped, _ = warp_horizontal(right, d_base)
        with torch.no_grad():
            expected = model.refine_patch(left[None], warped[None], d_base[None], o_base[None],
                                          iters=CFG.rru_iters)
        assert result.patch_count == 1
        assert torch.equal(result.disparity.data, expected.disparity[0])

    def test_order_does_not_matter(self, model):
        left, right = pair(64, 128)
        d_base, o_base = base_fields(64, 128)
        a = run_phase2(model, left, right, d_base, o_base, CFG)
        b = run_phase2(model, left, right, d_base, o_base, CFG, order=[2, 0, 1])
        assert a.patch_count == 3
        assert torch.equal(a.disparity.data, b.disparity.data)
        assert torch.equal(a.occlusion.scores, b.occlusion.scores)

    def test_bad_order(self, model):
        left, right = pair(64, 128)
        d_base, o_base = base_fields(64, 128)
        with pytest.raises(ValueError):
            run_phase2(model, left, right, d_base, o_base, CFG, order=[0, 0, 1])

    def test_thread_workers(self, model):
        left, right = pair(64, 128)
        d_base, o_base = base_fields(64, 128)
        serial = run_phase2(model, left, right, d_base, o_base, CFG)
        threaded = run_phase2(model, left, right, d_base, o_base, dataclasses.replace(CFG, workers=2))
        assert_close(threaded.disparity.data, serial.disparity.data)

    def test_history(self, model):
        left, right = pair(64, 96)
        d_base, o_base = base_fields(64, 96)
        cfg = dataclasses.replace(CFG, keep_history=True, rru_iters=3)
        result = run_phase2(model, left, right, d_base, o_base, cfg)
        assert len(result.iteration_disparities) == 3
        assert all(f.shape == (1, 64, 96) for f in result.iteration_disparities)

    def test_image_smaller_than_patch(self, model):
        left, right = pair(48, 80)
        d_base, o_base = base_fields(48, 80)
        result = run_phase2(model, left, right, d_base, o_base, CFG)
        assert result.disparity.data.shape == (1, 48, 80)
        assert result.occlusion.scores.shape == (2, 48, 80)

    def test_ssim_rule(self, model):
        left, right = pair(64, 128)
        d_base, o_base = base_fields(64, 128)
        cfg = dataclasses.replace(CFG, stop_rule="ssim", rru_iters=4)
        result = run_phase2(model, left, right, d_base, o_base, cfg)
        assert 0 <= result.early_stopped_patches <= result.patch_count
        assert bool(torch.isfinite(result.disparity.data).all())

    def test_base_shape_mismatch(self, model):
        left, right = pair(64, 64)
        d_base, o_base = base_fields(64, 32)
        with pytest.raises(ShapeError):
            run_phase2(model, left, right, d_base, o_base, CFG)


class TestSeams:
    def test_seam_jump_within_constituent_jumps(self, double_model):
        left, right = planar_pair()
        blended, grid, patches = refined_patches(double_model, left, right, SEAM_CFG)
        assert len(grid) == 6
        pairs = list(seam_pairs(grid))
        assert pairs
        for p, q, a, b in pairs:
            jump = abs(float(blended[p]) - float(blended[q]))
            bound = max(abs(patch_value(grid, patches, i, p) - patch_value(grid, patches, j, q))
                        for i in a for j in b)
            assert jump <= bound + 1e-9, (p, q)

    def test_seam_jump_bounded_by_patch_jumps_on_planar_scene(self, double_model):
        variant = with_switches(double_model, use_nlr=False).double()
        variant.rru.disp_head.zero_output()
        left, right = planar_pair()
        blended, grid, patches = refined_patches(variant, left, right, SEAM_CFG)
        within = max(
            max(float((p[:, 1:] - p[:, :-1]).abs().max()), float((p[1:] - p[:-1]).abs().max()))
            for p in patches
        )
        seam = max(abs(float(blended[p]) - float(blended[q])) for p, q, _, _ in seam_pairs(grid))
        assert seam <= within + 1e-6


class TestLargeDisparity:
    def test_disparity_wider_than_patch(self, model):
        # 48 px = 1.5 patch widths
        scene = generate_scene(SceneSpec(seed=4, image_h=64, image_w=128, d_min=30.0, d_max=48.0))
        cfg = InferenceConfig(patch_h=32, patch_w=32, overlap=8, rru_iters=2)
        grid = make_patch_grid(64, 128, 32, 32, 8)
        coverage = torch.zeros(64, 128)
        for i in range(len(grid)):
            rows, cols = grid.window(i)
            coverage[rows, cols] += 1
        assert float(coverage.min()) > 0

        result = infer(model, scene.left, scene.right, cfg)
        assert result.patch_count == len(grid)
        assert result.disparity.data.shape == (1, 64, 128)
        assert bool(torch.isfinite(result.disparity.data).all())
        assert bool(torch.isfinite(result.occlusion.scores).all())
        assert math.isfinite(epe(result.disparity.data, scene.disp_left, ~scene.occlusion_mask[None]))


class TestInfer:
    def test_deterministic_and_keeps_phase1(self, model):
        left, right = pair(64, 128)
        a = infer(model, left, right, CFG)
        b = infer(model, left, right, CFG)
        assert torch.equal(a.disparity.data, b.disparity.data)
        phase1 = run_phase1(model, left, right, CFG)
        assert torch.equal(a.phase1_disparity.data, phase1.disparity)
        assert set(a.timings) == {"phase1_s", "phase2_s", "total_s"}

    def test_evaluate_model(self, model, scenes):
        report = evaluate_model(model, scenes, CFG, label="tiny")
        assert list(report.scenes["scene"]) == sorted(s.scene_id for s in scenes)
        assert report.aggregate["scene"] == "mean"
        assert report.aggregate["epe_all"] >= 0

    def test_evaluate_model_threads(self, model, scenes):
        serial = evaluate_model(model, scenes, CFG)
        threaded = evaluate_model(model, scenes, CFG, workers=2)
        assert_close(torch.tensor(threaded.scenes["epe_all"].to_numpy()),
                     torch.tensor(serial.scenes["epe_all"].to_numpy()))

    def test_evaluate_requires_scenes(self, model):
        with pytest.raises(ValueError):
            evaluate_model(model, [], CFG)
