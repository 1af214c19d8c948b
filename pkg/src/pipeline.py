# src/pipeline.py

"""
Two-phase high-resolution inference.

Phase 1 runs the full network on a downsampled, padded copy of the pair and
brings disparity and occlusion back to full resolution. Phase 2 warps the full
resolution right image by that disparity, cuts both images into overlapping
patches and lets the recurrent updater (plus refinement) correct each patch
from a zero residual. Patch results are averaged back into one map.
"""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass
from typing import List, Optional, Sequence

import torch
import torch.nn.functional as F
from joblib import Parallel, delayed

from core.errors import ShapeError
from core.geometry import (
    blend_patches,
    make_patch_grid,
    pad_to_multiple,
    resize_disparity,
    resize_field,
    unpad,
    warp_horizontal,
)
from core.models import (
    DisparityMap,
    InferenceConfig,
    InferenceResult,
    OcclusionField,
    PatchGrid,
    TrainSample,
)
from core.scoring import MetricReport, SceneMetrics, build_report, score_scene
from network.features import DIVISOR
from network.rru import StopCriterion
from network.stereo_net import PatchRefinement, StereoNet

logger = logging.getLogger(__name__)

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


# -----------------------------------------------------------------------------
# SSIM stopping rule
# -----------------------------------------------------------------------------

def ssim(x: torch.Tensor, y: torch.Tensor, window: int = 7) -> float:
    """Mean SSIM with a uniform `window`×`window` window on unit-range images."""
    if x.shape != y.shape:
        raise ShapeError(f"SSIM inputs differ: {tuple(x.shape)} vs {tuple(y.shape)}")
    xb = x if x.dim() == 4 else x.unsqueeze(0)
    yb = y if y.dim() == 4 else y.unsqueeze(0)

    def pool(t: torch.Tensor) -> torch.Tensor:
        return F.avg_pool2d(t, window, stride=1, padding=window // 2, count_include_pad=False)

    mu_x, mu_y = pool(xb), pool(yb)
    var_x = pool(xb * xb) - mu_x * mu_x
    var_y = pool(yb * yb) - mu_y * mu_y
    cov = pool(xb * yb) - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (var_x + var_y + SSIM_C2)
    return float((num / den).mean())


def ssim_criterion(
    left_patch: torch.Tensor, warped_right_patch: torch.Tensor, window: int = 7
) -> StopCriterion:
    """Score a recurrent-level residual by SSIM of the left patch vs the re-warped right patch."""
    h, w = left_patch.shape[-2:]

    def score(d1: torch.Tensor) -> float:
        rewarped, _ = warp_horizontal(warped_right_patch, resize_disparity(d1, h, w))
        return ssim(left_patch, rewarped, window)

    return score


# -----------------------------------------------------------------------------
# Phase 1
# -----------------------------------------------------------------------------

@dataclass
class Phase1Result:
    disparity: torch.Tensor     # 1×H×W, full-resolution pixels
    occlusion: torch.Tensor     # 2×H×W


def _check_pair(left: torch.Tensor, right: torch.Tensor) -> None:
    if left.dim() != 3 or left.shape != right.shape:
        raise ShapeError(
            f"expected two C×H×W images of equal shape, got {tuple(left.shape)} "
            f"and {tuple(right.shape)}")


@torch.no_grad()
def run_phase1(model: StereoNet, left: torch.Tensor, right: torch.Tensor,
               cfg: InferenceConfig) -> Phase1Result:
    _check_pair(left, right)
    _, h, w = left.shape
    f = cfg.downsample_factor
    sh, sw = int(round(h / f)), int(round(w / f))
    if sh < DIVISOR or sw < DIVISOR:
        raise ShapeError(
            f"image {h}x{w} downsampled by {f} is {sh}x{sw}, smaller than {DIVISOR}x{DIVISOR}")

    small_left, pad = pad_to_multiple(resize_field(left, sh, sw)[None], DIVISOR)
    small_right, _ = pad_to_multiple(resize_field(right, sh, sw)[None], DIVISOR)
    out = model.forward_phase1(small_left, small_right, iters=cfg.rru_iters)

    disp = unpad(out.d, pad)[0]
    occ = unpad(out.o, pad)[0]
    return Phase1Result(
        disparity=resize_disparity(disp, h, w),
        occlusion=resize_field(occ, h, w),
    )


# -----------------------------------------------------------------------------
# Phase 2
# -----------------------------------------------------------------------------

def _pad_to_size(x: torch.Tensor, h: int, w: int) -> torch.Tensor:
    pad_h, pad_w = max(h - x.shape[-2], 0), max(w - x.shape[-1], 0)
    if not (pad_h or pad_w):
        return x
    return F.pad(x[None], (0, pad_w, 0, pad_h), mode="replicate")[0]


def _blend_history(grid: PatchGrid, results: List[PatchRefinement]) -> List[torch.Tensor]:
    steps = max(len(r.history) for r in results)
    blended = []
    for k in range(steps):
        frames = []
        for r in results:
            if k < len(r.history):
                frames.append(r.history[k][0])
            else:
                frames.append((r.history[-1] if r.history else r.disparity)[0])
        blended.append(blend_patches(grid, frames))
    return blended


@torch.no_grad()
def run_phase2(
    model: StereoNet,
    left: torch.Tensor,
    right: torch.Tensor,
    d_base: torch.Tensor,
    o_base: torch.Tensor,
    cfg: InferenceConfig,
    order: Optional[List[int]] = None,
) -> InferenceResult:
    """
    Patch-wise refinement at full resolution. `order` fixes the processing
    order of patches (for reproducibility checks); blending does not depend on it.
    """
    _check_pair(left, right)
    _, h, w = left.shape
    if tuple(d_base.shape[-2:]) != (h, w) or tuple(o_base.shape[-2:]) != (h, w):
        raise ShapeError(
            f"base disparity {tuple(d_base.shape)} / occlusion {tuple(o_base.shape)} "
            f"must match image {h}x{w}")

    warped_right, _ = warp_horizontal(right, d_base)
    ph, pw = cfg.patch_h, cfg.patch_w
    hp, wp = max(h, ph), max(w, pw)
    fields = [_pad_to_size(t, hp, wp) for t in (left, warped_right, d_base, o_base)]
    left_p = fields[0]

    try:
        grid = make_patch_grid(hp, wp, ph, pw, cfg.overlap)
    except ShapeError as e:
        raise ShapeError(f"cannot tile {h}x{w} image with {ph}x{pw} patches: {e}") from e
    logger.info("Phase 2: %d patches of %dx%d over %dx%d", len(grid), ph, pw, h, w)

    def refine(i: int) -> PatchRefinement:
        started = time.perf_counter()
        rows, cols = grid.window(i)
        crops = [t[None, :, rows, cols] for t in fields]
        criterion = None
        if cfg.stop_rule == "ssim":
            criterion = ssim_criterion(crops[0], crops[1], cfg.ssim_window)
        # grad mode is thread-local; worker threads need their own guard
        with torch.no_grad():
            result = model.refine_patch(
                *crops,
                iters=cfg.rru_iters,
                criterion=criterion,
                apply_nlr=cfg.nlr_per_patch,
                keep_history=cfg.keep_history,
            )
        logger.debug("patch %d at %s refined in %.3fs", i, grid.placements[i],
                     time.perf_counter() - started)
        return result

    indices = list(range(len(grid))) if order is None else list(order)
    if sorted(indices) != list(range(len(grid))):
        raise ValueError(f"order must be a permutation of {len(grid)} patch indices")
    if cfg.workers > 1:
        done = Parallel(n_jobs=cfg.workers, prefer="threads")(delayed(refine)(i) for i in indices)
    else:
        done = [refine(i) for i in indices]
    results: List[Optional[PatchRefinement]] = [None] * len(grid)
    for i, r in zip(indices, done):
        results[i] = r

    disparity = blend_patches(grid, [r.disparity[0] for r in results])
    occlusion = blend_patches(grid, [r.occlusion[0] for r in results])
    if not cfg.nlr_per_patch:
        disparity = model.nlr(left_p[None], disparity[None])[0]
    history = _blend_history(grid, results) if cfg.keep_history else []

    early = sum(1 for r in results if r.stopped_early is not None)
    if early:
        logger.warning("SSIM stopped %d of %d patches early", early, len(grid))

    return InferenceResult(
        disparity=DisparityMap(disparity[:, :h, :w].contiguous()),
        occlusion=OcclusionField(occlusion[:, :h, :w].contiguous()),
        phase1_disparity=DisparityMap(d_base.clone()),
        phase1_occlusion=OcclusionField(o_base.clone()),
        patch_count=len(grid),
        iteration_disparities=[frame[:, :h, :w].contiguous() for frame in history],
        early_stopped_patches=early,
    )


def infer(model: StereoNet, left: torch.Tensor, right: torch.Tensor,
          cfg: InferenceConfig) -> InferenceResult:
    model.eval()
    t0 = time.perf_counter()
    phase1 = run_phase1(model, left, right, cfg)
    t1 = time.perf_counter()
    result = run_phase2(model, left, right, phase1.disparity, phase1.occlusion, cfg)
    t2 = time.perf_counter()
    result.timings = {"phase1_s": t1 - t0, "phase2_s": t2 - t1, "total_s": t2 - t0}
    logger.info("Inference done in %.2fs (phase 1 %.2fs, %d patches)",
                t2 - t0, t1 - t0, result.patch_count)
    return result


# -----------------------------------------------------------------------------
# Dataset evaluation
# -----------------------------------------------------------------------------

def evaluate_model(
    model: StereoNet,
    samples: Sequence[TrainSample],
    cfg: InferenceConfig,
    label: str = "",
    workers: int = 1,
    max_disparity: Optional[float] = None,
) -> MetricReport:
    """Two-phase inference on every scene, scored against its ground truth."""
    if not samples:
        raise ValueError("evaluate_model needs at least one scene")
    model.eval()
    # patch workers would nest inside scene workers
    scene_cfg = dataclasses.replace(cfg, workers=1) if workers > 1 else cfg

    def one(sample: TrainSample) -> SceneMetrics:
        result = infer(model, sample.left, sample.right, scene_cfg)
        return score_scene(
            sample.scene_id,
            result.disparity.data,
            sample.disp_left,
            result.occlusion.scores,
            sample.occlusion,
            max_disparity,
        )

    if workers > 1:
        rows = Parallel(n_jobs=workers, prefer="threads")(delayed(one)(s) for s in samples)
    else:
        rows = [one(s) for s in samples]
    report = build_report(rows, label, max_disparity)
    logger.info("%s: mean EPE %.4f (non-occluded %.4f) over %d scenes", label or "model",
                report.aggregate["epe_all"], report.aggregate["epe_nonoccluded"], len(rows))
    return report
