# src/training.py

"""
Training utilities.

This file defines:
    - The two per-pixel losses (smooth L1 and 2-class cross-entropy)
    - The composite multi-level loss over one forward pass
    - Sample augmentation (scale, crop, photometric jitter, vertical flip)
    - The optimizer loop with validation, metrics log and checkpoints
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F

from core.errors import NumericHealthError, ShapeError
from core.geometry import (
    occlusion_labels,
    pad_to_multiple,
    resize_disparity,
    resize_field,
    resize_occlusion_labels,
    unpad,
)
from core.models import LossWeights, RunConfig, TrainConfig, TrainSample
from core.scoring import epe
from network.stereo_net import Phase1Intermediates, StereoNet
from services.checkpoint_store import CheckpointStore

logger = logging.getLogger(__name__)

LOSS_TERMS = ("d4", "o", "d1", "o1", "d")
METRIC_COLUMNS = ["step", "total", *LOSS_TERMS, "val_epe", "wall_s"]

SMOOTH_L1_BETA = 1.0

Batch = Dict[str, torch.Tensor]


# -----------------------------------------------------------------------------
# Per-pixel losses
# -----------------------------------------------------------------------------

def smooth_l1(
    pred: torch.Tensor, target: torch.Tensor, mask: Optional[torch.Tensor] = None
) -> torch.Tensor:
    """0.5·e² for |e| < 1, |e| - 0.5 otherwise; mean over `mask` or all pixels."""
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    per_pixel = F.smooth_l1_loss(pred, target, reduction="none", beta=SMOOTH_L1_BETA)
    if mask is None:
        return per_pixel.mean()
    keep = mask.to(torch.bool).expand_as(per_pixel)
    return per_pixel[keep].mean()


def cross_entropy_occ(scores: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """
    Mean 2-class softmax cross-entropy.

    `scores` is 2×H×W or B×2×H×W. `labels` is either an integer map (1 =
    occluded) or one-hot scores shaped like `scores`.
    """
    batched = scores if scores.dim() == 4 else scores.unsqueeze(0)
    if labels.dim() == scores.dim() and labels.shape == scores.shape:
        labels = occlusion_labels(labels)
    target = labels if labels.dim() == 3 else labels.unsqueeze(0)
    if target.shape[0] != batched.shape[0] or target.shape[-2:] != batched.shape[-2:]:
        raise ShapeError(
            f"occlusion scores {tuple(scores.shape)} and labels {tuple(labels.shape)} differ")
    return F.cross_entropy(batched, target.long())


# -----------------------------------------------------------------------------
# Composite loss
# -----------------------------------------------------------------------------

def iteration_weights(n: int, gamma: float) -> List[float]:
    """gamma**(n - i + 1) for i = 1..n; the last iteration gets gamma."""
    return [gamma ** (n - i + 1) for i in range(1, n + 1)]


def combine_loss_terms(
    sl_d4: torch.Tensor,
    ce_o: torch.Tensor,
    sl_d1: Sequence[torch.Tensor],
    ce_o1: Sequence[torch.Tensor],
    sl_d: torch.Tensor,
    weights: LossWeights,
) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    """Weighted sum of the five groups. Returns (total, weighted group breakdown)."""
    if len(sl_d1) != len(ce_o1):
        raise ValueError(
            f"{len(sl_d1)} disparity and {len(ce_o1)} occlusion iteration terms")
    n = len(sl_d1)
    zero = torch.zeros((), dtype=torch.as_tensor(sl_d).dtype)
    d1_sum = sum((w * t for w, t in zip(iteration_weights(n, weights.gamma_d), sl_d1)), zero)
    o1_sum = sum((w * t for w, t in zip(iteration_weights(n, weights.gamma_o), ce_o1)), zero)

    breakdown = {
        "d4": weights.lam_d4 * sl_d4,
        "o": weights.lam_o * ce_o,
        "d1": weights.lam_d1 * d1_sum,
        "o1": weights.lam_o1 * o1_sum,
        "d": weights.lam_d * sl_d,
    }
    total = breakdown["d4"] + breakdown["o"] + breakdown["d1"] + breakdown["o1"] + breakdown["d"]
    return total, breakdown


def total_loss(
    out: Phase1Intermediates,
    disp_gt: torch.Tensor,
    occ_gt: torch.Tensor,
    weights: LossWeights,
    n: int,
) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    """
    Loss over one forward pass against full-resolution ground truth.

    `disp_gt` is B×1×H×W, `occ_gt` B×2×H×W one-hot. Recurrent-level disparity
    targets are residuals against the (frozen) base disparity at that level.
    """
    if out.iterations != n:
        raise ValueError(f"expected {n} recurrent iterations, intermediates hold {out.iterations}")

    h4, w4 = out.d4.shape[-2:]
    h1, w1 = out.base_up.shape[-2:]
    d4_target = resize_disparity(disp_gt, h4, w4)
    o4_target = resize_occlusion_labels(occ_gt, h4, w4)
    residual_target = resize_disparity(disp_gt, h1, w1) - out.base_up
    o1_target = resize_occlusion_labels(occ_gt, h1, w1)

    return combine_loss_terms(
        smooth_l1(out.d4, d4_target),
        cross_entropy_occ(out.occ_init, o4_target),
        [smooth_l1(d1, residual_target) for d1 in out.d1_history],
        [cross_entropy_occ(o1, o1_target) for o1 in out.o1_history],
        smooth_l1(out.d, disp_gt),
        weights,
    )


def check_finite(breakdown: Dict[str, torch.Tensor], step: Optional[int] = None) -> None:
    for name, value in breakdown.items():
        if not bool(torch.isfinite(value).all()):
            raise NumericHealthError("non-finite loss", iteration=step, term=name)


# -----------------------------------------------------------------------------
# Augmentation
# -----------------------------------------------------------------------------

def _one_hot(labels: torch.Tensor) -> torch.Tensor:
    occ = labels.to(torch.float32)
    return torch.stack([1.0 - occ, occ], dim=0)


def _photometric(image: torch.Tensor, jitter: float, rng: np.random.Generator) -> torch.Tensor:
    if jitter <= 0:
        return image
    brightness, contrast, gamma = rng.uniform(1.0 - jitter, 1.0 + jitter, size=3)
    mean = image.mean()
    out = ((image - mean) * float(contrast) + mean) * float(brightness)
    return out.clamp(0.0, 1.0) ** float(gamma)


def rescale_sample(sample: TrainSample, factor: float) -> TrainSample:
    _, h, w = sample.left.shape
    nh, nw = max(1, int(round(h * factor))), max(1, int(round(w * factor)))
    if (nh, nw) == (h, w):
        return sample
    return TrainSample(
        left=resize_field(sample.left, nh, nw).clamp(0.0, 1.0),
        right=resize_field(sample.right, nh, nw).clamp(0.0, 1.0),
        disp_left=resize_disparity(sample.disp_left, nh, nw),
        disp_right=resize_disparity(sample.disp_right, nh, nw),
        occlusion=_one_hot(resize_occlusion_labels(sample.occlusion, nh, nw)),
        scene_id=sample.scene_id,
    )


def augment_sample(sample: TrainSample, cfg: TrainConfig, rng: np.random.Generator) -> TrainSample:
    """Random scale, random crop, per-view photometric jitter, vertical flip."""
    lo, hi = cfg.scale_range
    if hi != 1.0 or lo != 1.0:
        _, h, w = sample.left.shape
        smallest = max(cfg.crop_h / h, cfg.crop_w / w)
        sample = rescale_sample(sample, max(float(rng.uniform(lo, hi)), smallest))

    _, h, w = sample.left.shape
    if h < cfg.crop_h or w < cfg.crop_w:
        raise ShapeError(f"scene {sample.scene_id} is {h}x{w}, smaller than crop {cfg.crop_h}x{cfg.crop_w}")
    r0 = int(rng.integers(0, h - cfg.crop_h + 1))
    c0 = int(rng.integers(0, w - cfg.crop_w + 1))
    rows, cols = slice(r0, r0 + cfg.crop_h), slice(c0, c0 + cfg.crop_w)

    left = _photometric(sample.left[:, rows, cols], cfg.jitter, rng)
    right = _photometric(sample.right[:, rows, cols], cfg.jitter, rng)
    tensors = [left, right, sample.disp_left[:, rows, cols],
               sample.disp_right[:, rows, cols], sample.occlusion[:, rows, cols]]
    if rng.random() < cfg.vflip_prob:
        tensors = [t.flip(-2) for t in tensors]
    return TrainSample(*[t.contiguous() for t in tensors], scene_id=sample.scene_id)


def collate(samples: Sequence[TrainSample]) -> Batch:
    return {
        "left": torch.stack([s.left for s in samples]),
        "right": torch.stack([s.right for s in samples]),
        "disp_left": torch.stack([s.disp_left for s in samples]),
        "occlusion": torch.stack([s.occlusion for s in samples]),
    }


def loss_on_batch(
    model: StereoNet, batch: Batch, weights: LossWeights, iters: Optional[int] = None
) -> Tuple[torch.Tensor, Dict[str, torch.Tensor], Phase1Intermediates]:
    n = model.iteration_count(iters)
    out = model.forward_phase1(batch["left"], batch["right"], iters=n)
    total, breakdown = total_loss(out, batch["disp_left"], batch["occlusion"], weights, n)
    return total, breakdown, out


# -----------------------------------------------------------------------------
# Training loop
# -----------------------------------------------------------------------------

@torch.no_grad()
def validation_epe(model: StereoNet, samples: Sequence[TrainSample]) -> float:
    """Mean non-occluded EPE of the first phase on full validation scenes."""
    if not samples:
        return float("nan")
    was_training = model.training
    model.eval()
    errors = []
    for s in samples:
        left, pad = pad_to_multiple(s.left[None])
        right, _ = pad_to_multiple(s.right[None])
        out = model.forward_phase1(left, right)
        errors.append(epe(unpad(out.d, pad)[0], s.disp_left, ~s.occlusion_mask[None]))
    model.train(was_training)
    return float(np.nanmean(errors))


@dataclass
class TrainResult:
    model: StereoNet
    checkpoint: Path
    metrics: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=METRIC_COLUMNS))


def seed_everything(seed: int) -> np.random.Generator:
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


def _append_metrics(row: Dict[str, float], path: Path) -> None:
    pd.DataFrame([row], columns=METRIC_COLUMNS).to_csv(
        path, mode="a", header=not path.exists(), index=False, float_format="%.6f")


def train_loop(
    train_samples: Sequence[TrainSample],
    val_samples: Sequence[TrainSample],
    cfg: RunConfig,
    out_dir: Union[str, Path],
    model: Optional[StereoNet] = None,
) -> TrainResult:
    """
    Adam over random augmented crops. Writes `metrics.csv` (append-only) and
    `model.ckpt` under `out_dir`. Zero steps saves the initialization.
    """
    tcfg = cfg.train
    if not train_samples:
        raise ValueError("train_loop needs at least one training scene")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.csv"
    store = CheckpointStore(out_dir / "model.ckpt")

    rng = seed_everything(tcfg.seed)
    if model is None:
        model = StereoNet(cfg.model)
    model.train()
    optimizer = torch.optim.Adam(model.parameters(), lr=tcfg.lr)

    rows: List[Dict[str, float]] = []
    started = time.perf_counter()
    logger.info("Training for %d steps on %d scenes (batch %d, crop %dx%d)",
                tcfg.steps, len(train_samples), tcfg.batch_size, tcfg.crop_h, tcfg.crop_w)

    for step in range(1, tcfg.steps + 1):
        picks = rng.integers(0, len(train_samples), size=tcfg.batch_size)
        batch = collate([augment_sample(train_samples[int(i)], tcfg, rng) for i in picks])

        optimizer.zero_grad()
        total, breakdown, _ = loss_on_batch(model, batch, cfg.loss)
        check_finite(breakdown, step)
        total.backward()
        if tcfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), tcfg.grad_clip)
        optimizer.step()

        validate = tcfg.val_every > 0 and step % tcfg.val_every == 0
        if validate or step % max(tcfg.log_every, 1) == 0 or step == tcfg.steps:
            row = {"step": step, "total": float(total.detach())}
            row.update({k: float(v.detach()) for k, v in breakdown.items()})
            row["val_epe"] = validation_epe(model, val_samples) if validate else math.nan
            row["wall_s"] = time.perf_counter() - started
            rows.append(row)
            _append_metrics(row, metrics_path)
            logger.info("step %d: loss %.4f (d4 %.4f, d %.4f) val_epe %.4f",
                        step, row["total"], row["d4"], row["d"], row["val_epe"])

        if tcfg.checkpoint_every > 0 and step % tcfg.checkpoint_every == 0:
            store.save(model, {"step": step})

    store.save(model, {"step": tcfg.steps})
    return TrainResult(model=model, checkpoint=store.path,
                       metrics=pd.DataFrame(rows, columns=METRIC_COLUMNS))
