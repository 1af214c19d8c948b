# src/rendering.py

"""Colormapped disparity PNGs and per-iteration snapshot strips."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import matplotlib
import numpy as np
import torch
from PIL import Image

from core.errors import ShapeError

logger = logging.getLogger(__name__)

COLORMAP = "viridis"
STRIP_GAP = 4

PathLike = Union[str, Path]


def value_range(d: torch.Tensor, reference: Optional[torch.Tensor] = None) -> Tuple[float, float]:
    """[min, max] of the reference (ground truth) when given, else of `d`, finite values only."""
    source = reference if reference is not None else d
    finite = source[torch.isfinite(source)]
    if finite.numel() == 0:
        return 0.0, 1.0
    lo, hi = float(finite.min()), float(finite.max())
    if hi <= lo:
        hi = lo + 1.0
    return lo, hi


def colorize(d: torch.Tensor, lo: float, hi: float) -> np.ndarray:
    """H×W (or 1×H×W) disparity -> H×W×3 uint8 over the fixed range [lo, hi]."""
    plane = d.detach().cpu().reshape(d.shape[-2:]).numpy().astype(np.float64)
    normalized = np.clip((plane - lo) / (hi - lo), 0.0, 1.0)
    normalized = np.nan_to_num(normalized, nan=0.0)
    rgba = matplotlib.colormaps[COLORMAP](normalized)
    return (rgba[..., :3] * 255.0).round().astype(np.uint8)


def save_disparity_png(
    d: torch.Tensor,
    path: PathLike,
    reference: Optional[torch.Tensor] = None,
    value_limits: Optional[Tuple[float, float]] = None,
) -> Tuple[float, float]:
    """Write a colormapped disparity PNG. Returns the (lo, hi) range used."""
    lo, hi = value_limits if value_limits is not None else value_range(d, reference)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(colorize(d, lo, hi)).save(path)
    logger.debug("wrote %s (%s over [%.3f, %.3f])", path, COLORMAP, lo, hi)
    return lo, hi


def save_snapshot_strip(
    frames: Sequence[torch.Tensor],
    path: PathLike,
    reference: Optional[torch.Tensor] = None,
) -> Tuple[float, float]:
    """
    Side-by-side strip of disparity frames (one per recurrent iteration), all
    on one shared color range so changes between iterations stay visible.
    """
    if not frames:
        raise ValueError("snapshot strip needs at least one frame")
    sizes = {tuple(f.shape[-2:]) for f in frames}
    if len(sizes) != 1:
        raise ShapeError(f"snapshot frames differ in size: {sorted(sizes)}")

    if reference is None:
        reference = torch.stack([f.reshape(f.shape[-2:]) for f in frames])
    lo, hi = value_range(frames[-1], reference)

    h, w = sizes.pop()
    canvas = np.full((h, len(frames) * (w + STRIP_GAP) - STRIP_GAP, 3), 255, dtype=np.uint8)
    for i, frame in enumerate(frames):
        x0 = i * (w + STRIP_GAP)
        canvas[:, x0:x0 + w] = colorize(frame, lo, hi)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(canvas).save(path)
    logger.info("wrote %d-frame snapshot strip to %s", len(frames), path)
    return lo, hi
