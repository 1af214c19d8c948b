# src/core/geometry.py

"""
Geometric primitives shared by the network, the data generator and the
two-phase pipeline.

Tensors are B×C×H×W; C×H×W inputs are accepted and returned unbatched.
Disparity convention: left image is the reference, a positive disparity d
at (y, x) means the matching right-image pixel is at (y, x - d).
"""

from __future__ import annotations

from typing import List, Sequence, Tuple

import torch
import torch.nn.functional as F

from core.errors import NumericHealthError, ShapeError
from core.models import PatchGrid

DEFAULT_OCCLUSION_TAU = 1.0


def _as_batch(x: torch.Tensor, name: str) -> Tuple[torch.Tensor, bool]:
    if x.dim() == 3:
        return x.unsqueeze(0), True
    if x.dim() == 4:
        return x, False
    raise ShapeError(f"{name} must be C×H×W or B×C×H×W, got {tuple(x.shape)}")


def _check_size(new_h: int, new_w: int) -> None:
    if int(new_h) < 1 or int(new_w) < 1:
        raise ShapeError(f"target size must be positive, got {new_h}x{new_w}")


# -----------------------------------------------------------------------------
# Warping and resampling
# -----------------------------------------------------------------------------

def warp_horizontal(
    source: torch.Tensor, disparity: torch.Tensor
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Backward-warp `source` along rows: warped(c, y, x) = source(c, y, x - d(y, x)).

    Linear interpolation between the two neighbouring columns. A sample whose
    footprint leaves [0, W-1] yields 0 and valid = 0.

    Returns (warped, valid) where valid is a {0,1} float mask shaped like the
    disparity.
    """
    src, squeeze = _as_batch(source, "source")
    disp, _ = _as_batch(disparity, "disparity")

    if disp.shape[1] != 1:
        raise ShapeError(
            f"disparity must have one channel, got {disp.shape[1]}")
    if src.shape[0] != disp.shape[0] or src.shape[-2:] != disp.shape[-2:]:
        raise ShapeError(
            f"source {tuple(src.shape)} and disparity {tuple(disp.shape)} "
            f"must share batch and H×W")
    if not bool(torch.isfinite(disp).all()):
        raise NumericHealthError("non-finite disparity passed to warp_horizontal")

    b, c, h, w = src.shape
    xs = torch.arange(w, dtype=disp.dtype, device=disp.device).view(1, 1, 1, w)
    pos = xs - disp

    valid = (pos >= 0) & (pos <= w - 1)
    x0 = torch.floor(pos).detach()
    frac = pos - x0

    idx0 = x0.long().clamp(0, w - 1).expand(b, c, h, w)
    idx1 = (x0.long() + 1).clamp(0, w - 1).expand(b, c, h, w)
    v0 = src.gather(3, idx0)
    v1 = src.gather(3, idx1)

    valid_f = valid.to(src.dtype)
    warped = ((1.0 - frac) * v0 + frac * v1) * valid_f

    if squeeze:
        return warped[0], valid_f[0]
    return warped, valid_f


def resize_field(x: torch.Tensor, new_h: int, new_w: int) -> torch.Tensor:
    """Bilinear (align-corners) resampling without value scaling."""
    _check_size(new_h, new_w)
    xb, squeeze = _as_batch(x, "field")
    if tuple(xb.shape[-2:]) == (int(new_h), int(new_w)):
        out = xb.clone()
    else:
        out = F.interpolate(
            xb, size=(int(new_h), int(new_w)), mode="bilinear", align_corners=True)
    return out[0] if squeeze else out


def resize_disparity(d: torch.Tensor, new_h: int, new_w: int) -> torch.Tensor:
    """Resample a disparity field and rescale its values by new_w / W."""
    _check_size(new_h, new_w)
    width = d.shape[-1]
    out = resize_field(d, new_h, new_w)
    if int(new_w) == width:
        return out
    return out * (float(new_w) / float(width))


# -----------------------------------------------------------------------------
# Occlusion
# -----------------------------------------------------------------------------

def occlusion_from_disparities(
    disp_left: torch.Tensor,
    disp_right: torch.Tensor,
    tau: float = DEFAULT_OCCLUSION_TAU,
) -> torch.Tensor:
    """
    Left-right consistency labels as one-hot 2-channel scores.

    A left pixel is occluded when x - dL leaves the image or when the right
    disparity sampled there disagrees with dL by more than `tau`.
    """
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    if disp_left.shape != disp_right.shape:
        raise ShapeError(
            f"left {tuple(disp_left.shape)} and right {tuple(disp_right.shape)} "
            f"disparities differ in shape")

    sampled, valid = warp_horizontal(disp_right, disp_left)
    occluded = (valid < 0.5) | ((disp_left - sampled).abs() > tau)
    occ = occluded.to(disp_left.dtype)
    channel_dim = 0 if disp_left.dim() == 3 else 1
    return torch.cat([1.0 - occ, occ], dim=channel_dim)


def occlusion_labels(scores: torch.Tensor) -> torch.Tensor:
    """Per-pixel argmax over the two channels; ties go to non-occluded (0)."""
    channel_dim = 0 if scores.dim() == 3 else 1
    zero, one = scores.unbind(channel_dim)
    return (one > zero).long()


def resize_occlusion_labels(scores: torch.Tensor, new_h: int, new_w: int) -> torch.Tensor:
    return occlusion_labels(resize_field(scores, new_h, new_w))


# -----------------------------------------------------------------------------
# Padding
# -----------------------------------------------------------------------------

def pad_to_multiple(
    x: torch.Tensor, multiple: int = 32, mode: str = "reflect"
) -> Tuple[torch.Tensor, Tuple[int, int]]:
    """Pad bottom/right so H and W are divisible by `multiple`."""
    xb, squeeze = _as_batch(x, "field")
    h, w = xb.shape[-2:]
    pad_h = (-h) % multiple
    pad_w = (-w) % multiple
    if pad_h or pad_w:
        use = mode
        if mode == "reflect" and (pad_h >= h or pad_w >= w):
            use = "replicate"
        xb = F.pad(xb, (0, pad_w, 0, pad_h), mode=use)
    return (xb[0] if squeeze else xb), (pad_h, pad_w)


def unpad(x: torch.Tensor, pad: Tuple[int, int]) -> torch.Tensor:
    pad_h, pad_w = pad
    h, w = x.shape[-2:]
    return x[..., : h - pad_h, : w - pad_w]


# -----------------------------------------------------------------------------
# Patch tiling
# -----------------------------------------------------------------------------

def _axis_anchors(size: int, patch: int, overlap: int) -> List[int]:
    stride = patch - overlap
    anchors = list(range(0, size - patch + 1, stride))
    last = size - patch
    if anchors[-1] != last:
        anchors.append(last)
    return sorted(set(anchors))


def make_patch_grid(
    image_h: int, image_w: int, patch_h: int, patch_w: int, overlap: int
) -> PatchGrid:
    """Row-major patch anchors with stride patch - overlap; last anchor clamped."""
    if patch_h > image_h or patch_w > image_w:
        raise ShapeError(
            f"patch {patch_h}x{patch_w} larger than image {image_h}x{image_w}")
    if patch_h < 1 or patch_w < 1:
        raise ShapeError(f"patch size must be positive, got {patch_h}x{patch_w}")
    if not 0 <= overlap < min(patch_h, patch_w):
        raise ShapeError(
            f"overlap {overlap} must be in [0, {min(patch_h, patch_w)})")

    rows = _axis_anchors(image_h, patch_h, overlap)
    cols = _axis_anchors(image_w, patch_w, overlap)
    placements = tuple((r, c) for r in rows for c in cols)
    return PatchGrid(
        image_h=image_h,
        image_w=image_w,
        patch_h=patch_h,
        patch_w=patch_w,
        overlap=overlap,
        placements=placements,
    )


def blend_patches(grid: PatchGrid, patch_results: Sequence[torch.Tensor]) -> torch.Tensor:
    """
    Average overlapping patch results into one full-size field.

    Results are accumulated in anchor order regardless of list order, so the
    output does not depend on the order patches were processed in.
    """
    if len(patch_results) != len(grid):
        raise ShapeError(
            f"expected {len(grid)} patch results, got {len(patch_results)}")
    if not patch_results:
        raise ShapeError("no patch results to blend")

    lead = tuple(patch_results[0].shape[:-2])
    for i, result in enumerate(patch_results):
        if tuple(result.shape) != lead + (grid.patch_h, grid.patch_w):
            raise ShapeError(
                f"patch {i} has shape {tuple(result.shape)}, expected "
                f"{lead + (grid.patch_h, grid.patch_w)}")

    ref = patch_results[0]
    total = torch.zeros(lead + (grid.image_h, grid.image_w),
                        dtype=ref.dtype, device=ref.device)
    count = torch.zeros((grid.image_h, grid.image_w),
                        dtype=ref.dtype, device=ref.device)

    order = sorted(range(len(grid)), key=lambda i: grid.placements[i])
    for i in order:
        rows, cols = grid.window(i)
        total[..., rows, cols] += patch_results[i]
        count[rows, cols] += 1.0

    return total / count
