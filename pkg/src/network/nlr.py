# src/network/nlr.py

"""
Normalized local refinement.

The refiner never sees raw disparity values: the input map is standardized per
sample, a local residual is predicted in that normalized space, and the
residual is rescaled by the input's spread before it is added back. This keeps
the refiner's behaviour independent of the disparity range it is applied to.
"""

from __future__ import annotations

from typing import Tuple, Union

import torch
import torch.nn as nn

from core.errors import ShapeError
from core.models import ModelConfig
from network.blocks import ConvReLU, UNet2

Spread = Union[torch.Tensor, float]


def _per_sample(d0: torch.Tensor) -> torch.Tensor:
    if d0.dim() == 4:
        return d0.reshape(d0.shape[0], -1)
    return d0.reshape(1, -1)


def nlr_normalize(
    d0: torch.Tensor, eps: float
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """
    Standardize a disparity map: dbar = (d0 - m) / (s + eps).

    m and s are the mean and population standard deviation over every entry
    of each sample (B×1×H×W) or of the whole tensor otherwise. They come back
    shaped to broadcast against d0.
    """
    if eps <= 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    flat = _per_sample(d0)
    m = flat.mean(dim=1)
    s = flat.std(dim=1, unbiased=False)
    shape = (-1, 1, 1, 1) if d0.dim() == 4 else ()
    m, s = m.reshape(shape), s.reshape(shape)
    return (d0 - m) / (s + eps), m, s


def nlr_denormalize(rbar: torch.Tensor, s: Spread, eps: float) -> torch.Tensor:
    return (s + eps) * rbar


class NormalizedLocalRefinement(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.enabled = bool(cfg.use_nlr)
        self.eps = float(cfg.nlr_epsilon)
        ch = cfg.nlr_channels
        self.features = nn.Sequential(
            ConvReLU(cfg.in_channels, ch),
            ConvReLU(ch, ch),
        )
        # channel 0: normalized residual, channel 1: local weight logit
        self.refiner = UNet2(ch + 1, ch, 2)

    def zero_residual(self) -> None:
        nn.init.zeros_(self.refiner.out.weight)
        nn.init.zeros_(self.refiner.out.bias)

    def forward(self, left_image: torch.Tensor, d0: torch.Tensor) -> torch.Tensor:
        if not self.enabled:
            return d0
        if d0.dim() != 4 or left_image.dim() != 4:
            raise ShapeError(
                f"refinement expects batched inputs, got {tuple(left_image.shape)} "
                f"and {tuple(d0.shape)}")
        if left_image.shape[-2:] != d0.shape[-2:] or left_image.shape[0] != d0.shape[0]:
            raise ShapeError(
                f"left image {tuple(left_image.shape)} and disparity {tuple(d0.shape)} "
                f"resolutions differ")

        dbar, _, s = nlr_normalize(d0, self.eps)
        out = self.refiner(torch.cat([self.features(left_image), dbar], dim=1))
        rbar, weight = out[:, :1], torch.sigmoid(out[:, 1:2])
        return d0 + weight * nlr_denormalize(rbar, s, self.eps)
