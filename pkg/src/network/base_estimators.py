# src/network/base_estimators.py

"""Base disparity (cost volume + soft-argmin) and base occlusion estimators."""

from __future__ import annotations

from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from core.errors import ConfigError, ShapeError
from network.blocks import UNet2

# The base level is 1/16 of the input width, so the hypothesis count is max_disp / 16.
BASE_LEVEL = 3
BASE_LEVEL_DIVISOR = 16


def build_cost_volume(
    f_left: torch.Tensor, f_right: torch.Tensor, num_hypotheses: int
) -> torch.Tensor:
    """
    Concatenation volume B×2C×K×H×W pairing f_left(x) with f_right(x - k).
    Right features that fall outside the image are zero.
    """
    if f_left.shape != f_right.shape:
        raise ShapeError(
            f"left {tuple(f_left.shape)} and right {tuple(f_right.shape)} features differ")
    w = f_left.shape[-1]
    slices = []
    for k in range(num_hypotheses):
        shifted = F.pad(f_right, (k, 0))[..., :w]
        slices.append(torch.cat([f_left, shifted], dim=1))
    return torch.stack(slices, dim=2)


def soft_argmin(cost: torch.Tensor) -> torch.Tensor:
    """d = sum_k k * softmax_k(-cost); cost is B×K×H×W, output B×1×H×W."""
    prob = F.softmax(-cost, dim=1)
    ks = torch.arange(cost.shape[1], dtype=cost.dtype, device=cost.device)
    return (prob * ks.view(1, -1, 1, 1)).sum(dim=1, keepdim=True)


class BaseDisparityEstimator(nn.Module):
    def __init__(self, feature_channels: int, mid_channels: int, depth: int, max_disparity: int):
        super().__init__()
        self.max_disparity = int(max_disparity)
        layers = [nn.Conv3d(2 * feature_channels, mid_channels, 3, padding=1), nn.ReLU()]
        for _ in range(depth):
            layers += [nn.Conv3d(mid_channels, mid_channels, 3, padding=1), nn.ReLU()]
        layers.append(nn.Conv3d(mid_channels, 1, 3, padding=1))
        self.aggregation = nn.Sequential(*layers)

    def cost(self, f_left: torch.Tensor, f_right: torch.Tensor, num_hypotheses: int) -> torch.Tensor:
        volume = build_cost_volume(f_left, f_right, num_hypotheses)
        return self.aggregation(volume).squeeze(1)

    def forward(
        self,
        f_left: torch.Tensor,
        f_right: torch.Tensor,
        max_disparity: Optional[int] = None,
    ) -> torch.Tensor:
        max_disp = self.max_disparity if max_disparity is None else int(max_disparity)
        if max_disp % BASE_LEVEL_DIVISOR or max_disp < BASE_LEVEL_DIVISOR:
            raise ConfigError(
                f"max disparity {max_disp} must be a positive multiple of {BASE_LEVEL_DIVISOR}")
        return soft_argmin(self.cost(f_left, f_right, max_disp // BASE_LEVEL_DIVISOR))


class BaseOcclusionEstimator(nn.Module):
    """Encoder-decoder over [left features, warped right features] -> 2-channel scores."""

    def __init__(self, feature_channels: int, mid_channels: int):
        super().__init__()
        self.net = UNet2(2 * feature_channels, mid_channels, 2)

    def forward(self, f_left: torch.Tensor, f_warped: torch.Tensor) -> torch.Tensor:
        if f_left.shape != f_warped.shape:
            raise ShapeError(
                f"left {tuple(f_left.shape)} and warped {tuple(f_warped.shape)} features differ")
        return self.net(torch.cat([f_left, f_warped], dim=1))
