# src/network/features.py

from __future__ import annotations

from typing import List

import torch
import torch.nn as nn

from core.errors import ShapeError
from network.blocks import ResidualBlock, conv3x3

NUM_LEVELS = 5
DIVISOR = 2 ** NUM_LEVELS

# Levels 0..4 sit at 1/2 .. 1/32 of the input size.
FeaturePyramid = List[torch.Tensor]


class FeatureExtractor(nn.Module):
    """Simplified ResNet: a strided stem then one strided residual block per level."""

    def __init__(self, in_channels: int, channels):
        super().__init__()
        channels = list(channels)
        self.stem = nn.Sequential(
            conv3x3(in_channels, channels[0], stride=2),
            nn.ReLU(),
            ResidualBlock(channels[0], channels[0]),
        )
        self.stages = nn.ModuleList(
            ResidualBlock(channels[i - 1], channels[i], stride=2)
            for i in range(1, NUM_LEVELS)
        )

    def forward(self, image: torch.Tensor) -> FeaturePyramid:
        h, w = image.shape[-2:]
        if h % DIVISOR or w % DIVISOR:
            raise ShapeError(
                f"image size {h}x{w} must be divisible by {DIVISOR}; pad it first")
        x = self.stem(image)
        pyramid = [x]
        for stage in self.stages:
            x = stage(x)
            pyramid.append(x)
        return pyramid
