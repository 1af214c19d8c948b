# src/network/blocks.py

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


def conv3x3(in_channels: int, out_channels: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1)


def conv1x1(in_channels: int, out_channels: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(in_channels, out_channels, 1, stride=stride)


class ConvReLU(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        self.conv = conv3x3(in_channels, out_channels, stride)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu(self.conv(x))


class ResidualBlock(nn.Module):
    """Two 3×3 convolutions with an identity (or 1×1 projected) shortcut."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        self.conv1 = conv3x3(in_channels, out_channels, stride)
        self.conv2 = conv3x3(out_channels, out_channels)
        self.shortcut = None
        if stride != 1 or in_channels != out_channels:
            self.shortcut = conv1x1(in_channels, out_channels, stride)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        identity = x if self.shortcut is None else self.shortcut(x)
        out = F.relu(self.conv1(x))
        out = self.conv2(out)
        return F.relu(out + identity)


class ConvGRU(nn.Module):
    """Convolutional GRU cell: update gate z, reset gate r, candidate q."""

    def __init__(self, hidden_channels: int, input_channels: int, kernel_size: int = 3):
        super().__init__()
        pad = kernel_size // 2
        total = hidden_channels + input_channels
        self.convz = nn.Conv2d(total, hidden_channels, kernel_size, padding=pad)
        self.convr = nn.Conv2d(total, hidden_channels, kernel_size, padding=pad)
        self.convq = nn.Conv2d(total, hidden_channels, kernel_size, padding=pad)

    def forward(self, h: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        hx = torch.cat([h, x], dim=1)
        z = torch.sigmoid(self.convz(hx))
        r = torch.sigmoid(self.convr(hx))
        q = torch.tanh(self.convq(torch.cat([r * h, x], dim=1)))
        return (1 - z) * h + z * q


class Head(nn.Module):
    """conv-relu-conv output head."""

    def __init__(self, in_channels: int, mid_channels: int, out_channels: int):
        super().__init__()
        self.conv1 = conv3x3(in_channels, mid_channels)
        self.conv2 = conv3x3(mid_channels, out_channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv2(F.relu(self.conv1(x)))

    def zero_output(self) -> None:
        """Make the head emit exactly zero (identity residual)."""
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)


class UNet2(nn.Module):
    """Two-scale encoder-decoder with a skip connection."""

    def __init__(self, in_channels: int, mid_channels: int, out_channels: int):
        super().__init__()
        self.enc0 = ConvReLU(in_channels, mid_channels)
        self.enc1 = ConvReLU(mid_channels, mid_channels * 2, stride=2)
        self.enc2 = ConvReLU(mid_channels * 2, mid_channels * 2)
        self.dec0 = ConvReLU(mid_channels * 2 + mid_channels, mid_channels)
        self.out = conv3x3(mid_channels, out_channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skip = self.enc0(x)
        deep = self.enc2(self.enc1(skip))
        up = F.interpolate(deep, size=skip.shape[-2:], mode="bilinear", align_corners=True)
        return self.out(self.dec0(torch.cat([up, skip], dim=1)))
