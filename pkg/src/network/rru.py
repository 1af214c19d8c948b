# src/network/rru.py

"""
Recurrent residual updater.

Starts from an all-zero residual disparity and the resized initial occlusion,
then repeatedly re-warps the right features by the current residual, measures
local horizontal correlation and lets a convolutional GRU emit a disparity
residual and an occlusion residual.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from core.errors import NumericHealthError, ShapeError
from core.geometry import resize_disparity, resize_field, warp_horizontal
from core.models import ModelConfig
from network.blocks import ConvGRU, ConvReLU, Head, conv3x3
from network.features import NUM_LEVELS

logger = logging.getLogger(__name__)

# Scores a level-1 disparity; larger is better. Used for early stopping.
StopCriterion = Callable[[torch.Tensor], float]


@dataclass(frozen=True)
class RRUState:
    hidden: torch.Tensor
    context: torch.Tensor


@dataclass(frozen=True)
class ResidualPair:
    r_disp: torch.Tensor
    r_occ: torch.Tensor


@dataclass
class RRUOutcome:
    d1: torch.Tensor
    o1: torch.Tensor
    state: RRUState
    d1_history: List[torch.Tensor] = field(default_factory=list)
    o1_history: List[torch.Tensor] = field(default_factory=list)
    stopped_early: Optional[int] = None

    @property
    def iterations(self) -> int:
        return len(self.d1_history)


# -----------------------------------------------------------------------------
# Update rules
# -----------------------------------------------------------------------------

def apply_occlusion_residual(o1: torch.Tensor, r_occ: torch.Tensor) -> torch.Tensor:
    """Channel 0 loses r_occ, channel 1 gains r_occ; the channel sum is unchanged."""
    channel_dim = 0 if o1.dim() == 3 else 1
    return o1 + torch.cat([-r_occ, r_occ], dim=channel_dim)


def apply_disparity_residual(d1: torch.Tensor, r_disp: torch.Tensor) -> torch.Tensor:
    return d1 + r_disp


def horizontal_correlation(
    f_left: torch.Tensor, f_warped: torch.Tensor, radius: int
) -> torch.Tensor:
    """
    Channel-mean dot product of f_left(x) with f_warped(x - k) for k in [-radius, radius].

    Returns B×(2·radius+1)×H×W; samples beyond the border are zero.
    """
    if f_left.shape != f_warped.shape:
        raise ShapeError(
            f"left {tuple(f_left.shape)} and warped {tuple(f_warped.shape)} features differ")
    w = f_left.shape[-1]
    padded = F.pad(f_warped, (radius, radius))
    planes = []
    for k in range(-radius, radius + 1):
        start = radius - k
        shifted = padded[..., start:start + w]
        planes.append((f_left * shifted).mean(dim=1, keepdim=True))
    return torch.cat(planes, dim=1)


# -----------------------------------------------------------------------------
# Module
# -----------------------------------------------------------------------------

class RecurrentResidualUpdater(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.level = int(cfg.rru_level)
        self.corr_levels = tuple(int(lvl) for lvl in cfg.corr_levels)
        self.radius = int(cfg.corr_radius)
        self.use_occlusion_path = bool(cfg.use_occlusion_path)

        feat = cfg.feature_channels[self.level]
        self.hidden_proj = conv3x3(feat, cfg.hidden_channels)
        self.context_proj = conv3x3(feat, cfg.context_channels)

        corr_planes = len(self.corr_levels) * (2 * self.radius + 1)
        half = max(cfg.motion_channels // 2, 1)
        self.corr_encoder = ConvReLU(corr_planes, cfg.motion_channels)
        # residual disparity + bounded occlusion (3 planes)
        self.state_encoder = ConvReLU(3, half)
        self.motion_encoder = ConvReLU(cfg.motion_channels + half, cfg.motion_channels)

        # motion features + raw residual disparity, then context
        self.gru = ConvGRU(cfg.hidden_channels, cfg.motion_channels + 1 + cfg.context_channels)
        self.disp_head = Head(cfg.hidden_channels, cfg.hidden_channels, 1)
        self.occ_head = Head(cfg.hidden_channels, cfg.hidden_channels, 1)

    # ------------------------------------------------------------------

    def init(
        self,
        pyr_left: Sequence[torch.Tensor],
        pyr_right_warped: Sequence[torch.Tensor],
        occ_init: torch.Tensor,
    ):
        """Zero residual disparity, occlusion resized to the recurrent level."""
        if len(pyr_left) != NUM_LEVELS or len(pyr_right_warped) != NUM_LEVELS:
            raise ShapeError(
                f"expected {NUM_LEVELS}-level pyramids, got {len(pyr_left)} and "
                f"{len(pyr_right_warped)}")
        feat = pyr_left[self.level]
        b, _, h, w = feat.shape
        state = RRUState(
            hidden=torch.tanh(self.hidden_proj(feat)),
            context=F.relu(self.context_proj(feat)),
        )
        d1 = torch.zeros((b, 1, h, w), dtype=feat.dtype, device=feat.device)
        o1 = resize_field(occ_init, h, w)
        return state, d1, o1

    def correlate(
        self,
        pyr_left: Sequence[torch.Tensor],
        pyr_right_warped: Sequence[torch.Tensor],
        d1: torch.Tensor,
    ) -> torch.Tensor:
        h1, w1 = d1.shape[-2:]
        volumes = []
        for lvl in self.corr_levels:
            f_left = pyr_left[lvl]
            h, w = f_left.shape[-2:]
            d_lvl = resize_disparity(d1, h, w)
            f_warped, _ = warp_horizontal(pyr_right_warped[lvl], d_lvl)
            corr = horizontal_correlation(f_left, f_warped, self.radius)
            volumes.append(resize_field(corr, h1, w1))
        return torch.cat(volumes, dim=1)

    def step(
        self,
        state: RRUState,
        pyr_left: Sequence[torch.Tensor],
        pyr_right_warped: Sequence[torch.Tensor],
        d1: torch.Tensor,
        o1: torch.Tensor,
        iteration: int = 0,
    ):
        corr = self.correlate(pyr_left, pyr_right_warped, d1)
        if self.use_occlusion_path:
            s_o = F.softmax(o1, dim=1)
        else:
            s_o = torch.zeros_like(o1)

        motion = self.corr_encoder(corr)
        encoded = self.state_encoder(torch.cat([d1, s_o], dim=1))
        motion = self.motion_encoder(torch.cat([motion, encoded], dim=1))
        motion = torch.cat([motion, d1], dim=1)

        hidden = self.gru(state.hidden, torch.cat([motion, state.context], dim=1))
        r_disp = self.disp_head(hidden)
        r_occ = torch.sigmoid(self.occ_head(hidden))

        d1_next = apply_disparity_residual(d1, r_disp)
        o1_next = apply_occlusion_residual(o1, r_occ) if self.use_occlusion_path else o1

        for term, tensor in (("hidden", hidden), ("disparity", d1_next), ("occlusion", o1_next)):
            if not bool(torch.isfinite(tensor).all()):
                raise NumericHealthError(
                    "non-finite values in recurrent update", iteration=iteration, term=term)

        if logger.isEnabledFor(logging.DEBUG):
            logger.debug(
                "rru step %d: mean |r_disp| %.4f, mean r_occ %.4f",
                iteration, float(r_disp.abs().mean()), float(r_occ.mean()))

        return RRUState(hidden, state.context), d1_next, o1_next, ResidualPair(r_disp, r_occ)

    def run(
        self,
        state: RRUState,
        pyr_left: Sequence[torch.Tensor],
        pyr_right_warped: Sequence[torch.Tensor],
        d1: torch.Tensor,
        o1: torch.Tensor,
        n: int,
        criterion: Optional[StopCriterion] = None,
    ) -> RRUOutcome:
        """
        Apply `step` n times. With a criterion, stop as soon as its score drops
        and keep the previous iterate; the rejected step stays in the history.
        n = 0 returns the inputs unchanged.
        """
        if n < 0:
            raise ValueError(f"iteration count must be >= 0, got {n}")
        outcome = RRUOutcome(d1=d1, o1=o1, state=state)
        previous = criterion(d1) if criterion is not None else None

        for i in range(n):
            state_next, d1_next, o1_next, _ = self.step(
                outcome.state, pyr_left, pyr_right_warped, outcome.d1, outcome.o1, iteration=i)
            outcome.d1_history.append(d1_next)
            outcome.o1_history.append(o1_next)

            if criterion is not None:
                score = criterion(d1_next)
                if score < previous:
                    outcome.stopped_early = i
                    logger.debug("rru stopped at iteration %d (score %.5f < %.5f)",
                                 i, score, previous)
                    break
                previous = score

            outcome.d1, outcome.o1, outcome.state = d1_next, o1_next, state_next

        return outcome
