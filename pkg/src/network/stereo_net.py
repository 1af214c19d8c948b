# src/network/stereo_net.py

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import List, Optional

import torch
import torch.nn as nn

from core.geometry import resize_disparity, resize_field, warp_horizontal
from core.models import ModelConfig
from network.base_estimators import BASE_LEVEL, BaseDisparityEstimator, BaseOcclusionEstimator
from network.features import FeatureExtractor, FeaturePyramid
from network.nlr import NormalizedLocalRefinement
from network.rru import RecurrentResidualUpdater, StopCriterion

logger = logging.getLogger(__name__)


@dataclass
class Phase1Intermediates:
    """Every named tensor of one full forward pass, batched (B×C×h×w)."""

    d4: torch.Tensor                  # base disparity, base-level pixels
    occ_init: torch.Tensor            # base occlusion scores, base level
    d1_history: List[torch.Tensor]    # residual disparity after each RRU step
    o1_history: List[torch.Tensor]
    base_up: torch.Tensor             # base disparity at the recurrent level (no grad)
    d1: torch.Tensor                  # composed recurrent-level disparity
    o1: torch.Tensor
    d0: torch.Tensor                  # before refinement, input resolution
    d: torch.Tensor
    o: torch.Tensor

    @property
    def iterations(self) -> int:
        return len(self.d1_history)


@dataclass
class PatchRefinement:
    disparity: torch.Tensor
    occlusion: torch.Tensor
    history: List[torch.Tensor] = field(default_factory=list)
    stopped_early: Optional[int] = None


class StereoNet(nn.Module):
    def __init__(self, cfg: Optional[ModelConfig] = None):
        super().__init__()
        self.config = cfg or ModelConfig()
        c = self.config
        base_channels = c.feature_channels[BASE_LEVEL]
        self.features = FeatureExtractor(c.in_channels, c.feature_channels)
        self.bde = BaseDisparityEstimator(
            base_channels, c.bde_channels, c.bde_aggregation_depth, c.max_disparity_train)
        self.bme = BaseOcclusionEstimator(base_channels, c.bme_channels)
        self.rru = RecurrentResidualUpdater(c)
        self.nlr = NormalizedLocalRefinement(c)

    def iteration_count(self, iters: Optional[int] = None) -> int:
        if not self.config.use_rru:
            return 0
        if iters is not None:
            return int(iters)
        return self.config.rru_iters_train if self.training else self.config.rru_iters_infer

    # ------------------------------------------------------------------

    def warp_pyramid(self, pyr_right: FeaturePyramid, d4: torch.Tensor) -> FeaturePyramid:
        warped = []
        for f_right in pyr_right:
            h, w = f_right.shape[-2:]
            f_warped, _ = warp_horizontal(f_right, resize_disparity(d4, h, w))
            warped.append(f_warped)
        return warped

    def forward_phase1(
        self, left: torch.Tensor, right: torch.Tensor, iters: Optional[int] = None
    ) -> Phase1Intermediates:
        """Full forward pass on a 32-divisible B×C×H×W pair."""
        h, w = left.shape[-2:]
        pyr_left = self.features(left)
        pyr_right = self.features(right)

        d4 = self.bde(pyr_left[BASE_LEVEL], pyr_right[BASE_LEVEL])
        pyr_warped = self.warp_pyramid(pyr_right, d4.detach())
        occ_init = self.bme(pyr_left[BASE_LEVEL], pyr_warped[BASE_LEVEL])

        state, d1, o1 = self.rru.init(pyr_left, pyr_warped, occ_init)
        outcome = self.rru.run(state, pyr_left, pyr_warped, d1, o1, self.iteration_count(iters))

        h1, w1 = d1.shape[-2:]
        base_up = resize_disparity(d4.detach(), h1, w1)
        d1_final = base_up + outcome.d1
        d0 = resize_disparity(d1_final, h, w)
        d = self.nlr(left, d0)
        o = resize_field(outcome.o1, h, w)

        return Phase1Intermediates(
            d4=d4,
            occ_init=occ_init,
            d1_history=outcome.d1_history,
            o1_history=outcome.o1_history,
            base_up=base_up,
            d1=d1_final,
            o1=outcome.o1,
            d0=d0,
            d=d,
            o=o,
        )

    def forward(self, left: torch.Tensor, right: torch.Tensor):
        out = self.forward_phase1(left, right)
        return out.d, out.o

    def refine_patch(
        self,
        left: torch.Tensor,
        warped_right: torch.Tensor,
        d_base: torch.Tensor,
        o_base: torch.Tensor,
        iters: int,
        criterion: Optional[StopCriterion] = None,
        apply_nlr: bool = True,
        keep_history: bool = False,
    ) -> PatchRefinement:
        """
        Second-phase refinement of one patch whose right crop was already warped
        by `d_base`. Features are not re-warped; the RRU starts from zero.
        """
        h, w = left.shape[-2:]
        pyr_left = self.features(left)
        pyr_warped = self.features(warped_right)

        state, d1, o1 = self.rru.init(pyr_left, pyr_warped, o_base)
        outcome = self.rru.run(
            state, pyr_left, pyr_warped, d1, o1, self.iteration_count(iters), criterion)

        disparity = d_base + resize_disparity(outcome.d1, h, w)
        if apply_nlr:
            disparity = self.nlr(left, disparity)
        history = []
        if keep_history:
            history = [d_base + resize_disparity(step, h, w) for step in outcome.d1_history]
        return PatchRefinement(
            disparity=disparity,
            occlusion=resize_field(outcome.o1, h, w),
            history=history,
            stopped_early=outcome.stopped_early,
        )


def with_switches(model: StereoNet, **switches) -> StereoNet:
    """Copy of `model` with ablation switches (or iteration counts) replaced."""
    variant = StereoNet(dataclasses.replace(model.config, **switches))
    variant.load_state_dict(model.state_dict())
    variant.train(model.training)
    return variant
