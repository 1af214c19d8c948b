# src/core/models.py

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import torch

from core.errors import ConfigError, ShapeError

# Images are plain tensors: C×H×W (or B×C×H×W inside the network),
# nominal range [0, 1] for photographs, unbounded for features.
ImageField = torch.Tensor


@dataclass(frozen=True)
class DisparityMap:
    """Horizontal pixel offsets, left image as reference.

    `data` is 1×H×W, in pixels of this map's own resolution.
    `level` is log2(input width / map width); 0 is input resolution.
    """

    data: torch.Tensor
    level: int = 0

    def __post_init__(self):
        if self.data.dim() != 3 or self.data.shape[0] != 1:
            raise ShapeError(
                f"DisparityMap expects 1×H×W, got {tuple(self.data.shape)}")

    @property
    def height(self) -> int:
        return int(self.data.shape[-2])

    @property
    def width(self) -> int:
        return int(self.data.shape[-1])

    def resize(self, new_h: int, new_w: int) -> "DisparityMap":
        from core.geometry import resize_disparity

        resized = resize_disparity(self.data.unsqueeze(0), new_h, new_w)[0]
        ratio = self.width / float(new_w)
        level = self.level
        if ratio > 0 and float(math.log2(ratio)).is_integer():
            level = self.level + int(math.log2(ratio))
        return DisparityMap(resized, level)


@dataclass(frozen=True)
class OcclusionField:
    """2-channel unnormalized scores: channel 0 non-occluded, channel 1 occluded."""

    scores: torch.Tensor
    level: int = 0

    def __post_init__(self):
        if self.scores.dim() != 3 or self.scores.shape[0] != 2:
            raise ShapeError(
                f"OcclusionField expects 2×H×W, got {tuple(self.scores.shape)}")

    def mask(self) -> torch.Tensor:
        """Binary H×W mask, True = occluded. Ties resolve to non-occluded."""
        return self.scores[1] > self.scores[0]

    @staticmethod
    def from_mask(mask: torch.Tensor, level: int = 0) -> "OcclusionField":
        occ = mask.to(torch.float32)
        return OcclusionField(torch.stack([1.0 - occ, occ], dim=0), level)


@dataclass(frozen=True)
class PatchGrid:
    """Placements of fixed-size patches covering an image."""

    image_h: int
    image_w: int
    patch_h: int
    patch_w: int
    overlap: int
    placements: Tuple[Tuple[int, int], ...] = ()

    def __len__(self) -> int:
        return len(self.placements)

    def window(self, index: int) -> Tuple[slice, slice]:
        row0, col0 = self.placements[index]
        return slice(row0, row0 + self.patch_h), slice(col0, col0 + self.patch_w)


# -----------------------------------------------------------------------------
# Configuration
# -----------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 3
    feature_channels: Tuple[int, ...] = (16, 24, 32, 48, 64)
    hidden_channels: int = 64
    context_channels: int = 32
    motion_channels: int = 48
    corr_radius: int = 4
    corr_levels: Tuple[int, ...] = (1, 2, 3)
    rru_level: int = 1
    max_disparity_train: int = 256
    bde_channels: int = 16
    bde_aggregation_depth: int = 2
    bme_channels: int = 32
    nlr_channels: int = 16
    rru_iters_train: int = 4
    rru_iters_infer: int = 10
    use_occlusion_path: bool = True
    use_nlr: bool = True
    use_rru: bool = True
    nlr_epsilon: float = 1e-6

    def __post_init__(self):
        if len(self.feature_channels) != 5:
            raise ConfigError(
                f"feature_channels needs 5 levels, got {len(self.feature_channels)}")
        counts = {
            "in_channels": self.in_channels,
            "hidden_channels": self.hidden_channels,
            "context_channels": self.context_channels,
            "motion_channels": self.motion_channels,
            "bde_channels": self.bde_channels,
            "bde_aggregation_depth": self.bde_aggregation_depth,
            "bme_channels": self.bme_channels,
            "nlr_channels": self.nlr_channels,
            "rru_iters_train": self.rru_iters_train,
            "rru_iters_infer": self.rru_iters_infer,
        }
        for name, value in counts.items():
            if int(value) < 1:
                raise ConfigError(f"model.{name} must be >= 1, got {value}")
        if any(int(c) < 1 for c in self.feature_channels):
            raise ConfigError(
                f"model.feature_channels must all be >= 1, got {self.feature_channels}")
        if self.corr_radius < 0:
            raise ConfigError(
                f"model.corr_radius must be >= 0, got {self.corr_radius}")
        if not self.corr_levels:
            raise ConfigError("model.corr_levels must name at least one level")
        for lvl in (self.rru_level, *self.corr_levels):
            if not 0 <= int(lvl) <= 4:
                raise ConfigError(f"pyramid level {lvl} outside 0..4")
        if self.nlr_epsilon <= 0:
            raise ConfigError(
                f"model.nlr_epsilon must be > 0, got {self.nlr_epsilon}")
        if self.max_disparity_train % 16 != 0 or self.max_disparity_train < 16:
            raise ConfigError(
                f"model.max_disparity_train must be a positive multiple of 16, "
                f"got {self.max_disparity_train}")
        if self.num_hypotheses < 1:
            raise ConfigError(
                f"model.max_disparity_train={self.max_disparity_train} leaves no "
                f"cost-volume hypotheses")

    @property
    def num_hypotheses(self) -> int:
        """Cost-volume hypotheses at the base level."""
        return self.max_disparity_train // 16


@dataclass(frozen=True)
class LossWeights:
    lam_d4: float = 32.0
    lam_o: float = 2.0
    lam_d1: float = 2.0
    lam_o1: float = 1.0
    lam_d: float = 2.0
    gamma_d: float = 0.8
    gamma_o: float = 0.8

    def __post_init__(self):
        for name in ("lam_d4", "lam_o", "lam_d1", "lam_o1", "lam_d"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss.{name} must be >= 0")
        for name in ("gamma_d", "gamma_o"):
            value = getattr(self, name)
            if not 0.0 < value <= 1.0:
                raise ConfigError(f"loss.{name} must be in (0, 1], got {value}")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 4
    steps: int = 2000
    crop_h: int = 64
    crop_w: int = 128
    seed: int = 0
    val_every: int = 100
    checkpoint_every: int = 500
    log_every: int = 10
    train_count: int = 200
    val_count: int = 20
    jitter: float = 0.1
    vflip_prob: float = 0.5
    scale_range: Tuple[float, float] = (1.0, 1.0)
    grad_clip: float = 0.0          # 0 = plain Adam, no clipping
    workers: int = 1

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"train.lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if self.steps < 0:
            raise ConfigError("train.steps must be >= 0")
        if self.crop_h % 32 or self.crop_w % 32:
            raise ConfigError(
                f"train crop {self.crop_h}x{self.crop_w} must be divisible by 32")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ConfigError(f"train.scale_range invalid: {self.scale_range}")
        if self.grad_clip < 0:
            raise ConfigError(f"train.grad_clip must be >= 0, got {self.grad_clip}")


STOP_RULES = ("fixed", "ssim")


@dataclass(frozen=True)
class InferenceConfig:
    downsample_factor: int = 2
    patch_h: int = 128
    patch_w: int = 128
    overlap: int = 32
    rru_iters: int = 10
    stop_rule: str = "fixed"
    ssim_window: int = 7
    workers: int = 1
    nlr_per_patch: bool = True
    keep_history: bool = False

    def __post_init__(self):
        if self.downsample_factor < 1:
            raise ConfigError(
                f"infer.downsample_factor must be >= 1, got {self.downsample_factor}")
        if self.patch_h % 32 or self.patch_w % 32 or self.patch_h < 32 or self.patch_w < 32:
            raise ConfigError(
                f"patch {self.patch_h}x{self.patch_w} must be divisible by 32")
        if not 0 <= self.overlap < min(self.patch_h, self.patch_w):
            raise ConfigError(
                f"overlap {self.overlap} must be in [0, patch size)")
        if self.rru_iters < 0:
            raise ConfigError("infer.rru_iters must be >= 0")
        if self.stop_rule not in STOP_RULES:
            raise ConfigError(
                f"infer.stop_rule must be one of {STOP_RULES}, got {self.stop_rule!r}")
        if self.workers < 1:
            raise ConfigError("infer.workers must be >= 1")


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    image_h: int = 64
    image_w: int = 128
    n_layers: int = 4
    d_min: float = 2.0
    d_max: float = 24.0
    slant_prob: float = 0.3
    octave_spacings: Tuple[int, ...] = (16, 8, 4)
    contrast: float = 1.0
    low_texture_prob: float = 0.1

    def __post_init__(self):
        if self.image_h < 1 or self.image_w < 1:
            raise ConfigError("scene size must be positive")
        if self.n_layers < 1:
            raise ConfigError(f"scene.n_layers must be >= 1, got {self.n_layers}")
        if not 0 <= self.d_min < self.d_max < self.image_w:
            raise ConfigError(
                f"scene disparity range needs 0 <= d_min < d_max < image_w, "
                f"got ({self.d_min}, {self.d_max}) for width {self.image_w}")
        if not self.octave_spacings or min(self.octave_spacings) < 1:
            raise ConfigError("scene.octave_spacings must be positive")

    @property
    def disparity_range(self) -> Tuple[float, float]:
        return (self.d_min, self.d_max)


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    infer: InferenceConfig = field(default_factory=InferenceConfig)
    scene: SceneSpec = field(default_factory=SceneSpec)


# -----------------------------------------------------------------------------
# Samples and results
# -----------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainSample:
    """One rectified pair with dense ground truth at input resolution."""

    left: torch.Tensor          # 3×H×W
    right: torch.Tensor         # 3×H×W
    disp_left: torch.Tensor     # 1×H×W
    disp_right: torch.Tensor    # 1×H×W
    occlusion: torch.Tensor     # 2×H×W one-hot, channel 1 = occluded
    scene_id: str = ""

    def __post_init__(self):
        if self.left.dim() != 3:
            raise ShapeError(f"left must be C×H×W, got {tuple(self.left.shape)}")
        c, h, w = self.left.shape
        expected = {
            "right": (self.right, c),
            "disp_left": (self.disp_left, 1),
            "disp_right": (self.disp_right, 1),
            "occlusion": (self.occlusion, 2),
        }
        for name, (tensor, channels) in expected.items():
            if tuple(tensor.shape) != (channels, h, w):
                raise ShapeError(
                    f"{name} has shape {tuple(tensor.shape)}, expected "
                    f"({channels}, {h}, {w})")

    @property
    def occlusion_mask(self) -> torch.Tensor:
        return self.occlusion[1] > self.occlusion[0]


@dataclass
class InferenceResult:
    disparity: DisparityMap
    occlusion: OcclusionField
    phase1_disparity: DisparityMap
    phase1_occlusion: OcclusionField
    patch_count: int = 0
    timings: Dict[str, float] = field(default_factory=dict)
    iteration_disparities: List[torch.Tensor] = field(default_factory=list)
    early_stopped_patches: int = 0
