# src/providers/synthetic_provider.py

"""
Procedural rectified stereo scenes.

A scene is a stack of textured planes, each with disparity
d(x, y) = a + b·x + c·y in left-image coordinates, cut out by an ellipse or a
rectangle. Textures live on the plane (coordinates (x_left, y)), so the right
view is rendered by solving x_right = x - d(x, y) for x. The nearest surface
(largest disparity) wins in each view, which gives exact disparity maps for
both views. Occlusion compares those two maps at each left-to-right match.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
from joblib import Parallel, delayed
from scipy.ndimage import map_coordinates

from core.errors import ConfigError
from core.geometry import DEFAULT_OCCLUSION_TAU
from core.models import SceneSpec, TrainSample
from providers.base import SceneProvider

logger = logging.getLogger(__name__)

MAX_SLOPE = 0.45
LOW_TEXTURE_CONTRAST = 0.1

# Disjoint seed ranges per split.
SPLIT_SIZE = 1_000_000
SPLIT_OFFSETS = {"train": 0, "val": SPLIT_SIZE, "test": 2 * SPLIT_SIZE}


# -----------------------------------------------------------------------------
# Layers
# -----------------------------------------------------------------------------

@dataclass(frozen=True)
class TextureNoise:
    grids: Tuple[np.ndarray, ...]
    spacings: Tuple[int, ...]
    u_offset: float
    contrast: float
    tint: Tuple[float, float, float]

    def sample(self, u: np.ndarray, y: np.ndarray) -> np.ndarray:
        """RGB values (3×N) at plane coordinates (u, y)."""
        total = np.zeros(u.shape, dtype=np.float64)
        weight = 0.0
        for k, (grid, spacing) in enumerate(zip(self.grids, self.spacings)):
            amp = 0.5 ** k
            coords = np.stack([y / spacing, (u + self.u_offset) / spacing])
            total += amp * map_coordinates(grid, coords, order=3, mode="nearest")
            weight += amp
        t = np.clip(0.5 + self.contrast * (total / weight - 0.5), 0.0, 1.0)
        return np.stack([t * c for c in self.tint])


@dataclass(frozen=True)
class Layer:
    a: float
    b: float
    c: float
    shape: str                      # "plane", "ellipse" or "rectangle"
    bounds: Tuple[float, float, float, float]
    texture: TextureNoise

    def disparity(self, u: np.ndarray, y: np.ndarray) -> np.ndarray:
        return self.a + self.b * u + self.c * y

    def left_coordinate(self, x_right: np.ndarray, y: np.ndarray) -> np.ndarray:
        return (x_right + self.a + self.c * y) / (1.0 - self.b)

    def contains(self, u: np.ndarray, y: np.ndarray) -> np.ndarray:
        if self.shape == "plane":
            return np.ones(u.shape, dtype=bool)
        p, q, r, s = self.bounds
        if self.shape == "ellipse":
            return ((u - p) / r) ** 2 + ((y - q) / s) ** 2 <= 1.0
        return (u >= p) & (u <= r) & (y >= q) & (y <= s)


def _make_texture(rng: np.random.Generator, spec: SceneSpec) -> TextureNoise:
    pad = 8
    u_span = spec.image_w + 2 * spec.d_max + 2 * pad
    grids = []
    for spacing in spec.octave_spacings:
        rows = int(np.ceil(spec.image_h / spacing)) + 4
        cols = int(np.ceil(u_span / spacing)) + 4
        grids.append(rng.random((rows, cols)))
    contrast = spec.contrast
    if rng.random() < spec.low_texture_prob:
        contrast *= LOW_TEXTURE_CONTRAST
    tint = tuple(float(v) for v in rng.uniform(0.35, 1.0, size=3))
    return TextureNoise(tuple(grids), tuple(spec.octave_spacings), pad + spec.d_max, contrast, tint)


def _make_plane(
    rng: np.random.Generator, spec: SceneSpec, d_low: float, d_high: float
) -> Tuple[float, float, float]:
    h, w = spec.image_h, spec.image_w
    centre = float(rng.uniform(d_low, d_high))
    b = c = 0.0
    if rng.random() < spec.slant_prob:
        margin = min(centre - spec.d_min, spec.d_max - centre)
        # plane extremes sit at the image corners
        b = float(rng.uniform(-1.0, 1.0)) * min(MAX_SLOPE, margin / w)
        c = float(rng.uniform(-1.0, 1.0)) * min(MAX_SLOPE, margin / h)
    a = centre - b * (w - 1) / 2.0 - c * (h - 1) / 2.0
    return a, b, c


def build_layers(spec: SceneSpec) -> List[Layer]:
    """Background plane first, then foreground cut-outs in drawing order."""
    rng = np.random.default_rng(spec.seed)
    h, w = spec.image_h, spec.image_w
    d_lo, d_hi = spec.disparity_range
    layers = []

    a, b, c = _make_plane(rng, spec, d_lo, d_lo + 0.3 * (d_hi - d_lo))
    layers.append(Layer(a, b, c, "plane", (0.0, 0.0, 0.0, 0.0), _make_texture(rng, spec)))

    for _ in range(spec.n_layers - 1):
        a, b, c = _make_plane(rng, spec, d_lo, d_hi)
        if rng.random() < 0.5:
            bounds = (
                float(rng.uniform(0, w)), float(rng.uniform(0, h)),
                float(rng.uniform(w / 12, w / 4)), float(rng.uniform(h / 8, h / 3)),
            )
            shape = "ellipse"
        else:
            u0, y0 = float(rng.uniform(-w / 8, w)), float(rng.uniform(-h / 8, h))
            bounds = (u0, y0, u0 + float(rng.uniform(w / 8, w / 2)), y0 + float(rng.uniform(h / 6, h / 2)))
            shape = "rectangle"
        layers.append(Layer(a, b, c, shape, bounds, _make_texture(rng, spec)))
    return layers


def check_layers(layers: Sequence[Layer], spec: SceneSpec) -> None:
    h, w = spec.image_h, spec.image_w
    d_lo, d_hi = spec.disparity_range
    corners_u = np.array([0.0, w - 1.0, 0.0, w - 1.0])
    corners_y = np.array([0.0, 0.0, h - 1.0, h - 1.0])
    for i, layer in enumerate(layers):
        if not abs(layer.b) < 1.0:
            raise ConfigError(f"layer {i} slope {layer.b} folds the right view")
        d = layer.disparity(corners_u, corners_y)
        if d.min() < d_lo - 1e-9 or d.max() > d_hi + 1e-9:
            raise ConfigError(
                f"layer {i} disparities [{d.min():.3f}, {d.max():.3f}] outside "
                f"range [{d_lo}, {d_hi}]")


# -----------------------------------------------------------------------------
# Rendering
# -----------------------------------------------------------------------------

def visible_surface(
    layers: Sequence[Layer], x: np.ndarray, y: np.ndarray, view: str
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Z-buffer lookup: (disparity, layer index) of the nearest surface seen at
    view coordinates (x, y). Later layers win ties.
    """
    best = np.full(x.shape, -np.inf)
    owner = np.full(x.shape, -1, dtype=np.int64)
    for i, layer in enumerate(layers):
        u = x if view == "left" else layer.left_coordinate(x, y)
        d = layer.disparity(u, y)
        closer = layer.contains(u, y) & (d >= best)
        best = np.where(closer, d, best)
        owner = np.where(closer, i, owner)
    return best, owner


def _render_view(
    layers: Sequence[Layer], h: int, w: int, view: str
) -> Tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    disp, owner = visible_surface(layers, xs, ys, view)
    image = np.zeros((3, h, w), dtype=np.float64)
    for i, layer in enumerate(layers):
        sel = owner == i
        if not sel.any():
            continue
        x_sel, y_sel = xs[sel], ys[sel]
        u = x_sel if view == "left" else layer.left_coordinate(x_sel, y_sel)
        image[:, sel] = layer.texture.sample(u, y_sel)
    return image, disp


def visibility_oracle(
    disp_left: np.ndarray, disp_right: np.ndarray, tau: float = DEFAULT_OCCLUSION_TAU
) -> np.ndarray:
    """
    Occlusion from the two z-buffer disparity maps: a left pixel is occluded when
    x - dL leaves the image or the right disparity there, read between the two
    neighbouring right columns, disagrees with dL by more than `tau`.

    Works on the float32-rounded maps that are stored with the scene.
    """
    d_left = disp_left.astype(np.float32).astype(np.float64)
    d_right = disp_right.astype(np.float32).astype(np.float64)
    h, w = d_left.shape
    x_right = np.arange(w, dtype=np.float64)[None, :] - d_left
    inside = (x_right >= 0) & (x_right <= w - 1)
    x0 = np.floor(x_right)
    frac = x_right - x0
    i0 = np.clip(x0, 0, w - 1).astype(np.int64)
    i1 = np.clip(x0 + 1, 0, w - 1).astype(np.int64)
    rows = np.arange(h)[:, None]
    sampled = (1.0 - frac) * d_right[rows, i0] + frac * d_right[rows, i1]
    return ~inside | (np.abs(d_left - sampled) > tau)


def render_layers(layers: Sequence[Layer], spec: SceneSpec, scene_id: str = "") -> TrainSample:
    h, w = spec.image_h, spec.image_w
    left, disp_left = _render_view(layers, h, w, "left")
    right, disp_right = _render_view(layers, h, w, "right")
    occluded = visibility_oracle(disp_left, disp_right).astype(np.float32)

    return TrainSample(
        left=torch.from_numpy(left.astype(np.float32)),
        right=torch.from_numpy(right.astype(np.float32)),
        disp_left=torch.from_numpy(disp_left.astype(np.float32))[None],
        disp_right=torch.from_numpy(disp_right.astype(np.float32))[None],
        occlusion=torch.from_numpy(np.stack([1.0 - occluded, occluded])),
        scene_id=scene_id,
    )


def scene_id_for(seed: int) -> str:
    return f"scene_{seed:07d}"


def generate_scene(spec: SceneSpec) -> TrainSample:
    layers = build_layers(spec)
    check_layers(layers, spec)
    return render_layers(layers, spec, scene_id_for(spec.seed))


# -----------------------------------------------------------------------------
# Splits and datasets
# -----------------------------------------------------------------------------

def split_of(seed: int) -> str:
    for name, offset in SPLIT_OFFSETS.items():
        if offset <= seed < offset + SPLIT_SIZE:
            return name
    raise ConfigError(f"seed {seed} belongs to no split")


def split_specs(base: SceneSpec, split: str, count: int, start: int = 0) -> List[SceneSpec]:
    if split not in SPLIT_OFFSETS:
        raise ConfigError(f"unknown split {split!r}; expected one of {sorted(SPLIT_OFFSETS)}")
    if count < 0 or start < 0 or start + count > SPLIT_SIZE:
        raise ConfigError(f"split {split} holds at most {SPLIT_SIZE} scenes")
    offset = SPLIT_OFFSETS[split] + start
    return [dataclasses.replace(base, seed=offset + i) for i in range(count)]


def dataset(specs: Sequence[SceneSpec], split: str) -> Iterator[TrainSample]:
    """Yield scenes in spec order; every spec must belong to `split`."""
    for spec in specs:
        if split_of(spec.seed) != split:
            raise ConfigError(f"scene seed {spec.seed} is not in the {split} split")
    for spec in specs:
        yield generate_scene(spec)


class SyntheticProvider(SceneProvider):
    def __init__(
        self,
        base: SceneSpec,
        split: str = "train",
        count: int = 1,
        start: int = 0,
        workers: int = 1,
    ):
        self.base = base
        self.split = split
        self.specs = split_specs(base, split, count, start)
        self.workers = max(1, int(workers))

    def scene_ids(self) -> List[str]:
        return [scene_id_for(s.seed) for s in self.specs]

    def get(self, index: int) -> TrainSample:
        return generate_scene(self.specs[index])

    def load(self, workers: Optional[int] = None) -> List[TrainSample]:
        n_jobs = self.workers if workers is None else max(1, int(workers))
        logger.info("Generating %d %s scenes (%dx%d) with %d workers",
                    len(self.specs), self.split, self.base.image_h, self.base.image_w, n_jobs)
        if n_jobs == 1:
            return [generate_scene(s) for s in self.specs]
        return Parallel(n_jobs=n_jobs)(delayed(generate_scene)(s) for s in self.specs)
