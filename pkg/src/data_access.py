# src/data_access.py

"""
File helpers: PFM disparity maps, PNG images and occlusion masks, scene
manifests and on-disk scene directories.

Scene directory layout (one per scene):
    <root>/<scene_id>/left.png         8-bit RGB
    <root>/<scene_id>/right.png        8-bit RGB
    <root>/<scene_id>/disp_left.pfm    grayscale PFM, left-referenced
    <root>/<scene_id>/disp_right.pfm   grayscale PFM, right-referenced
    <root>/<scene_id>/occlusion.png    8-bit L, 255 = occluded
"""

from __future__ import annotations

import dataclasses
import os
import re
from pathlib import Path
from typing import List, Union

import numpy as np
import torch
from PIL import Image

from config import coerce_value
from core.errors import ConfigError, PfmParseError, ShapeError
from core.models import DisparityMap, SceneSpec, TrainSample

PathLike = Union[str, Path]

SCENE_FILES = ("left.png", "right.png", "disp_left.pfm", "disp_right.pfm", "occlusion.png")


# -----------------------------------------------------------------------------
# PFM
# -----------------------------------------------------------------------------

def _as_plane(d) -> np.ndarray:
    if isinstance(d, DisparityMap):
        d = d.data
    if isinstance(d, torch.Tensor):
        d = d.detach().cpu().numpy()
    arr = np.asarray(d)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise ShapeError(f"PFM expects a single-channel H×W map, got shape {arr.shape}")
    return arr.astype(np.float32, copy=False)


def encode_pfm(d, little_endian: bool = True) -> bytes:
    arr = _as_plane(d)
    h, w = arr.shape
    scale = "-1.0" if little_endian else "1.0"
    header = f"Pf\n{w} {h}\n{scale}\n".encode("ascii")
    dtype = "<f4" if little_endian else ">f4"
    return header + np.ascontiguousarray(np.flipud(arr)).astype(dtype).tobytes()


def write_pfm(d, path: PathLike, little_endian: bool = True) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_pfm(d, little_endian))
    return path


def _next_line(raw: bytes, offset: int, what: str):
    end = raw.find(b"\n", offset)
    if end < 0:
        raise PfmParseError(f"missing newline after {what}", offset)
    return raw[offset:end].strip(), end + 1


def decode_pfm(raw: bytes) -> DisparityMap:
    magic, offset = _next_line(raw, 0, "magic")
    if magic == b"PF":
        raise PfmParseError("color PFM (PF) is not a disparity map", 0)
    if magic != b"Pf":
        raise PfmParseError(f"bad magic {magic[:8]!r}, expected b'Pf'", 0)

    dims_at = offset
    dims, offset = _next_line(raw, offset, "dimensions")
    match = re.fullmatch(rb"(\d+)\s+(\d+)", dims)
    if match is None:
        raise PfmParseError(f"bad dimensions line {dims[:32]!r}", dims_at)
    w, h = int(match.group(1)), int(match.group(2))
    if w < 1 or h < 1:
        raise PfmParseError(f"non-positive size {w}x{h}", dims_at)

    scale_at = offset
    scale_text, offset = _next_line(raw, offset, "scale")
    try:
        scale = float(scale_text)
    except ValueError:
        raise PfmParseError(f"bad scale {scale_text[:32]!r}", scale_at) from None
    if scale == 0.0:
        raise PfmParseError("scale must be non-zero", scale_at)

    expected = 4 * w * h
    if len(raw) - offset < expected:
        raise PfmParseError(
            f"truncated payload: expected {expected} bytes, found {len(raw) - offset}",
            len(raw))
    dtype = "<f4" if scale < 0 else ">f4"
    arr = np.frombuffer(raw, dtype=dtype, count=w * h, offset=offset).reshape(h, w)
    arr = np.flipud(arr).astype(np.float32)
    return DisparityMap(torch.from_numpy(np.ascontiguousarray(arr))[None])


def read_pfm(path: PathLike) -> DisparityMap:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"PFM file not found: {path}")
    return decode_pfm(path.read_bytes())


# -----------------------------------------------------------------------------
# PNG
# -----------------------------------------------------------------------------

def write_png_rgb(image: torch.Tensor, path: PathLike) -> Path:
    """3×H×W in [0, 1] -> 8-bit RGB."""
    if image.dim() != 3 or image.shape[0] != 3:
        raise ShapeError(f"RGB image must be 3×H×W, got {tuple(image.shape)}")
    arr = (image.detach().cpu().clamp(0, 1).numpy() * 255.0).round().astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(np.transpose(arr, (1, 2, 0)))).save(path)
    return path


def read_png_rgb(path: PathLike) -> torch.Tensor:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Image not found: {path}")
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(np.ascontiguousarray(np.transpose(arr, (2, 0, 1))))


def write_mask_png(mask: torch.Tensor, path: PathLike) -> Path:
    """Boolean H×W mask -> 8-bit L image with values {0, 255}."""
    arr = mask.detach().cpu().reshape(mask.shape[-2:]).numpy().astype(np.uint8) * 255
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)
    return path


def read_mask_png(path: PathLike) -> torch.Tensor:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Mask not found: {path}")
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"))
    return torch.from_numpy(arr > 127)


# -----------------------------------------------------------------------------
# Manifests
# -----------------------------------------------------------------------------

def format_spec(spec: SceneSpec) -> str:
    parts = []
    for f in dataclasses.fields(SceneSpec):
        value = getattr(spec, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        parts.append(f"{f.name}={value}")
    return " ".join(parts)


def parse_spec_line(line: str, base: SceneSpec = SceneSpec()) -> SceneSpec:
    values = {}
    for token in line.split():
        if "=" not in token:
            raise ConfigError(f"manifest token {token!r} is not key=value")
        key, raw = token.split("=", 1)
        if not hasattr(base, key):
            raise ConfigError(f"Unknown scene key in manifest: {key}")
        values[key] = coerce_value(getattr(base, key), raw, f"scene.{key}")
    return dataclasses.replace(base, **values)


def write_manifest(specs: List[SceneSpec], path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(format_spec(s) + "\n" for s in specs), encoding="utf-8")
    return path


def read_manifest(path: PathLike, base: SceneSpec = SceneSpec()) -> List[SceneSpec]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Manifest not found: {path}")
    specs = []
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            specs.append(parse_spec_line(line, base))
    return specs


# -----------------------------------------------------------------------------
# Scene directories
# -----------------------------------------------------------------------------

def write_scene(sample: TrainSample, root: PathLike) -> Path:
    scene_dir = Path(root) / (sample.scene_id or "scene")
    scene_dir.mkdir(parents=True, exist_ok=True)
    write_png_rgb(sample.left, scene_dir / "left.png")
    write_png_rgb(sample.right, scene_dir / "right.png")
    write_pfm(sample.disp_left, scene_dir / "disp_left.pfm")
    write_pfm(sample.disp_right, scene_dir / "disp_right.pfm")
    write_mask_png(sample.occlusion_mask, scene_dir / "occlusion.png")
    return scene_dir


def read_scene(scene_dir: PathLike) -> TrainSample:
    scene_dir = Path(scene_dir)
    missing = [name for name in SCENE_FILES if not (scene_dir / name).exists()]
    if missing:
        raise FileNotFoundError(f"Scene directory {scene_dir} is missing: {', '.join(missing)}")
    occ = read_mask_png(scene_dir / "occlusion.png").to(torch.float32)
    return TrainSample(
        left=read_png_rgb(scene_dir / "left.png"),
        right=read_png_rgb(scene_dir / "right.png"),
        disp_left=read_pfm(scene_dir / "disp_left.pfm").data,
        disp_right=read_pfm(scene_dir / "disp_right.pfm").data,
        occlusion=torch.stack([1.0 - occ, occ]),
        scene_id=scene_dir.name,
    )


def list_scene_dirs(root: PathLike) -> List[Path]:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"Dataset directory not found: {root}")
    return sorted(
        p for p in root.iterdir()
        if p.is_dir() and os.path.exists(p / "disp_left.pfm")
    )
