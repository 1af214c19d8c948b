# src/services/checkpoint_store.py

from __future__ import annotations

import dataclasses
import json
import logging
import os
import struct
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
import torch

from core.errors import CheckpointError
from core.models import ModelConfig
from network.stereo_net import StereoNet

logger = logging.getLogger(__name__)

MAGIC = b"HSCKPT01"
_LENGTH = struct.Struct("<I")


class CheckpointStore:
    """
    Single-file model checkpoint.

    Byte layout:
      [0:8)      magic b"HSCKPT01"
      [8:12)     uint32 little-endian N, length of the manifest
      [12:12+N)  UTF-8 JSON manifest:
                   {"format": 1,
                    "config": {ModelConfig fields},
                    "meta": {free-form, e.g. step},
                    "tensors": [{"name", "shape", "dtype": "float32",
                                 "offset", "nbytes"}, ...]}
      [12+N:)    payload; each tensor is row-major little-endian float32
                 starting at `offset` bytes from the payload start.
    """

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)

    # ------------------------------------------------------------------

    def save(self, model: StereoNet, meta: Optional[Dict[str, Any]] = None) -> Path:
        entries = []
        chunks = []
        offset = 0
        for name, tensor in model.state_dict().items():
            data = tensor.detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes()
            entries.append({
                "name": name,
                "shape": list(tensor.shape),
                "dtype": "float32",
                "offset": offset,
                "nbytes": len(data),
            })
            chunks.append(data)
            offset += len(data)

        manifest = {
            "format": 1,
            "config": dataclasses.asdict(model.config),
            "meta": meta or {},
            "tensors": entries,
        }
        header = json.dumps(manifest, sort_keys=True).encode("utf-8")

        self.path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_name(self.path.name + ".tmp")
        with open(tmp, "wb") as fh:
            fh.write(MAGIC)
            fh.write(_LENGTH.pack(len(header)))
            fh.write(header)
            for chunk in chunks:
                fh.write(chunk)
        os.replace(tmp, self.path)
        logger.info("Checkpoint written: %s (%d tensors, %d bytes)",
                    self.path, len(entries), offset)
        return self.path

    # ------------------------------------------------------------------

    def _read(self) -> Tuple[Dict[str, Any], bytes]:
        if not self.path.exists():
            raise FileNotFoundError(f"Checkpoint not found: {self.path}")
        raw = self.path.read_bytes()
        if raw[: len(MAGIC)] != MAGIC:
            raise CheckpointError(f"{self.path} is not a checkpoint (bad magic)")
        start = len(MAGIC) + _LENGTH.size
        if len(raw) < start:
            raise CheckpointError(f"{self.path} is truncated in its header")
        (length,) = _LENGTH.unpack(raw[len(MAGIC):start])
        if len(raw) < start + length:
            raise CheckpointError(f"{self.path} is truncated in its manifest")
        try:
            manifest = json.loads(raw[start:start + length].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"{self.path} has an unreadable manifest: {e}") from e
        return manifest, raw[start + length:]

    def read_manifest(self) -> Dict[str, Any]:
        return self._read()[0]

    def load_state(self) -> Tuple[ModelConfig, Dict[str, torch.Tensor], Dict[str, Any]]:
        manifest, payload = self._read()
        state = {}
        for entry in manifest.get("tensors", []):
            if entry.get("dtype") != "float32":
                raise CheckpointError(
                    f"tensor {entry.get('name')} has unsupported dtype {entry.get('dtype')}")
            end = entry["offset"] + entry["nbytes"]
            if end > len(payload):
                raise CheckpointError(f"tensor {entry['name']} runs past the end of {self.path}")
            arr = np.frombuffer(payload, dtype="<f4", count=entry["nbytes"] // 4,
                                offset=entry["offset"])
            state[entry["name"]] = torch.from_numpy(arr.astype(np.float32)).reshape(entry["shape"])
        return config_from_dict(manifest.get("config", {})), state, manifest.get("meta", {})

    def load_model(self) -> StereoNet:
        cfg, state, _ = self.load_state()
        model = StereoNet(cfg)
        model.load_state_dict(state)
        model.eval()
        return model


def config_from_dict(values: Dict[str, Any]) -> ModelConfig:
    known = {f.name for f in dataclasses.fields(ModelConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise CheckpointError(f"checkpoint config has unknown fields: {unknown}")
    return ModelConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in values.items()})
