# tests/test_checkpoint.py

import dataclasses
import json
import struct

import pytest
import torch

from core.errors import CheckpointError
from services.checkpoint_store import MAGIC, CheckpointStore, config_from_dict


class TestCheckpointStore:
    def test_forward_is_bit_identical(self, model, tmp_path):
        store = CheckpointStore(tmp_path / "model.ckpt")
        store.save(model, {"step": 3})
        loaded = store.load_model()
        left, right = torch.rand(1, 3, 32, 64), torch.rand(1, 3, 32, 64)
        with torch.no_grad():
            a, b = model(left, right), loaded(left, right)
        assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])
        assert loaded.config == model.config

    def test_layout(self, model, tmp_path):
        path = CheckpointStore(tmp_path / "model.ckpt").save(model, {"step": 3})
        raw = path.read_bytes()
        assert raw[:8] == MAGIC == b"HSCKPT01"
        (length,) = struct.unpack("<I", raw[8:12])
        manifest = json.loads(raw[12:12 + length])
        assert manifest["meta"] == {"step": 3}
        assert manifest["config"] == dataclasses.asdict(model.config) | {
            "feature_channels": list(model.config.feature_channels),
            "corr_levels": list(model.config.corr_levels),
        }
        entries = manifest["tensors"]
        assert [e["name"] for e in entries] == list(model.state_dict())
        assert sum(e["nbytes"] for e in entries) == len(raw) - 12 - length
        assert all(e["dtype"] == "float32" for e in entries)

    def test_meta_round_trip(self, model, tmp_path):
        store = CheckpointStore(tmp_path / "model.ckpt")
        store.save(model, {"step": 9})
        _, state, meta = store.load_state()
        assert meta == {"step": 9}
        assert set(state) == set(model.state_dict())

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="missing.ckpt"):
            CheckpointStore(tmp_path / "missing.ckpt").load_model()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOTACKPT" + bytes(16))
        with pytest.raises(CheckpointError, match="bad magic"):
            CheckpointStore(path).load_state()

    def test_truncated_manifest(self, model, tmp_path):
        path = CheckpointStore(tmp_path / "model.ckpt").save(model)
        raw = path.read_bytes()
        path.write_bytes(raw[:20])
        with pytest.raises(CheckpointError):
            CheckpointStore(path).load_state()

    def test_truncated_payload(self, model, tmp_path):
        path = CheckpointStore(tmp_path / "model.ckpt").save(model)
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(CheckpointError, match="runs past"):
            CheckpointStore(path).load_state()

    def test_unknown_config_field(self):
        with pytest.raises(CheckpointError):
            config_from_dict({"no_such_field": 1})
