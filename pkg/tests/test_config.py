# tests/test_config.py

import pytest

from config import coerce_value, device, load_run_config, log_level, read_config_file
from core.errors import ConfigError
from core.models import InferenceConfig, RunConfig, TrainConfig


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    import os

    for key in list(os.environ):
        if key.startswith("HIRES_STEREO_"):
            monkeypatch.delenv(key)


class TestLoadRunConfig:
    def test_defaults(self):
        cfg = load_run_config()
        assert cfg == RunConfig()
        assert cfg.infer.patch_h == 128 and cfg.loss.lam_d4 == 32.0

    def test_file(self, tiny_config_file, tiny_config):
        cfg = load_run_config(tiny_config_file)
        assert cfg.model == tiny_config
        assert cfg.train.crop_w == 64
        assert cfg.infer.overlap == 16

    def test_environment_beats_file(self, tiny_config_file, monkeypatch):
        monkeypatch.setenv("HIRES_STEREO_INFER_OVERLAP", "8")
        assert load_run_config(tiny_config_file).infer.overlap == 8

    def test_overrides_beat_environment(self, monkeypatch):
        monkeypatch.setenv("HIRES_STEREO_TRAIN_STEPS", "5")
        cfg = load_run_config(overrides={"train.steps": 7, "train.seed": None})
        assert cfg.train.steps == 7
        assert cfg.train.seed == TrainConfig().seed

    def test_booleans_and_tuples(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("model.use_nlr=off\ntrain.scale_range=0.5, 1.0\n", encoding="utf-8")
        cfg = load_run_config(path)
        assert cfg.model.use_nlr is False
        assert cfg.train.scale_range == (0.5, 1.0)

    @pytest.mark.parametrize("key", ["train.no_such_field", "nosection.steps", "steps"])
    def test_unknown_keys(self, key):
        with pytest.raises(ConfigError):
            load_run_config(overrides={key: "1"})

    @pytest.mark.parametrize("key,value", [
        ("train.steps", "many"),
        ("model.use_nlr", "maybe"),
        ("infer.stop_rule", "never"),
        ("infer.overlap", "128"),
        ("model.max_disparity_train", "40"),
        ("train.grad_clip", "-1"),
    ])
    def test_invalid_values(self, key, value):
        with pytest.raises(ConfigError):
            load_run_config(overrides={key: value})

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_run_config(tmp_path / "none.cfg")


class TestConfigFile:
    def test_comments_and_blanks(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("# header\n\ntrain.steps = 3  # inline\n", encoding="utf-8")
        assert read_config_file(path) == {"train.steps": "3"}

    def test_line_without_equals(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("train.steps\n", encoding="utf-8")
        with pytest.raises(ConfigError, match=":1:"):
            read_config_file(path)


class TestHelpers:
    def test_coerce(self):
        assert coerce_value(1, " 4 ", "k") == 4
        assert coerce_value(1.0, "2.5", "k") == 2.5
        assert coerce_value((1, 2), "3,4,5", "k") == (3, 4, 5)
        assert coerce_value(True, "yes", "k") is True
        assert coerce_value("fixed", "ssim", "k") == "ssim"

    def test_log_level_and_device(self, monkeypatch):
        assert log_level() == "INFO"
        assert device() == "cpu"
        monkeypatch.setenv("HIRES_STEREO_LOG_LEVEL", "debug")
        monkeypatch.setenv("HIRES_STEREO_DEVICE", "cuda:1")
        assert log_level() == "DEBUG"
        assert device() == "cuda:1"

    def test_section_validation(self):
        with pytest.raises(ConfigError):
            InferenceConfig(patch_h=100)
        with pytest.raises(ConfigError):
            TrainConfig(crop_w=70)
