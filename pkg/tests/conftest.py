# tests/conftest.py

import pytest
import torch

from core.models import ModelConfig, SceneSpec
from network.features import FeatureExtractor
from network.stereo_net import StereoNet
from providers.synthetic_provider import generate_scene

TINY_MODEL = ModelConfig(
    feature_channels=(4, 6, 8, 8, 8),
    hidden_channels=8,
    context_channels=4,
    motion_channels=8,
    corr_radius=2,
    corr_levels=(1, 2),
    max_disparity_train=32,
    bde_channels=4,
    bde_aggregation_depth=1,
    bme_channels=4,
    nlr_channels=4,
    rru_iters_train=2,
    rru_iters_infer=3,
)

# Same network written as config-file lines, for CLI runs.
TINY_CONFIG_LINES = [
    "model.feature_channels=4,6,8,8,8",
    "model.hidden_channels=8",
    "model.context_channels=4",
    "model.motion_channels=8",
    "model.corr_radius=2",
    "model.corr_levels=1,2",
    "model.max_disparity_train=32",
    "model.bde_channels=4",
    "model.bde_aggregation_depth=1",
    "model.bme_channels=4",
    "model.nlr_channels=4",
    "model.rru_iters_train=2",
    "model.rru_iters_infer=3",
    "train.batch_size=1",
    "train.crop_h=32",
    "train.crop_w=64",
    "train.train_count=2",
    "train.val_count=1",
    "train.val_every=1",
    "train.log_every=1",
    "infer.patch_h=64",
    "infer.patch_w=64",
    "infer.overlap=16",
    "infer.rru_iters=2",
    "scene.image_h=64",
    "scene.image_w=128",
]


@pytest.fixture
def tiny_config() -> ModelConfig:
    return TINY_MODEL


@pytest.fixture
def model(tiny_config) -> StereoNet:
    torch.manual_seed(0)
    return StereoNet(tiny_config).eval()


@pytest.fixture
def double_model(tiny_config) -> StereoNet:
    torch.manual_seed(0)
    return StereoNet(tiny_config).double().eval()


@pytest.fixture
def pyramids(tiny_config):
    """Left and right feature pyramids of a random 64×64 pair."""
    torch.manual_seed(1)
    fe = FeatureExtractor(tiny_config.in_channels, tiny_config.feature_channels)
    with torch.no_grad():
        return fe(torch.rand(1, 3, 64, 64)), fe(torch.rand(1, 3, 64, 64))


@pytest.fixture(scope="session")
def small_scene():
    return generate_scene(SceneSpec(seed=3, image_h=64, image_w=128))


@pytest.fixture(scope="session")
def scenes():
    return [generate_scene(SceneSpec(seed=s, image_h=64, image_w=128)) for s in (11, 12)]


@pytest.fixture
def tiny_config_file(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text("# tiny toy network\n" + "\n".join(TINY_CONFIG_LINES) + "\n", encoding="utf-8")
    return path
