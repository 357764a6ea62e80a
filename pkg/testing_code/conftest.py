import os
import sys

import pytest
import torch

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from app.baseline import LoadedRegressor, PoseRegressor, RegressorDescriptor, train_regressor  # noqa: E402
from app.config import ArchitectureDescriptor, RenderConfig, TrainConfig  # noqa: E402
from app.dataset import render_toy_dataset  # noqa: E402
from app.generator import ConditionalVAE, LoadedModel, freeze  # noqa: E402
from app.training import train  # noqa: E402


def tiny_descriptor(**overrides) -> ArchitectureDescriptor:
    """16x16 generator/encoder pair, small enough for CPU tests."""
    values = dict(latent_dim=4, activation="silu")
    values.update(overrides)
    return ArchitectureDescriptor.from_preset("tiny", **values)


def make_model(seed: int = 0, dtype=torch.float64, **overrides) -> LoadedModel:
    torch.manual_seed(seed)
    descriptor = tiny_descriptor(**overrides)
    vae = ConditionalVAE(descriptor).to(dtype)
    freeze(vae)
    return LoadedModel(descriptor, vae.generator, vae.encoder,
                       summary={"category": "laptop", "symmetric": False, "depth_range": 1.0})


def tiny_render_config(out: str, **overrides) -> RenderConfig:
    values = dict(category="laptop", instances=2, views=6, test_instances=1, val_fraction=0.34,
                  image_size=16, supersample=1, seed=0, out=out)
    values.update(overrides)
    return RenderConfig(**values)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: acceptance-scale test, runs only with POSESYNTH_RUN_SLOW=1")


def pytest_collection_modifyitems(config, items):
    if os.environ.get("POSESYNTH_RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="set POSESYNTH_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(autouse=True)
def _log_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("POSESYNTH_LOG_DIR", str(tmp_path / "logs"))


@pytest.fixture
def tiny_model() -> LoadedModel:
    return make_model()


@pytest.fixture
def rgbd_model() -> LoadedModel:
    return make_model(out_channels=4)


@pytest.fixture
def tiny_regressor() -> LoadedRegressor:
    torch.manual_seed(0)
    descriptor = RegressorDescriptor(image_size=16, channels=[8, 16], hidden=16)
    return LoadedRegressor(descriptor, freeze(PoseRegressor(descriptor)))


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory) -> str:
    out = str(tmp_path_factory.mktemp("dataset"))
    render_toy_dataset(tiny_render_config(out))
    return out


@pytest.fixture(scope="session")
def trained_checkpoint(tiny_dataset, tmp_path_factory) -> str:
    out = str(tmp_path_factory.mktemp("train"))
    config = TrainConfig(dataset=tiny_dataset, out=out, preset="tiny", latent_dim=4, activation="silu",
                         epochs=1, batch_size=4)
    return train(config, run_id="fixture").checkpoint


@pytest.fixture(scope="session")
def regressor_checkpoint(tiny_dataset, tmp_path_factory) -> str:
    out = str(tmp_path_factory.mktemp("regressor"))
    config = TrainConfig(dataset=tiny_dataset, out=out, model="regressor", preset="tiny", epochs=1, batch_size=4)
    return train_regressor(config, run_id="fixture").checkpoint
