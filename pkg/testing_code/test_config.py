import json

import pytest
from pydantic import ValidationError

from app.config import (ArchitectureDescriptor, FitConfig, PerturbConfig, RenderConfig, RunConfig, TrainConfig,
                        load_run_config)
from app.errors import ConfigurationError


def test_defaults_resolve():
    config = load_run_config()
    assert config.fit.n_restarts == 16
    assert config.energy.kind == "perceptual"
    assert config.eval.rotation_thresholds[:3] == [0.0, 5.0, 10.0]


def test_flat_keys_route_to_every_section(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"seed": 7, "kind": "L1", "n_restarts": 4}))
    config = load_run_config(str(path), {"n_restarts": 2, "epochs": None})
    assert config.render.seed == config.train.seed == config.fit.seed == 7
    assert config.energy.kind == "l1"
    assert config.fit.n_restarts == 2
    assert config.train.epochs == TrainConfig().epochs


def test_bad_config_files(tmp_path):
    with pytest.raises(ConfigurationError, match="not found"):
        load_run_config(str(tmp_path / "missing.json"))
    nested = tmp_path / "nested.json"
    nested.write_text(json.dumps({"fit": {"n_restarts": 3}}))
    with pytest.raises(ConfigurationError):
        load_run_config(str(nested))
    broken = tmp_path / "broken.json"
    broken.write_text("{")
    with pytest.raises(ConfigurationError):
        load_run_config(str(broken))


def test_unknown_and_invalid_values():
    with pytest.raises(ConfigurationError, match="restart_count"):
        RunConfig().apply({"restart_count": 3})
    with pytest.raises(ConfigurationError):
        RunConfig().apply({"n_restarts": 0})
    with pytest.raises(ConfigurationError):
        RunConfig().apply({"kl_weight": float("nan")})


def test_presets_fix_the_image_size():
    assert ArchitectureDescriptor.from_preset("tiny").image_size == 16
    assert ArchitectureDescriptor.from_preset("default").image_size == 64
    with pytest.raises(ConfigurationError):
        ArchitectureDescriptor.from_preset("tiny", image_size=64)
    with pytest.raises(ConfigurationError):
        ArchitectureDescriptor.from_preset("huge")


def test_train_config_descriptor():
    descriptor = TrainConfig(preset="tiny", modality="rgbd", variant="noVAE", latent_dim=6).descriptor(16)
    assert descriptor.out_channels == 4
    assert descriptor.variant == "full"
    assert descriptor.latent_dim == 6


def test_render_and_fit_share_one_camera():
    with pytest.raises(ValidationError, match="focal"):
        RunConfig(render=RenderConfig(focal=1.5))
    with pytest.raises(ValidationError, match="ref_depth"):
        RunConfig(fit=FitConfig(ref_depth=2.0))
    config = RunConfig().apply({"focal": 1.5, "ref_depth": 2.0})
    assert config.render.focal == config.fit.focal == 1.5
    assert config.render.ref_depth == config.fit.ref_depth == 2.0


def test_default_brightness_scale_is_forty_percent():
    assert PerturbConfig().brightness_scale == 0.4
    assert load_run_config(overrides={"brightness_scale": 0.2}).perturb.brightness_scale == 0.2
