import math
import os

import pytest
import torch

from app.config import ArchitectureDescriptor
from app.errors import ConfigurationError, ShapeError
from app.generator import (ConditionalVAE, adain, encode, generate, generate_3d, generate_no3d, load_model,
                           save_model, weights_checksum)
from app.geometry import Pose

from conftest import make_model, tiny_descriptor


def test_adain_sets_channel_statistics():
    torch.manual_seed(0)
    features = torch.randn(2, 3, 5, 5, 5, dtype=torch.float64) * 4 + 7
    scale = torch.tensor([[1.0, 2.0, 0.5], [3.0, 1.0, 1.0]], dtype=torch.float64)
    shift = torch.tensor([[0.0, -1.0, 2.0], [1.0, 1.0, 1.0]], dtype=torch.float64)
    out = adain(features, scale, shift)
    assert torch.allclose(out.mean(dim=(2, 3, 4)), shift, atol=1e-10)
    assert torch.allclose(out.std(dim=(2, 3, 4), unbiased=False), scale, atol=1e-4)


def test_generate_shapes_and_range(tiny_model):
    z = torch.randn(3, 4, dtype=torch.float64)
    pose = torch.tensor([[0.2, 1.0, 0.1, 0.05, -0.05, 1.1]] * 3, dtype=torch.float64)
    images = tiny_model.generator.generate_batch(pose, z)
    assert images.shape == (3, 3, 16, 16)
    assert images.min() >= 0.0 and images.max() <= 1.0


def test_identity_warp_matches_out_of_plane_render(tiny_model):
    z = torch.randn(1, 4, dtype=torch.float64)
    full = generate(Pose(rx=0.3, ry=2.0), z, tiny_model.generator)
    out_of_plane = generate_3d(0.3, 2.0, z, tiny_model.generator)
    assert torch.allclose(full, out_of_plane, atol=1e-10)


def test_azimuth_changes_the_image(tiny_model):
    z = torch.randn(1, 4, dtype=torch.float64)
    a = generate_3d(0.0, 0.0, z, tiny_model.generator)
    b = generate_3d(0.0, math.pi / 2, z, tiny_model.generator)
    assert not torch.allclose(a, b)


def test_latent_size_is_checked(tiny_model):
    with pytest.raises(ShapeError):
        generate(Pose(), torch.zeros(1, 7, dtype=torch.float64), tiny_model.generator)


def test_no3d_variant():
    model = make_model(variant="no3D")
    z = torch.randn(2, 4, dtype=torch.float64)
    out = generate_no3d(torch.tensor([[0.1, 0.2, 0.0, 0.0, 0.0, 1.0]] * 2, dtype=torch.float64), z, model.generator)
    assert out.shape == (2, 3, 16, 16)
    with pytest.raises(ConfigurationError):
        generate_3d(0.0, 0.0, z, model.generator)


def test_style_split_needs_even_latent():
    with pytest.raises(ConfigurationError):
        tiny_descriptor(latent_dim=5, style_split=True)
    assert tiny_descriptor(latent_dim=6, style_split=True).style_split


def test_encoder_returns_positive_sigma(tiny_model):
    mu, sigma = encode(torch.rand(2, 3, 16, 16, dtype=torch.float64), tiny_model.encoder)
    assert mu.shape == sigma.shape == (2, 4)
    assert (sigma > 0).all()
    with pytest.raises(ShapeError):
        encode(torch.rand(1, 3, 8, 8, dtype=torch.float64), tiny_model.encoder)


def test_checkpoint_round_trip(tmp_path):
    torch.manual_seed(1)
    vae = ConditionalVAE(tiny_descriptor())
    path = str(tmp_path / "model.pt")
    save_model(path, vae, {"category": "mug", "depth_range": 0.5}, {"train": {"epochs": 1}})

    loaded = load_model(path)
    assert loaded.descriptor == vae.descriptor
    assert loaded.summary["category"] == "mug"
    assert loaded.depth_range == 0.5
    assert loaded.config == {"train": {"epochs": 1}}
    assert weights_checksum(loaded.generator) == weights_checksum(vae.generator)
    assert not any(p.requires_grad for p in loaded.generator.parameters())

    z = torch.randn(1, 4)
    vae.eval()
    expected = generate(Pose(rx=0.2), z, vae.generator)
    assert torch.equal(generate(Pose(rx=0.2), z, loaded.generator), expected)


def test_bad_checkpoints_are_configuration_errors(tmp_path):
    with pytest.raises(ConfigurationError):
        load_model(str(tmp_path / "missing.pt"))
    corrupt = tmp_path / "corrupt.pt"
    corrupt.write_bytes(b"not a checkpoint")
    with pytest.raises(ConfigurationError):
        load_model(str(corrupt))


def test_descriptor_mismatch_is_rejected(tmp_path):
    vae = ConditionalVAE(tiny_descriptor())
    path = str(tmp_path / "model.pt")
    save_model(path, vae)
    payload = torch.load(path, weights_only=True)
    other = ArchitectureDescriptor.from_preset("tiny", latent_dim=8)
    payload["descriptor"] = other.model_dump_json()
    torch.save(payload, path)
    with pytest.raises(ConfigurationError):
        load_model(path)
    assert os.path.exists(path)


def test_adain_maps_a_constant_channel_to_its_shift():
    features = torch.randn(1, 2, 4, 4, 4, dtype=torch.float64)
    features[:, 1] = 3.5
    scale = torch.tensor([[2.0, 5.0]], dtype=torch.float64)
    shift = torch.tensor([[0.0, -0.7]], dtype=torch.float64)
    out = adain(features, scale, shift)
    assert torch.all(torch.isfinite(out))
    assert torch.equal(out[:, 1], torch.full_like(out[:, 1], -0.7))


def test_generation_is_bit_identical_on_repeat(tiny_model):
    z = torch.randn(2, 4, dtype=torch.float64)
    pose = torch.tensor([[0.4, -1.1, 0.3, 0.02, 0.0, 1.2]] * 2, dtype=torch.float64)
    first = tiny_model.generator.generate_batch(pose, z)
    assert torch.equal(tiny_model.generator.generate_batch(pose, z), first)
    assert torch.equal(generate_3d(0.4, -1.1, z, tiny_model.generator), generate_3d(0.4, -1.1, z, tiny_model.generator))
