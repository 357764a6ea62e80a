import numpy as np
import pytest
import torch

from app.config import PerturbConfig
from app.errors import ConfigurationError
from app.perturbations import augment, object_box, occlude, perturb, shift


def _object(channels=3):
    image = torch.zeros(channels, 32, 32)
    image[:, 8:24, 8:24] = 0.5
    return image


def test_zero_magnitude_returns_a_copy():
    image = _object()
    for kind in ("brightness", "occlusion", "translation"):
        out = perturb(image, kind, 0.0)
        assert torch.equal(out, image)
        assert out is not image


def test_invalid_arguments():
    with pytest.raises(ConfigurationError):
        perturb(_object(), "blur", 0.5)
    with pytest.raises(ConfigurationError):
        perturb(_object(), "brightness", 1.5)
    with pytest.raises(ConfigurationError):
        perturb(_object(), "occlusion", -0.1)


def test_brightness_scales_color_only():
    image = _object(channels=4)
    image[3] = 0.3
    out = perturb(image, "brightness", 1.0, seed=1, config=PerturbConfig(brightness_scale=0.5))
    gain = float(out[0, 16, 16] / image[0, 16, 16])
    assert gain in (pytest.approx(0.5), pytest.approx(1.5))
    assert torch.equal(out[3], image[3])
    assert out.max() <= 1.0


def test_occlusion_covers_requested_fraction_of_box():
    image = _object()
    out = occlude(image, 0.25, np.random.default_rng(0))
    removed = int(((image != 0) & (out == 0)).any(dim=0).sum())
    assert 0.15 * 256 <= removed <= 0.35 * 256
    assert object_box(image) == (8, 24, 8, 24)


def test_shift_moves_content_with_zero_fill():
    image = torch.zeros(1, 8, 8)
    image[0, 2, 3] = 1.0
    out = shift(image, 1, -2)
    assert out[0, 3, 1] == 1.0
    assert out.sum() == 1.0
    assert shift(image, 8, 0).sum() == 0.0


def test_translation_distance_follows_magnitude():
    image = _object()
    out = perturb(image, "translation", 1.0, seed=3, config=PerturbConfig(translation_scale=0.25))
    r0, r1, c0, c1 = object_box(out)
    moved = np.hypot(r0 - 8, c0 - 8)
    assert moved == pytest.approx(8.0, abs=1.0)


def test_perturbations_are_seeded():
    image = _object()
    a = perturb(image, "occlusion", 0.6, seed=7)
    b = perturb(image, "occlusion", 0.6, seed=7)
    assert torch.equal(a, b)


def test_augment_keeps_shape_and_range():
    image = _object()
    out = augment(image, np.random.default_rng(0))
    assert out.shape == image.shape
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_default_brightness_range_is_forty_percent():
    image = _object()
    gains = set()
    for seed in range(20):
        out = perturb(image, "brightness", 1.0, seed=seed)
        gains.add(round(float(out[0, 16, 16] / image[0, 16, 16]), 6))
    assert gains == {0.6, 1.4}
    half = perturb(image, "brightness", 0.5, seed=0)
    assert float(half[0, 16, 16] / image[0, 16, 16]) in (pytest.approx(0.8), pytest.approx(1.2))


def test_occlusion_of_one_fifth_stays_within_quantization_tolerance():
    image = _object()
    for seed in range(50):
        out = perturb(image, "occlusion", 0.2, seed=seed)
        removed = int(((image != 0) & (out == 0)).any(dim=0).sum())
        assert 0.15 * 256 <= removed <= 0.25 * 256
