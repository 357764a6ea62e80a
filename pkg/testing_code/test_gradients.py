import numpy as np
import pytest
import torch
from torch.autograd import gradcheck

from app.config import EnergySpec
from app.features import build_extractor
from app.fitting import EnergyFunction
from app.geometry import euler_to_rotation, similarity_warp, transform_volume

from conftest import make_model

# bilinear sampling is piecewise linear, a small step keeps the difference off the kinks
EPS = 1e-6
RTOL = 1e-3
ATOL = 1e-6


def _random_pose(rng: np.random.Generator) -> torch.Tensor:
    return torch.tensor([rng.uniform(-0.5, 0.5), rng.uniform(-1.0, 1.0), rng.uniform(-0.5, 0.5),
                         rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), rng.uniform(0.9, 1.3)],
                        dtype=torch.float64)


def _smooth_image(rng: np.random.Generator, size: int = 16, channels: int = 3) -> torch.Tensor:
    coarse = torch.tensor(rng.uniform(0.0, 1.0, (1, channels, 4, 4)), dtype=torch.float64)
    return torch.nn.functional.interpolate(coarse, size=(size, size), mode="bicubic", align_corners=False)[0]


def _check_warp(seed: int):
    rng = np.random.default_rng(seed)
    image = _smooth_image(rng)
    pose = _random_pose(rng)
    translation = pose[3:6].clone().requires_grad_(True)
    rz = pose[2].clone().requires_grad_(True)
    focal = torch.tensor(rng.uniform(0.8, 1.2), dtype=torch.float64, requires_grad=True)
    assert gradcheck(lambda t, r, f: similarity_warp(image, t, r, f), (translation, rz, focal),
                     eps=EPS, atol=ATOL, rtol=RTOL)


def _check_volume(seed: int):
    rng = np.random.default_rng(seed)
    volume = torch.tensor(rng.uniform(0.0, 1.0, (2, 6, 6, 6)), dtype=torch.float64)
    angles = torch.tensor(rng.uniform(-0.6, 0.6, 3), dtype=torch.float64, requires_grad=True)
    assert gradcheck(lambda a: transform_volume(volume, euler_to_rotation(a[0], a[1], a[2])), (angles,),
                     eps=EPS, atol=ATOL, rtol=RTOL)


def _check_energy(model, spec: EnergySpec, seed: int):
    rng = np.random.default_rng(seed)
    fn = EnergyFunction(model.generator, spec, build_extractor(spec, model.encoder))
    with torch.no_grad():
        target = model.generator.generate_batch(_random_pose(rng).unsqueeze(0),
                                                torch.tensor(rng.normal(size=(1, 4)), dtype=torch.float64))
    pose = _random_pose(rng).unsqueeze(0).requires_grad_(True)
    z = torch.tensor(rng.normal(size=(1, 4)), dtype=torch.float64, requires_grad=True)
    assert gradcheck(lambda p, c: fn(target, p, c), (pose, z), eps=EPS, atol=ATOL, rtol=RTOL)


ENERGIES = [
    EnergySpec(kind="l1", regularizer_weight=0.01),
    EnergySpec(kind="l2", regularizer_weight=0.01),
    EnergySpec(kind="ssim", regularizer_weight=0.01),
    EnergySpec(kind="perceptual", extractor="encoder", regularizer_weight=0.01),
]


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_similarity_warp_gradients(seed):
    _check_warp(seed)


@pytest.mark.parametrize("seed", [0, 1])
def test_transform_volume_gradients(seed):
    _check_volume(seed)


@pytest.mark.parametrize("spec", ENERGIES, ids=lambda s: s.kind)
def test_energy_gradients(tiny_model, spec):
    _check_energy(tiny_model, spec, seed=3)


def test_rgbd_energy_gradients(rgbd_model):
    _check_energy(rgbd_model, EnergySpec(kind="l2", regularizer_weight=0.01, depth_mask="none"), seed=4)


@pytest.mark.slow
def test_gradient_suite_over_many_states():
    model = make_model()
    for seed in range(50):
        _check_warp(100 + seed)
        _check_volume(200 + seed)
        for spec in ENERGIES:
            _check_energy(model, spec, 300 + seed)
