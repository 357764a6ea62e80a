import math

import numpy as np
import pytest
import torch
from pydantic import ValidationError
from scipy.spatial.transform import Rotation

from app.errors import DomainError, ShapeError
from app.geometry import (Pose, decode_relative_depth, encode_relative_depth, euler_to_rotation,
                          inverse_similarity_warp, project_volume, rotation_error, rotation_to_euler, rotation_y,
                          shift_depth, similarity_warp, transform_volume, translation_error)


def _blob(size=16, channels=3):
    y, x = torch.meshgrid(torch.linspace(-1, 1, size, dtype=torch.float64),
                          torch.linspace(-1, 1, size, dtype=torch.float64), indexing="ij")
    base = torch.exp(-((x - 0.2) ** 2 + (y + 0.1) ** 2) / 0.2)
    return torch.stack([base * (c + 1) / channels for c in range(channels)])


def test_rotation_is_orthonormal():
    r = euler_to_rotation(0.3, -1.2, 2.5).numpy()
    assert np.allclose(r @ r.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(r) == pytest.approx(1.0)


def test_euler_round_trip():
    rx, ry, rz = 0.4, -0.7, 1.9
    assert rotation_to_euler(euler_to_rotation(rx, ry, rz).numpy()) == pytest.approx((rx, ry, rz))


def test_batched_rotation_is_differentiable():
    angles = torch.tensor([0.1, 0.5], dtype=torch.float64, requires_grad=True)
    r = euler_to_rotation(angles, angles, angles)
    assert r.shape == (2, 3, 3)
    r.sum().backward()
    assert torch.isfinite(angles.grad).all()


def test_pose_rejects_object_behind_camera():
    with pytest.raises(DomainError, match="behind camera"):
        Pose(tz=0.0)
    with pytest.raises(DomainError):
        Pose(rx=0.2, tz=-1.5)
    # parsed records still fail pydantic validation
    with pytest.raises(ValidationError):
        Pose.model_validate({"tz": 0.0})
    pose = Pose.from_vector([0.1, 0.2, 0.3, 0.0, 0.0, 2.0], focal=1.5)
    assert pose.focal == 1.5
    assert pose.as_vector()[5] == 2.0


def test_identity_warp_is_a_no_op():
    image = _blob()
    out = similarity_warp(image, [0.0, 0.0, 1.0], 0.0, 1.0)
    assert torch.allclose(out, image, atol=1e-10)


def test_quarter_turn_warp_inverts_exactly():
    image = _blob()
    warped = similarity_warp(image, [0.0, 0.0, 1.0], math.pi / 2)
    assert not torch.allclose(warped, image)
    restored = inverse_similarity_warp(warped, [0.0, 0.0, 1.0], math.pi / 2)
    assert torch.allclose(restored, image, atol=1e-8)


def test_warp_scales_with_depth():
    # an object twice as far appears half as large
    image = torch.zeros(1, 16, 16, dtype=torch.float64)
    image[:, 4:12, 4:12] = 1.0
    far = similarity_warp(image, [0.0, 0.0, 2.0], 0.0)
    assert float(far.sum()) == pytest.approx(float(image.sum()) / 4, rel=0.05)


def test_warp_batch_and_domain_errors():
    batch = torch.stack([_blob(), _blob()])
    out = similarity_warp(batch, torch.tensor([[0.0, 0.0, 1.0], [0.1, 0.0, 1.2]], dtype=torch.float64),
                          torch.tensor([0.0, 0.3], dtype=torch.float64))
    assert out.shape == batch.shape
    with pytest.raises(DomainError):
        similarity_warp(_blob(), [0.0, 0.0, 0.0], 0.0)
    with pytest.raises(ShapeError):
        similarity_warp(torch.zeros(3, 16, 8), [0.0, 0.0, 1.0], 0.0)


def test_volume_rotations_compose():
    torch.manual_seed(0)
    volume = torch.rand(2, 8, 8, 8, dtype=torch.float64)
    quarter = rotation_y(torch.tensor(math.pi / 2, dtype=torch.float64))
    half = rotation_y(torch.tensor(math.pi, dtype=torch.float64))
    twice = transform_volume(transform_volume(volume, quarter), quarter)
    assert torch.allclose(twice, transform_volume(volume, half), atol=1e-8)
    assert torch.allclose(transform_volume(volume, torch.eye(3, dtype=torch.float64)), volume, atol=1e-10)


def test_volume_must_be_cubic():
    with pytest.raises(ShapeError):
        transform_volume(torch.zeros(1, 4, 8, 8), torch.eye(3))


def test_rotation_error():
    identity = np.eye(3)
    assert rotation_error(identity, identity) == pytest.approx(0.0, abs=1e-6)
    tilted = euler_to_rotation(math.radians(30), 0.0, 0.0).numpy()
    assert rotation_error(tilted, identity) == pytest.approx(30.0)


def test_symmetric_rotation_error_ignores_spin():
    spun = euler_to_rotation(0.0, math.radians(40), 0.0).numpy()
    assert rotation_error(spun, np.eye(3)) == pytest.approx(40.0)
    assert rotation_error(spun, np.eye(3), symmetric=True) == pytest.approx(0.0, abs=1e-3)


def test_rotation_error_rejects_non_rotations():
    with pytest.raises(DomainError):
        rotation_error(2 * np.eye(3), np.eye(3))
    with pytest.raises(ShapeError):
        rotation_error(np.eye(2), np.eye(3))


def test_translation_error():
    assert translation_error([0, 0, 1], [0, 0.3, 1.4]) == pytest.approx(0.5)


def test_shift_depth_broadcasts():
    depth = torch.zeros(2, 4, 4, dtype=torch.float64)
    shifted = shift_depth(depth, torch.tensor([1.0, 2.0], dtype=torch.float64))
    assert shifted[0].eq(1.0).all() and shifted[1].eq(2.0).all()
    assert shift_depth(depth, 0.5).eq(0.5).all()


def test_relative_depth_encoding_round_trip():
    depth = torch.tensor([[0.0, 0.8, 1.0, 1.3]], dtype=torch.float64)
    encoded = encode_relative_depth(depth, tz=1.0, depth_range=1.0)
    assert encoded[0, 0] == 0.0
    assert torch.allclose(decode_relative_depth(encoded[0, 1:], 1.0), depth[0, 1:] - 1.0)


def _pixel_centers(size):
    return (2 * np.arange(size) + 1) / size - 1


def _bilinear(image, row, col):
    channels, height, width = image.shape
    r0, c0 = math.floor(row), math.floor(col)
    out = np.zeros(channels)
    for r, wr in ((r0, r0 + 1 - row), (r0 + 1, row - r0)):
        for c, wc in ((c0, c0 + 1 - col), (c0 + 1, col - c0)):
            if 0 <= r < height and 0 <= c < width:
                out += wr * wc * image[:, r, c]
    return out


def _warp_oracle(image, translation, rz, focal):
    # output point q (y up) shows the input point p with q = (f / tz) (Rz p + t)
    tx, ty, tz = translation
    c, s = math.cos(rz), math.sin(rz)
    size = image.shape[-1]
    centers = _pixel_centers(size)
    out = np.zeros_like(image)
    for i in range(size):
        for j in range(size):
            qx, qy = centers[j] * tz / focal - tx, -centers[i] * tz / focal - ty
            px, py = c * qx + s * qy, -s * qx + c * qy
            out[:, i, j] = _bilinear(image, ((1 - py) * size - 1) / 2, ((px + 1) * size - 1) / 2)
    return out


@pytest.mark.parametrize("translation,rz,focal", [
    ((0.1, -0.2, 1.3), 0.7, 1.0),
    ((-0.05, 0.0, 0.8), -2.1, 1.2),
    ((0.0, 0.3, 2.0), math.pi / 3, 1.5),
])
def test_warp_matches_per_pixel_oracle(translation, rz, focal):
    image = _blob(size=12, channels=2)
    out = similarity_warp(image, list(translation), rz, focal).numpy()
    assert np.allclose(out, _warp_oracle(image.numpy(), translation, rz, focal), atol=1e-10)


def test_warp_at_twice_the_focal_depth_halves_coordinates():
    size = 64
    centers = torch.from_numpy(_pixel_centers(size))
    y, x = torch.meshgrid(-centers, centers, indexing="ij")
    spot = torch.exp(-((x - 0.4) ** 2 + y ** 2) / 0.01)[None]
    out = similarity_warp(spot, [0.0, 0.0, 2.0], 0.0, 1.0)[0]
    weight = out / out.sum()
    assert float((weight * x).sum()) == pytest.approx(0.2, abs=1e-2)
    assert float((weight * y).sum()) == pytest.approx(0.0, abs=1e-2)


def test_half_turn_warp_is_an_involution():
    image = _blob()
    once = similarity_warp(image, [0.0, 0.0, 1.0], math.pi)
    assert torch.allclose(once, torch.flip(image, dims=(-2, -1)), atol=1e-10)
    assert torch.allclose(similarity_warp(once, [0.0, 0.0, 1.0], math.pi), image, atol=1e-10)


def test_quarter_turn_warp_rotates_the_image_counterclockwise():
    image = _blob()
    out = similarity_warp(image, [0.0, 0.0, 1.0], math.pi / 2)
    assert torch.allclose(out, torch.rot90(image, 1, dims=(-2, -1)), atol=1e-10)


def test_volume_rotation_composes_with_random_rotations():
    size = 24
    centers = torch.from_numpy(_pixel_centers(size))
    z, y, x = torch.meshgrid(centers, centers, centers, indexing="ij")
    volume = torch.exp(-((x - 0.2) ** 2 + (y + 0.1) ** 2 + (z - 0.1) ** 2) / (2 * 0.45 ** 2))[None]
    interior = (x ** 2 + y ** 2 + z ** 2) < 0.25
    for seed in range(3):
        ra, rb = (torch.from_numpy(m) for m in Rotation.random(2, random_state=seed).as_matrix())
        twice = transform_volume(transform_volume(volume, ra), rb)
        once = transform_volume(volume, rb @ ra)
        assert float((twice - once)[0][interior].abs().max()) < 2e-2


def test_project_volume_stacks_depth_slices_into_channels():
    volume = torch.rand(2, 3, 4, 5, 5)
    flat = project_volume(volume)
    assert flat.shape == (2, 12, 5, 5)
    for c in range(3):
        for d in range(4):
            assert torch.equal(flat[:, c * 4 + d], volume[:, c, d])
    assert torch.equal(project_volume(volume[0]), flat[0])
    with pytest.raises(ShapeError):
        project_volume(torch.zeros(4, 4))


def _rx(a):
    return np.array([[1, 0, 0], [0, math.cos(a), -math.sin(a)], [0, math.sin(a), math.cos(a)]])


def _ry(a):
    return np.array([[math.cos(a), 0, math.sin(a)], [0, 1, 0], [-math.sin(a), 0, math.cos(a)]])


def _rz(a):
    return np.array([[math.cos(a), -math.sin(a), 0], [math.sin(a), math.cos(a), 0], [0, 0, 1]])


def test_euler_matches_matrix_product():
    assert np.allclose(euler_to_rotation(0.0, 0.0, math.pi).numpy(), np.diag([-1.0, -1.0, 1.0]), atol=1e-12)
    rng = np.random.default_rng(4)
    for rx, ry, rz in rng.uniform(-math.pi, math.pi, size=(10, 3)):
        expected = _rx(rx) @ _ry(ry) @ _rz(rz)
        assert np.allclose(euler_to_rotation(rx, ry, rz).numpy(), expected, atol=1e-12)


def test_rotation_error_is_exactly_zero_for_identical_rotations():
    rng = np.random.default_rng(5)
    for angles in rng.uniform(-math.pi, math.pi, size=(50, 3)):
        r = euler_to_rotation(*angles).numpy()
        assert rotation_error(r, r) == 0.0
        assert rotation_error(r, r, symmetric=True) == 0.0


def test_rotation_error_is_symmetric_and_invariant():
    a, b, q = Rotation.random(3, random_state=6).as_matrix()
    error = rotation_error(a, b)
    assert rotation_error(b, a) == pytest.approx(error, abs=1e-9)
    assert rotation_error(q @ a, q @ b) == pytest.approx(error, abs=1e-6)
    assert rotation_error(a @ q, b @ q) == pytest.approx(error, abs=1e-6)
    assert rotation_error(a, a @ _rx(math.radians(25.0))) == pytest.approx(25.0, abs=1e-6)
