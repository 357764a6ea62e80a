"""
Differentiable geometric primitives.

Conventions:
    * R = Rx(rx) @ Ry(ry) @ Rz(rz); rx is elevation, ry azimuth, rz in-plane rotation.
    * Camera frame is y-up with z along the principal axis. Images and volumes are
      stored with rows (and the volume H axis) pointing down, so their grid axes
      (W, H, D) carry (x, -y, z).
    * Image coordinates are normalized to [-1, 1] about the image center, pixel
      centers follow align_corners=False.
    * Torch tensors are channel-first and batched: images B x C x H x W, volumes
      B x C x D x H x W. Unbatched inputs are accepted and returned unbatched.
"""
import math
from numbers import Real
from typing import Optional, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, model_validator
from scipy.spatial.transform import Rotation

from .errors import DomainError, ShapeError

Number = Union[float, int]
TensorLike = Union[torch.Tensor, Number, np.ndarray]

SYMMETRY_STEP_DEG = 1.0
ORTHONORMAL_TOL = 1e-4


def _as_tensor(value: TensorLike, like: Optional[torch.Tensor] = None) -> torch.Tensor:
    if isinstance(value, torch.Tensor):
        return value
    if like is not None:
        return torch.as_tensor(value, dtype=like.dtype, device=like.device)
    return torch.as_tensor(value, dtype=torch.float64)


def rotation_x(angle: TensorLike) -> torch.Tensor:
    a = _as_tensor(angle)
    c, s = torch.cos(a), torch.sin(a)
    one, zero = torch.ones_like(a), torch.zeros_like(a)
    return torch.stack([
        torch.stack([one, zero, zero], -1),
        torch.stack([zero, c, -s], -1),
        torch.stack([zero, s, c], -1),
    ], -2)


def rotation_y(angle: TensorLike) -> torch.Tensor:
    a = _as_tensor(angle)
    c, s = torch.cos(a), torch.sin(a)
    one, zero = torch.ones_like(a), torch.zeros_like(a)
    return torch.stack([
        torch.stack([c, zero, s], -1),
        torch.stack([zero, one, zero], -1),
        torch.stack([-s, zero, c], -1),
    ], -2)


def rotation_z(angle: TensorLike) -> torch.Tensor:
    a = _as_tensor(angle)
    c, s = torch.cos(a), torch.sin(a)
    one, zero = torch.ones_like(a), torch.zeros_like(a)
    return torch.stack([
        torch.stack([c, -s, zero], -1),
        torch.stack([s, c, zero], -1),
        torch.stack([zero, zero, one], -1),
    ], -2)


def euler_to_rotation(rx: TensorLike, ry: TensorLike, rz: TensorLike) -> torch.Tensor:
    """
    Compose Rx(rx) @ Ry(ry) @ Rz(rz).

    Args:
        rx, ry, rz: Angles in radians, python floats or tensors of matching shape

    Returns:
        (..., 3, 3) rotation matrices, differentiable in the angles
    """
    like = next((a for a in (rx, ry, rz) if isinstance(a, torch.Tensor)), None)
    rx, ry, rz = (_as_tensor(a, like) for a in (rx, ry, rz))
    return rotation_x(rx) @ rotation_y(ry) @ rotation_z(rz)


def rotation_to_euler(matrix: np.ndarray) -> Tuple[float, float, float]:
    """Inverse of euler_to_rotation (intrinsic X-Y-Z angles)."""
    rx, ry, rz = Rotation.from_matrix(np.asarray(matrix, dtype=np.float64)).as_euler("XYZ")
    return float(rx), float(ry), float(rz)


class Pose(BaseModel):
    """Rigid object pose with the focal length used by the similarity warp."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    rx: float = 0.0
    ry: float = 0.0
    rz: float = 0.0
    tx: float = 0.0
    ty: float = 0.0
    tz: float = 1.0
    focal: float = 1.0

    def __init__(self, **data):
        tz = data.get("tz", 1.0)
        if isinstance(tz, Real) and not tz > 0:
            raise DomainError(f"object behind camera (tz={tz})")
        super().__init__(**data)

    @model_validator(mode="after")
    def _in_front_of_camera(self):
        if not self.tz > 0:
            raise ValueError(f"object behind camera (tz={self.tz})")
        return self

    @property
    def rotation(self) -> np.ndarray:
        return euler_to_rotation(self.rx, self.ry, self.rz).numpy()

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tz], dtype=np.float64)

    def as_vector(self) -> np.ndarray:
        return np.array([self.rx, self.ry, self.rz, self.tx, self.ty, self.tz], dtype=np.float64)

    @classmethod
    def from_vector(cls, vector, focal: float = 1.0) -> "Pose":
        rx, ry, rz, tx, ty, tz = (float(v) for v in vector)
        return cls(rx=rx, ry=ry, rz=rz, tx=tx, ty=ty, tz=tz, focal=focal)

    @classmethod
    def from_matrix(cls, rotation: np.ndarray, translation, focal: float = 1.0) -> "Pose":
        rx, ry, rz = rotation_to_euler(rotation)
        tx, ty, tz = (float(v) for v in translation)
        return cls(rx=rx, ry=ry, rz=rz, tx=tx, ty=ty, tz=tz, focal=focal)


# --- Layout helpers ---

def to_chw(image: np.ndarray) -> torch.Tensor:
    """H x W x C numpy image -> C x H x W float tensor."""
    return torch.from_numpy(np.ascontiguousarray(np.asarray(image).transpose(2, 0, 1)))


def to_hwc(image: torch.Tensor) -> np.ndarray:
    """C x H x W tensor -> H x W x C numpy array."""
    return image.detach().cpu().numpy().transpose(1, 2, 0)


def _batched(x: torch.Tensor, ndim: int) -> Tuple[torch.Tensor, bool]:
    if x.dim() == ndim - 1:
        return x.unsqueeze(0), True
    if x.dim() != ndim:
        raise ShapeError(f"expected a {ndim - 1}D or {ndim}D tensor, got shape {tuple(x.shape)}")
    return x, False


def _per_sample(value: TensorLike, batch: int, like: torch.Tensor) -> torch.Tensor:
    t = _as_tensor(value, like).to(dtype=like.dtype, device=like.device)
    return t.reshape(-1).expand(batch) if t.numel() == 1 else t.reshape(batch)


# --- 2D similarity warp ---

def _warp_theta(translation: torch.Tensor, rz: torch.Tensor, focal: torch.Tensor, inverse: bool) -> torch.Tensor:
    tx, ty, tz = translation.unbind(-1)
    c, s = torch.cos(rz), torch.sin(rz)
    if not inverse:
        # output g samples input at (tz/f) Rz(rz) g + b, grid y pointing down
        k = tz / focal
        row0 = torch.stack([k * c, -k * s, -c * tx - s * ty], -1)
        row1 = torch.stack([k * s, k * c, -s * tx + c * ty], -1)
    else:
        k = focal / tz
        row0 = torch.stack([k * c, k * s, k * tx], -1)
        row1 = torch.stack([-k * s, k * c, -k * ty], -1)
    return torch.stack([row0, row1], -2)


def _apply_warp(image, translation, rz, focal, inverse: bool) -> torch.Tensor:
    image, squeeze = _batched(image, 4)
    batch, _, height, width = image.shape
    if height != width:
        raise ShapeError(f"similarity warp expects a square image, got {height}x{width}")
    translation = _as_tensor(translation, image).to(image.dtype).reshape(-1, 3).expand(batch, 3)
    if (translation[:, 2].detach() <= 0).any():
        raise DomainError("object behind camera (tz <= 0)")
    rz = _per_sample(rz, batch, image)
    focal = _per_sample(focal, batch, image)
    theta = _warp_theta(translation, rz, focal, inverse)
    grid = F.affine_grid(theta, list(image.shape), align_corners=False)
    out = F.grid_sample(image, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    return out.squeeze(0) if squeeze else out


def similarity_warp(image: torch.Tensor, translation: TensorLike, rz: TensorLike, focal: TensorLike = 1.0) -> torch.Tensor:
    """
    Warp an image with [u, v] -> (f / tz) * (Rz [u, v] + [tx, ty]).

    Args:
        image: (B,) C x H x W square image, background 0
        translation: (B, 3) or (3,) translation (tx, ty, tz), tz > 0
        rz: In-plane rotation in radians, scalar or (B,)
        focal: Focal length in normalized units, scalar or (B,)

    Returns:
        Warped image of the same shape; out-of-bounds samples are 0
    """
    return _apply_warp(image, translation, rz, focal, inverse=False)


def inverse_similarity_warp(image: torch.Tensor, translation: TensorLike, rz: TensorLike, focal: TensorLike = 1.0) -> torch.Tensor:
    """Undo similarity_warp with the same parameters (up to resampling and cropping)."""
    return _apply_warp(image, translation, rz, focal, inverse=True)


def shift_depth(depth_rel: torch.Tensor, tz: TensorLike) -> torch.Tensor:
    """Relative depth (B x ...) to absolute depth by adding tz per sample (scalar tz broadcasts)."""
    tz = _as_tensor(tz, depth_rel)
    return depth_rel + tz.reshape(-1, *([1] * (depth_rel.dim() - 1)))


# --- 3D volume ---

_FLIP_Y = torch.tensor([1.0, -1.0, 1.0])


def transform_volume(volume: torch.Tensor, rotation: torch.Tensor) -> torch.Tensor:
    """
    Rigidly rotate a feature volume about its center by inverse warping.

    Output voxel at x is the trilinear sample of the input at R^T x; samples outside
    [-1, 1]^3 are 0.

    Args:
        volume: (B,) C x D x H x W cubic feature grid
        rotation: (B,) 3 x 3 rotation in the y-up camera frame

    Returns:
        Rotated volume, same shape as the input
    """
    volume, squeeze = _batched(volume, 5)
    batch, _, depth, height, width = volume.shape
    if not depth == height == width:
        raise ShapeError(f"feature volume must be cubic, got {depth}x{height}x{width}")
    rotation = _as_tensor(rotation, volume).to(volume.dtype).reshape(-1, 3, 3).expand(batch, 3, 3)
    flip = _FLIP_Y.to(dtype=volume.dtype, device=volume.device)
    inverse = flip[:, None] * rotation.transpose(-1, -2) * flip[None, :]
    theta = torch.cat([inverse, inverse.new_zeros(batch, 3, 1)], dim=-1)
    grid = F.affine_grid(theta, list(volume.shape), align_corners=False)
    out = F.grid_sample(volume, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    return out.squeeze(0) if squeeze else out


def project_volume(volume: torch.Tensor) -> torch.Tensor:
    """Collapse the depth axis into channels: C x D x H x W -> (C*D) x H x W."""
    if volume.dim() == 4:
        c, d, h, w = volume.shape
        return volume.reshape(c * d, h, w)
    if volume.dim() != 5:
        raise ShapeError(f"expected a 4D or 5D volume, got shape {tuple(volume.shape)}")
    b, c, d, h, w = volume.shape
    return volume.reshape(b, c * d, h, w)


# --- Pose error metrics ---

def _check_rotation(matrix: np.ndarray, name: str) -> np.ndarray:
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.shape != (3, 3):
        raise ShapeError(f"{name} must be 3x3, got {matrix.shape}")
    if not np.allclose(matrix @ matrix.T, np.eye(3), atol=ORTHONORMAL_TOL) or abs(np.linalg.det(matrix) - 1.0) > ORTHONORMAL_TOL:
        raise DomainError(f"{name} is not a proper rotation matrix")
    return matrix


def _angle_from_distance(distance: np.ndarray) -> np.ndarray:
    # ||Ra - Rb||_F = 2 sqrt(2) sin(theta / 2); exactly 0 for identical matrices
    return np.rad2deg(2.0 * np.arcsin(np.clip(distance / (2.0 * math.sqrt(2.0)), 0.0, 1.0)))


def rotation_error(r_pred: np.ndarray, r_gt: np.ndarray, symmetric: bool = False) -> float:
    """
    Geodesic rotation error in degrees.

    For symmetric categories the prediction may rotate freely about the ground-truth
    object's vertical (y) axis; the minimum is taken over a 1 degree grid.
    """
    r_pred = _check_rotation(r_pred, "R_pred")
    r_gt = _check_rotation(r_gt, "R_gt")
    if not symmetric:
        return float(_angle_from_distance(np.linalg.norm(r_pred - r_gt)))
    thetas = np.deg2rad(np.arange(0.0, 360.0, SYMMETRY_STEP_DEG))
    spins = rotation_y(torch.from_numpy(thetas)).numpy()
    candidates = np.einsum("ij,njk->nik", r_gt, spins)
    distances = np.linalg.norm(r_pred[None] - candidates, axis=(1, 2))
    return float(_angle_from_distance(distances).min())


def translation_error(t_pred, t_gt) -> float:
    return float(np.linalg.norm(np.asarray(t_pred, dtype=np.float64) - np.asarray(t_gt, dtype=np.float64)))


# --- Depth channel encodings ---

DEPTH_SCALE = 4.0


def encode_target_depth(depth_abs):
    """Absolute depth (scene units, 0 = invalid) -> normalized target channel."""
    return depth_abs / DEPTH_SCALE


def decode_target_depth(channel):
    return channel * DEPTH_SCALE


def encode_relative_depth(depth_abs, tz: float, depth_range: float):
    """Foreground depth relative to the object center, mapped to (0, 1]; background stays 0."""
    valid = depth_abs > 0
    encoded = 0.5 + (depth_abs - tz) / (2.0 * depth_range)
    if isinstance(encoded, torch.Tensor):
        return torch.where(valid, encoded.clamp(1e-3, 1.0), torch.zeros_like(encoded))
    return np.where(valid, np.clip(encoded, 1e-3, 1.0), 0.0)


def decode_relative_depth(channel, depth_range: float):
    """Generated depth channel -> depth relative to the object center (scene units)."""
    return (channel - 0.5) * 2.0 * depth_range
