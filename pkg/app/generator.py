"""
Pose-aware image generator G(R, T, z) = W(T, Rz) o G3D(Rx, Ry, z) and its encoder.

G3D builds a style-conditioned 3D feature volume from a learned constant, rotates it
by Rx @ Ry, flattens the depth axis into channels, mixes them with a 1x1 convolution
and decodes the map to an image. Translation and in-plane rotation are applied
analytically by the similarity warp. The `no3D` variant replaces the volume path by
concatenating the pose angles to z and decoding with 2D convolutions only.
"""
import hashlib
import json
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ArchitectureDescriptor
from .errors import ConfigurationError, ShapeError
from .geometry import Pose, euler_to_rotation, project_volume, similarity_warp, transform_volume

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "posesynth-checkpoint/1"
ADAIN_EPS = 1e-5
TRAINED_ELEVATION_DEG = (-30.0, 60.0)


def _activation(name: str) -> nn.Module:
    return nn.SiLU() if name == "silu" else nn.LeakyReLU(0.2)


def adain(features: torch.Tensor, scale: torch.Tensor, shift: torch.Tensor, eps: float = ADAIN_EPS) -> torch.Tensor:
    """
    Standardize every channel over its spatial axes, then apply a per-channel affine.

    Args:
        features: B x C x (spatial...) tensor
        scale, shift: B x C modulation

    Returns:
        Tensor shaped like `features`
    """
    dims = tuple(range(2, features.dim()))
    mean = features.mean(dim=dims, keepdim=True)
    var = features.var(dim=dims, keepdim=True, unbiased=False)
    normalized = (features - mean) / torch.sqrt(var + eps)
    view = scale.shape + (1,) * len(dims)
    return normalized * scale.reshape(view) + shift.reshape(view)


class AdaIN(nn.Module):
    """Adaptive instance normalization driven by an affine map of the style code."""

    def __init__(self, num_features: int, style_dim: int, eps: float = ADAIN_EPS):
        super().__init__()
        self.num_features = num_features
        self.eps = eps
        self.affine = nn.Linear(style_dim, 2 * num_features)
        nn.init.normal_(self.affine.weight, std=0.02)
        with torch.no_grad():
            self.affine.bias[:num_features].fill_(1.0)
            self.affine.bias[num_features:].zero_()

    def forward(self, features: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        scale, shift = self.affine(style).chunk(2, dim=-1)
        return adain(features, scale, shift, self.eps)


class PoseAwareGenerator(nn.Module):
    """G3D plus the analytic warp. Weights are frozen outside of training."""

    def __init__(self, descriptor: ArchitectureDescriptor):
        super().__init__()
        self.descriptor = descriptor
        d = descriptor.latent_dim
        style3d = style2d = d // 2 if descriptor.style_split else d
        self.act = _activation(descriptor.activation)
        side = descriptor.volume_side

        if descriptor.variant == "full":
            channels = descriptor.dec3d_channels
            self.const = nn.Parameter(torch.randn(1, channels[0], *(descriptor.const_side,) * 3) * 0.02)
            self.const_norm = AdaIN(channels[0], style3d)
            self.up3d = nn.ModuleList(
                nn.ConvTranspose3d(cin, cout, kernel_size=4, stride=2, padding=1)
                for cin, cout in zip(channels[:-1], channels[1:])
            )
            self.norm3d = nn.ModuleList(AdaIN(cout, style3d) for cout in channels[1:])
            self.mixer = nn.Conv2d(descriptor.volume_channels * side, descriptor.mixer_channels, kernel_size=1)
        else:
            # pose enters as (sin, cos) of elevation and azimuth
            self.fc = nn.Linear(d + 4, descriptor.mixer_channels * side * side)

        dec2d = [descriptor.mixer_channels] + descriptor.dec2d_channels
        self.up2d = nn.ModuleList(
            nn.ConvTranspose2d(cin, cout, kernel_size=4, stride=2, padding=1)
            for cin, cout in zip(dec2d[:-1], dec2d[1:])
        )
        self.norm2d = nn.ModuleList(AdaIN(cout, style2d) for cout in dec2d[1:])
        self.to_image = nn.Conv2d(dec2d[-1], descriptor.out_channels, kernel_size=3, padding=1)
        self.elevation_range = tuple(math.radians(a) for a in TRAINED_ELEVATION_DEG)
        self._warned_extrapolation = False

    # --- internals ---

    def _styles(self, z: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        if self.descriptor.style_split:
            half = self.descriptor.latent_dim // 2
            return z[:, :half], z[:, half:]
        return z, z

    def _check_latent(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() == 1:
            z = z.unsqueeze(0)
        if z.shape[-1] != self.descriptor.latent_dim:
            raise ShapeError(f"latent code has {z.shape[-1]} dims, model expects {self.descriptor.latent_dim}")
        return z

    def _warn_extrapolation(self, rx: torch.Tensor):
        if self._warned_extrapolation:
            return
        low, high = self.elevation_range
        values = rx.detach()
        if (values < low - 1e-6).any() or (values > high + 1e-6).any():
            self._warned_extrapolation = True
            logger.warning("Elevation outside the trained range [%.1f, %.1f] deg; generation is extrapolating",
                           math.degrees(low), math.degrees(high))

    def build_volume(self, z: torch.Tensor) -> torch.Tensor:
        """Dec3D: latent code -> B x C x D x H x W feature volume (unrotated)."""
        style3d, _ = self._styles(z)
        h = self.const.expand(z.shape[0], *self.const.shape[1:])
        h = self.act(self.const_norm(h, style3d))
        for conv, norm in zip(self.up3d, self.norm3d):
            h = self.act(norm(conv(h), style3d))
        return h

    def decode_2d(self, feature_map: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        """Dec2D: B x C x h x w map -> B x out_channels x H x W image in [0, 1]."""
        _, style2d = self._styles(z)
        h = feature_map
        for conv, norm in zip(self.up2d, self.norm2d):
            h = self.act(norm(conv(h), style2d))
        return torch.sigmoid(self.to_image(h))

    # --- public ---

    def render_3d(self, rx: torch.Tensor, ry: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        """G3D(Rx, Ry, z) for batched angles (B,) and codes (B, d)."""
        z = self._check_latent(z)
        rx = rx.reshape(-1).expand(z.shape[0]) if rx.numel() == 1 else rx.reshape(-1)
        ry = ry.reshape(-1).expand(z.shape[0]) if ry.numel() == 1 else ry.reshape(-1)
        self._warn_extrapolation(rx)
        if self.descriptor.variant == "no3D":
            pose = torch.stack([torch.sin(rx), torch.cos(rx), torch.sin(ry), torch.cos(ry)], dim=-1)
            side = self.descriptor.volume_side
            h = self.fc(torch.cat([z, pose.to(z.dtype)], dim=-1))
            h = self.act(h.reshape(z.shape[0], self.descriptor.mixer_channels, side, side))
            return self.decode_2d(h, z)
        volume = self.build_volume(z)
        rotation = euler_to_rotation(rx, ry, torch.zeros_like(rx)).to(volume.dtype)
        volume = transform_volume(volume, rotation)
        h = self.act(self.mixer(project_volume(volume)))
        return self.decode_2d(h, z)

    def generate_batch(self, pose_vec: torch.Tensor, z: torch.Tensor, focal: Union[float, torch.Tensor] = 1.0) -> torch.Tensor:
        """
        G(R, T, z) for a batch.

        Args:
            pose_vec: B x 6 (rx, ry, rz, tx, ty, tz)
            z: B x d latent codes
            focal: Focal length (scalar or B)

        Returns:
            B x out_channels x H x W images
        """
        image = self.render_3d(pose_vec[:, 0], pose_vec[:, 1], z)
        return similarity_warp(image, pose_vec[:, 3:6], pose_vec[:, 2], focal)

    def forward(self, pose_vec: torch.Tensor, z: torch.Tensor, focal: Union[float, torch.Tensor] = 1.0) -> torch.Tensor:
        return self.generate_batch(pose_vec, z, focal)


class Encoder(nn.Module):
    """Convolutional encoder: image -> posterior (mu, sigma)."""

    def __init__(self, descriptor: ArchitectureDescriptor):
        super().__init__()
        self.descriptor = descriptor
        channels = [descriptor.out_channels] + descriptor.encoder_channels
        self.stages = nn.ModuleList(
            nn.Sequential(nn.Conv2d(cin, cout, kernel_size=4, stride=2, padding=1), _activation(descriptor.activation))
            for cin, cout in zip(channels[:-1], channels[1:])
        )
        side = descriptor.image_size // 2 ** len(descriptor.encoder_channels)
        if side < 1:
            raise ConfigurationError("encoder downsamples below one pixel; use fewer encoder stages")
        self.head = nn.Linear(channels[-1] * side * side, 2 * descriptor.latent_dim)

    def _check_image(self, image: torch.Tensor) -> torch.Tensor:
        if image.dim() == 3:
            image = image.unsqueeze(0)
        expected = (self.descriptor.out_channels, self.descriptor.image_size, self.descriptor.image_size)
        if tuple(image.shape[1:]) != expected:
            raise ShapeError(f"encoder expects images of shape {expected}, got {tuple(image.shape[1:])}")
        return image

    def features(self, image: torch.Tensor) -> List[torch.Tensor]:
        """Activations after every stage (the offline perceptual feature fallback)."""
        h = self._check_image(image)
        out = []
        for stage in self.stages:
            h = stage(h)
            out.append(h)
        return out

    def forward(self, image: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        h = self.features(image)[-1]
        mu, log_sigma = self.head(h.flatten(1)).chunk(2, dim=-1)
        return mu, torch.exp(log_sigma.clamp(-10.0, 5.0))


class ConditionalVAE(nn.Module):
    """Encoder + pose-aware generator trained jointly."""

    def __init__(self, descriptor: ArchitectureDescriptor):
        super().__init__()
        self.descriptor = descriptor
        self.generator = PoseAwareGenerator(descriptor)
        self.encoder = Encoder(descriptor)


# --- Functional surface ---

def _pose_vector(pose: Union[Pose, torch.Tensor], like: torch.Tensor) -> torch.Tensor:
    if isinstance(pose, Pose):
        return torch.as_tensor(pose.as_vector(), dtype=like.dtype, device=like.device).unsqueeze(0)
    return pose.reshape(-1, 6)


def generate_3d(rx, ry, z: torch.Tensor, generator: PoseAwareGenerator) -> torch.Tensor:
    """Out-of-plane generation only (no warp)."""
    if generator.descriptor.variant != "full":
        raise ConfigurationError("generate_3d requires a model with variant 'full'")
    z = generator._check_latent(z)
    rx = torch.as_tensor(rx, dtype=z.dtype, device=z.device)
    ry = torch.as_tensor(ry, dtype=z.dtype, device=z.device)
    return generator.render_3d(rx, ry, z)


def generate_no3d(pose_vec, z: torch.Tensor, generator: PoseAwareGenerator) -> torch.Tensor:
    """Ablation decoder: pose angles concatenated to z, 2D convolutions only."""
    if generator.descriptor.variant != "no3D":
        raise ConfigurationError("generate_no3d requires a model with variant 'no3D'")
    z = generator._check_latent(z)
    pose_vec = torch.as_tensor(pose_vec, dtype=z.dtype, device=z.device)
    if pose_vec.dim() == 1:
        pose_vec = pose_vec.unsqueeze(0)
    return generator.render_3d(pose_vec[:, 0], pose_vec[:, 1], z)


def generate(pose: Union[Pose, torch.Tensor], z: torch.Tensor, generator: PoseAwareGenerator) -> torch.Tensor:
    """Full generation G(R, T, z) = W(T, Rz) o G3D(Rx, Ry, z)."""
    z = generator._check_latent(z)
    focal = pose.focal if isinstance(pose, Pose) else 1.0
    return generator.generate_batch(_pose_vector(pose, z), z, focal)


def encode(image: torch.Tensor, encoder: Encoder) -> Tuple[torch.Tensor, torch.Tensor]:
    return encoder(image)


def freeze(module: nn.Module) -> nn.Module:
    module.eval()
    module.requires_grad_(False)
    return module


def weights_checksum(module: nn.Module) -> str:
    """SHA-256 over the state dict in key order."""
    digest = hashlib.sha256()
    for key, tensor in module.state_dict().items():
        digest.update(key.encode("utf-8"))
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


# --- Checkpoints ---

def write_checkpoint(path: str, payload: Dict[str, Any]):
    """Atomically write a checkpoint archive (temp file + rename)."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(prefix=".ckpt-", suffix=".pt", dir=directory)
    os.close(fd)
    try:
        torch.save(dict(payload, format=CHECKPOINT_FORMAT), tmp_path)
        os.replace(tmp_path, path)
    finally:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)


def read_checkpoint(path: str, kind: Optional[str] = None) -> Dict[str, Any]:
    if not os.path.exists(path):
        raise ConfigurationError(f"Checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as err:
        raise ConfigurationError(f"Checkpoint {path} could not be read: {err}") from err
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigurationError(f"Checkpoint {path} has an unsupported format tag")
    if kind and payload.get("kind") != kind:
        raise ConfigurationError(f"Checkpoint {path} holds a '{payload.get('kind')}' model, expected '{kind}'")
    return payload


@dataclass
class LoadedModel:
    """A frozen generator/encoder pair plus its provenance."""
    descriptor: ArchitectureDescriptor
    generator: PoseAwareGenerator
    encoder: Encoder
    summary: Dict[str, Any] = field(default_factory=dict)
    config: Dict[str, Any] = field(default_factory=dict)
    path: Optional[str] = None

    @property
    def modality(self) -> str:
        return "rgbd" if self.descriptor.out_channels == 4 else "rgb"

    @property
    def depth_range(self) -> float:
        return float(self.summary.get("depth_range", 1.0))

    def checksum(self) -> str:
        return weights_checksum(self.generator) + weights_checksum(self.encoder)


def save_model(path: str, model: ConditionalVAE, summary: Optional[Dict[str, Any]] = None,
               config: Optional[Dict[str, Any]] = None):
    write_checkpoint(path, {
        "kind": "vae",
        "descriptor": model.descriptor.model_dump_json(),
        "generator": model.generator.state_dict(),
        "encoder": model.encoder.state_dict(),
        "summary": json.dumps(summary or {}),
        "config": json.dumps(config or {}),
    })
    logger.info("Checkpoint written to %s", path)


def load_model(path: str, dtype: torch.dtype = torch.float32) -> LoadedModel:
    """
    Load a VAE checkpoint, rebuild the architecture from its descriptor and freeze it.

    Raises:
        ConfigurationError: unreadable file, wrong format tag, or weights that do not
            match the recorded descriptor.
    """
    payload = read_checkpoint(path, kind="vae")
    try:
        descriptor = ArchitectureDescriptor.model_validate_json(payload["descriptor"])
    except Exception as err:
        raise ConfigurationError(f"Checkpoint {path} carries an invalid descriptor: {err}") from err
    model = ConditionalVAE(descriptor)
    try:
        model.generator.load_state_dict(payload["generator"], strict=True)
        model.encoder.load_state_dict(payload["encoder"], strict=True)
    except RuntimeError as err:
        raise ConfigurationError(f"Checkpoint {path} weights do not match its descriptor: {err}") from err
    model.to(dtype)
    summary = json.loads(payload.get("summary") or "{}")
    if "elevation_range_deg" in summary:
        low, high = summary["elevation_range_deg"]
        model.generator.elevation_range = (math.radians(low), math.radians(high))
    return LoadedModel(
        descriptor=descriptor,
        generator=freeze(model.generator),
        encoder=freeze(model.encoder),
        summary=summary,
        config=json.loads(payload.get("config") or "{}"),
        path=path,
    )
