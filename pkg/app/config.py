"""
Configuration models.

Every knob of every command lives in one of the pydantic models below. A run is
configured from a flat JSON object (``--config run.json``) whose keys are routed to
every section that declares them, then overridden by command-line flags. Unknown
keys are errors.
"""
import json
import os
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigurationError

DATA_ROOT_ENV = "POSESYNTH_DATA_ROOT"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


# --- Architecture ---

PRESETS: Dict[str, Dict[str, Any]] = {
    "default": dict(const_side=4, dec3d_channels=[256, 128, 64], mixer_channels=256,
                    dec2d_channels=[128, 64], encoder_channels=[32, 64, 128, 256]),
    "small": dict(const_side=4, dec3d_channels=[64, 32, 16], mixer_channels=64,
                  dec2d_channels=[32, 16], encoder_channels=[16, 32, 64, 64]),
    "tiny": dict(const_side=2, dec3d_channels=[16, 8], mixer_channels=16,
                 dec2d_channels=[8, 8], encoder_channels=[8, 16]),
}


class ArchitectureDescriptor(_Section):
    """Fully determines every weight shape of a generator/encoder pair."""
    latent_dim: int = Field(16, ge=1)
    const_side: int = Field(4, ge=1)
    dec3d_channels: List[int] = Field(default_factory=lambda: [256, 128, 64], min_length=1)
    mixer_channels: int = Field(256, ge=1)
    dec2d_channels: List[int] = Field(default_factory=lambda: [128, 64], min_length=1)
    encoder_channels: List[int] = Field(default_factory=lambda: [32, 64, 128, 256], min_length=1)
    image_size: int = Field(64, ge=4)
    out_channels: Literal[3, 4] = 3
    variant: Literal["full", "no3D"] = "full"
    style_split: bool = False
    activation: Literal["lrelu", "silu"] = "lrelu"

    @property
    def volume_side(self) -> int:
        return self.const_side * 2 ** (len(self.dec3d_channels) - 1)

    @property
    def volume_channels(self) -> int:
        return self.dec3d_channels[-1]

    @model_validator(mode="after")
    def _check_sizes(self):
        expected = self.volume_side * 2 ** len(self.dec2d_channels)
        if expected != self.image_size:
            raise ValueError(
                f"volume side {self.volume_side} upsampled {len(self.dec2d_channels)} times gives "
                f"{expected}, not image_size {self.image_size}"
            )
        if self.style_split and self.latent_dim % 2:
            raise ValueError("style_split requires an even latent_dim")
        return self

    @classmethod
    def from_preset(cls, preset: str = "default", **overrides) -> "ArchitectureDescriptor":
        if preset not in PRESETS:
            raise ConfigurationError(f"Unknown architecture preset '{preset}'")
        values = dict(PRESETS[preset])
        image_size = overrides.pop("image_size", None)
        if image_size is None:
            side = values["const_side"] * 2 ** (len(values["dec3d_channels"]) - 1)
            image_size = side * 2 ** len(values["dec2d_channels"])
        values.update(overrides)
        try:
            return cls(image_size=image_size, **values)
        except ValidationError as err:
            raise ConfigurationError(f"Invalid architecture: {err}") from err


# --- Sections ---

class RenderConfig(_Section):
    category: str = "laptop"
    instances: int = Field(8, ge=2)
    views: int = Field(200, ge=1)
    test_instances: int = Field(0, ge=0)
    val_fraction: float = Field(0.1, ge=0.0, lt=1.0)
    image_size: int = Field(64, ge=8)
    supersample: int = Field(2, ge=1)
    elevation_range_deg: Tuple[float, float] = (-30.0, 60.0)
    focal: float = Field(1.0, gt=0)
    ref_depth: float = Field(1.0, gt=0)
    seed: int = 0
    out: str = "data"


class TrainConfig(_Section):
    """Conditional-VAE (and baseline regressor) training settings."""
    dataset: str = "data"
    out: str = "runs/train"
    model: Literal["vae", "regressor"] = "vae"
    variant: Literal["full", "no3D", "noVAE"] = "full"
    preset: Literal["default", "small", "tiny"] = "default"
    latent_dim: int = Field(16, ge=1)
    style_split: bool = False
    activation: Literal["lrelu", "silu"] = "lrelu"
    kl_weight: float = Field(1e-2, ge=0.0)
    learning_rate: float = Field(1e-3, gt=0.0)
    batch_size: int = Field(16, ge=1)
    epochs: int = Field(20, ge=1)
    modality: Literal["rgb", "rgbd"] = "rgb"
    depth_range: float = Field(1.0, gt=0)
    same_view: bool = False
    augment: bool = True
    max_samples: Optional[int] = Field(None, ge=1)
    num_workers: int = Field(0, ge=0)
    deterministic: bool = True
    seed: int = 0

    @field_validator("kl_weight")
    @classmethod
    def _finite_kl(cls, value):
        if value != value or value == float("inf"):
            raise ValueError("kl_weight must be finite")
        return value

    def descriptor(self, image_size: int) -> ArchitectureDescriptor:
        return ArchitectureDescriptor.from_preset(
            self.preset,
            image_size=image_size,
            latent_dim=self.latent_dim,
            out_channels=4 if self.modality == "rgbd" else 3,
            variant="no3D" if self.variant == "no3D" else "full",
            style_split=self.style_split,
            activation=self.activation,
        )


class EnergySpec(_Section):
    kind: Literal["perceptual", "l1", "l2", "ssim"] = "perceptual"
    regularizer_weight: float = Field(1.0, ge=0.0)
    extractor: Literal["vgg16", "encoder"] = "vgg16"
    feature_layers: Optional[List[int]] = None
    depth_weight: float = Field(1.0, ge=0.0)
    depth_mask: Literal["target", "none"] = "target"
    ssim_window: int = Field(11, ge=3)

    @field_validator("kind", mode="before")
    @classmethod
    def _lower_kind(cls, value):
        return value.lower() if isinstance(value, str) else value


class FitConfig(_Section):
    n_restarts: int = Field(16, ge=1)
    max_iterations: int = Field(100, ge=1)
    pose_lr: float = Field(0.02, gt=0)
    latent_lr: float = Field(0.05, gt=0)
    rel_tol: float = Field(1e-4, ge=0)
    patience: int = Field(5, ge=1)
    elevation_range_deg: Tuple[float, float] = (-30.0, 60.0)
    azimuth_range_deg: Tuple[float, float] = (0.0, 360.0)
    inplane_range_deg: Tuple[float, float] = (-180.0, 180.0)
    translation_jitter: float = Field(0.05, ge=0)
    tz_min: float = Field(1e-3, gt=0)
    focal: float = Field(1.0, gt=0)
    ref_depth: float = Field(1.0, gt=0)
    modality: Literal["rgb", "rgbd"] = "rgb"
    parallel: bool = True
    strict_deterministic: bool = False
    record_pose_trace: bool = True
    seed: int = 0


class PerturbConfig(_Section):
    """Physical extent of a magnitude of 1.0 for each perturbation kind."""
    brightness_scale: float = Field(0.40, ge=0)
    occlusion_scale: float = Field(1.0, ge=0, le=1.0)
    translation_scale: float = Field(0.25, ge=0)
    # baseline training augmentation, in physical units
    augment_occlusion: float = Field(0.20, ge=0)
    augment_brightness: float = Field(0.40, ge=0)
    augment_translation: float = Field(0.25, ge=0)


class EvalConfig(_Section):
    n_samples: int = Field(100, ge=1)
    detection_threshold: float = Field(0.10, ge=0, le=1)
    rotation_thresholds: List[float] = Field(default_factory=lambda: [float(t) for t in range(0, 181, 5)])
    translation_thresholds: List[float] = Field(default_factory=lambda: [0.01 * t for t in range(0, 31)])
    factors: List[Literal["brightness", "occlusion", "translation"]] = Field(
        default_factory=lambda: ["brightness", "occlusion", "translation"])
    magnitudes: List[float] = Field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])
    target_source: Literal["generated", "dataset"] = "generated"
    target_elevation_range_deg: Tuple[float, float] = (-30.0, 60.0)
    target_inplane_range_deg: Tuple[float, float] = (-45.0, 45.0)
    target_translation_range: float = Field(0.1, ge=0)
    target_tz_range: Tuple[float, float] = (0.8, 1.2)
    symmetric: Optional[bool] = None
    workers: int = Field(1, ge=1)

    @field_validator("rotation_thresholds", "translation_thresholds")
    @classmethod
    def _ascending(cls, value):
        if any(b < a for a, b in zip(value, value[1:])):
            raise ValueError("thresholds must be ascending")
        return value

    @field_validator("magnitudes")
    @classmethod
    def _unit_range(cls, value):
        if any(m < 0 or m > 1 for m in value):
            raise ValueError("magnitudes must lie in [0, 1]")
        return value


SECTIONS = ("render", "train", "fit", "energy", "perturb", "eval")


class RunConfig(_Section):
    """Union of all sections; what every artifact embeds for provenance."""
    render: RenderConfig = Field(default_factory=RenderConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    fit: FitConfig = Field(default_factory=FitConfig)
    energy: EnergySpec = Field(default_factory=EnergySpec)
    perturb: PerturbConfig = Field(default_factory=PerturbConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)

    @model_validator(mode="after")
    def _one_camera(self):
        # the renderer and the warp must share one camera model
        for key in ("focal", "ref_depth"):
            rendered, fitted = getattr(self.render, key), getattr(self.fit, key)
            if rendered != fitted:
                raise ValueError(f"{key} differs between render ({rendered}) and fit ({fitted}) settings")
        return self

    def flat_keys(self) -> List[str]:
        keys = set()
        for section in SECTIONS:
            keys.update(type(getattr(self, section)).model_fields)
        return sorted(keys)

    def apply(self, values: Dict[str, Any], source: str = "config") -> "RunConfig":
        """Route flat key/value pairs to every section that declares the key."""
        known = set(self.flat_keys())
        unknown = sorted(k for k in values if k not in known)
        if unknown:
            raise ConfigurationError(f"Unknown {source} key(s): {', '.join(unknown)}")
        updated = {}
        for section in SECTIONS:
            current = getattr(self, section)
            fields = type(current).model_fields
            patch = {k: v for k, v in values.items() if k in fields}
            data = current.model_dump()
            data.update(patch)
            try:
                updated[section] = type(current)(**data)
            except ValidationError as err:
                raise ConfigurationError(f"Invalid {source} value for section '{section}': {err}") from err
        try:
            return RunConfig(**updated)
        except ValidationError as err:
            raise ConfigurationError(f"Inconsistent {source} values: {err}") from err


def load_run_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    Build a RunConfig from an optional flat JSON file plus overrides.

    Args:
        path: Flat key/value JSON file (may be None)
        overrides: Values taken from command-line flags; None entries are ignored

    Returns:
        The resolved, validated RunConfig
    """
    config = RunConfig()
    if path:
        if not os.path.exists(path):
            raise ConfigurationError(f"Config file not found: {path}")
        try:
            with open(path, "r", encoding="utf-8") as f:
                values = json.load(f)
        except json.JSONDecodeError as err:
            raise ConfigurationError(f"Config file {path} is not valid JSON: {err}") from err
        if not isinstance(values, dict) or any(isinstance(v, dict) for v in values.values()):
            raise ConfigurationError(f"Config file {path} must be a flat JSON object")
        config = config.apply(values, source="config")
    if overrides:
        config = config.apply({k: v for k, v in overrides.items() if v is not None}, source="flag")
    return config


def resolve_data_path(path: str) -> str:
    """Resolve a relative dataset path against $POSESYNTH_DATA_ROOT when set."""
    root = os.environ.get(DATA_ROOT_ENV)
    if root and not os.path.isabs(path) and not os.path.exists(path):
        return os.path.join(root, path)
    return path
