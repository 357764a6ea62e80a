"""
Analysis-by-synthesis fitting.

Recovers (R, T, z) for a segmented target image by minimizing

    E = d(target, G(R, T, z)) + w * ||z||

with Adam over the six pose parameters and the latent code, from several sampled
initial states run side by side. The generator weights are never updated.
"""
import contextlib
import logging
import math
import threading
import time
from typing import Any, Dict, List, Optional, Tuple

import kornia
import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch
from pydantic import BaseModel, Field

from .config import EnergySpec, FitConfig
from .errors import ConfigurationError, ShapeError
from .features import FeatureExtractor, build_extractor, feature_distance, safe_sqrt, with_dtype
from .generator import LoadedModel
from .geometry import (Pose, decode_relative_depth, decode_target_depth, encode_relative_depth,
                       encode_target_depth, rotation_error, shift_depth, to_hwc)

logger = logging.getLogger(__name__)


# --- Energy ---

class EnergyFunction:
    """
    Batched energy E(target, pose_vec, z) -> (B,) for a frozen generator.

    For RGB-D the generated depth channel is decoded to depth relative to the object
    center, shifted by tz and compared to the target's absolute depth channel.
    """

    def __init__(self, generator, spec: EnergySpec, extractor: Optional[FeatureExtractor] = None,
                 depth_range: float = 1.0, focal: float = 1.0):
        if spec.kind == "perceptual" and extractor is None:
            raise ConfigurationError("perceptual energy requires a feature extractor")
        self.generator = generator
        self.spec = spec
        self.extractor = extractor
        self.depth_range = depth_range
        self.focal = focal
        self._target_key = None
        self._target_features = None

    @property
    def out_channels(self) -> int:
        return self.generator.descriptor.out_channels

    def check_target(self, target: torch.Tensor) -> torch.Tensor:
        if target.dim() == 3:
            target = target.unsqueeze(0)
        channels, size = target.shape[1], self.generator.descriptor.image_size
        if channels != self.out_channels:
            raise ConfigurationError(
                f"modality mismatch: target has {channels} channels, model generates {self.out_channels}")
        if tuple(target.shape[2:]) != (size, size):
            raise ShapeError(f"target must be {size}x{size}, got {tuple(target.shape[2:])}")
        return target

    def _features(self, target: torch.Tensor) -> List[torch.Tensor]:
        key = (target.data_ptr(), tuple(target.shape), target.dtype)
        if key != self._target_key:
            with torch.no_grad():
                self._target_features = self.extractor(target[:1, :3].to(target.dtype))
            self._target_key = key
        return [f.expand(target.shape[0], *f.shape[1:]) for f in self._target_features]

    def data_term(self, target: torch.Tensor, rendered: torch.Tensor) -> torch.Tensor:
        a, b = rendered[:, :3], target[:, :3]
        kind = self.spec.kind
        if kind == "l1":
            return (a - b).abs().flatten(1).mean(dim=1)
        if kind == "l2":
            return (a - b).pow(2).flatten(1).mean(dim=1)
        if kind == "ssim":
            ssim = kornia.metrics.ssim(a, b, window_size=self.spec.ssim_window, max_val=1.0)
            return (1.0 - ssim.flatten(1).mean(dim=1)).clamp_min(0.0)
        return feature_distance(self._features(target), self.extractor(a))

    def depth_term(self, target: torch.Tensor, rendered: torch.Tensor, tz: torch.Tensor) -> torch.Tensor:
        # absolute scene units: d(term)/d(tz) is +-1 per valid pixel before averaging
        relative = decode_relative_depth(rendered[:, 3], self.depth_range)
        generated = shift_depth(relative, tz)
        observed = decode_target_depth(target[:, 3])
        diff = (generated - observed).abs()
        if self.spec.depth_mask == "none":
            return diff.flatten(1).mean(dim=1)
        valid = (observed > 0).to(diff.dtype)
        return (diff * valid).flatten(1).sum(dim=1) / valid.flatten(1).sum(dim=1).clamp_min(1.0)

    def regularizer(self, z: torch.Tensor) -> torch.Tensor:
        return self.spec.regularizer_weight * safe_sqrt(z.pow(2).sum(dim=1))

    def __call__(self, target: torch.Tensor, pose_vec: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        rendered = self.generator.generate_batch(pose_vec, z, self.focal)
        value = self.data_term(target, rendered) + self.regularizer(z)
        if self.out_channels == 4:
            value = value + self.spec.depth_weight * self.depth_term(target, rendered, pose_vec[:, 5])
        return value


class EnergyValue(BaseModel):
    value: float
    grad_pose: List[float]
    grad_z: List[float]


def energy(target: torch.Tensor, pose: Pose, z: torch.Tensor, generator, spec: EnergySpec,
           extractor: Optional[FeatureExtractor] = None, depth_range: float = 1.0) -> EnergyValue:
    """
    Evaluate E at one state and its gradients with respect to the six pose
    parameters (rx, ry, rz, tx, ty, tz) and z. Generator weights receive no gradient.
    """
    fn = EnergyFunction(generator, spec, extractor, depth_range, pose.focal)
    dtype = next(generator.parameters()).dtype
    target = fn.check_target(target.to(dtype))
    pose_vec = torch.tensor(pose.as_vector(), dtype=dtype).unsqueeze(0).requires_grad_(True)
    z = torch.as_tensor(z, dtype=dtype).reshape(1, -1).clone().requires_grad_(True)
    value = fn(target, pose_vec, z)[0]
    grad_pose, grad_z = torch.autograd.grad(value, [pose_vec, z])
    return EnergyValue(value=float(value), grad_pose=grad_pose[0].tolist(), grad_z=grad_z[0].tolist())


# --- Initialization ---

def sample_initializations(target: torch.Tensor, k: int, encoder, config: FitConfig,
                           seed: Optional[int] = None, depth_range: float = 1.0) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    K initial states: poses uniform over the configured ranges with T near the
    reference depth, latents drawn from the encoder's posterior of the target.

    Returns:
        (K x 6 pose vectors, K x d latent codes), deterministic given seed
    """
    rng = np.random.default_rng(config.seed if seed is None else seed)
    rad = lambda r: (math.radians(r[0]), math.radians(r[1]))
    rx = rng.uniform(*rad(config.elevation_range_deg), size=k)
    ry = rng.uniform(*rad(config.azimuth_range_deg), size=k)
    rz = rng.uniform(*rad(config.inplane_range_deg), size=k)
    jitter = config.translation_jitter
    txy = rng.uniform(-jitter, jitter, size=(k, 2))
    tz = config.ref_depth + rng.uniform(-jitter, jitter, size=k)
    poses = np.column_stack([rx, ry, rz, txy, np.maximum(tz, config.tz_min)])

    if target.dim() == 3:
        target = target.unsqueeze(0)
    encoder_input = target
    if target.shape[1] == 4:
        depth = decode_target_depth(target[:, 3:4])
        encoder_input = torch.cat([target[:, :3], encode_relative_depth(depth, config.ref_depth, depth_range)], 1)
    with torch.no_grad():
        mu, sigma = encoder(encoder_input)
    eps = rng.standard_normal(size=(k, mu.shape[-1]))
    dtype = mu.dtype
    z = mu[:1] + sigma[:1] * torch.as_tensor(eps, dtype=dtype, device=mu.device)
    return torch.as_tensor(poses, dtype=dtype, device=mu.device), z


# --- Results ---

class RestartRecord(BaseModel):
    index: int
    init_pose: List[float]
    init_z: List[float]
    energy_trace: List[float] = Field(default_factory=list)
    pose_trace: Optional[List[List[float]]] = None
    final_pose: List[float]
    final_z: List[float]
    final_energy: Optional[float] = None
    best_iteration: int = 0
    iterations: int = 0
    converged: bool = False
    diverged: bool = False


class FitResult(BaseModel):
    """Selected state plus the outcome of every restart."""
    pose: Pose
    z: List[float]
    energy: Optional[float] = None
    selected: int
    iterations: int
    restarts: List[RestartRecord]
    duration_s: float
    success: bool = True
    diagnostics: Dict[str, Any] = Field(default_factory=dict)
    modality: str = "rgb"
    energy_kind: str = "perceptual"

    @property
    def energy_trace(self) -> List[float]:
        return self.restarts[self.selected].energy_trace

    @property
    def initial_energy(self) -> Optional[float]:
        traces = [r.energy_trace[0] for r in self.restarts if r.energy_trace]
        return min(traces) if traces else None

    def to_json(self, compact: bool = False) -> str:
        exclude = {"restarts": {"__all__": {"energy_trace", "pose_trace"}}} if compact else None
        return self.model_dump_json(indent=2, exclude=exclude)


# --- Optimization ---

def _model_dtype(model: LoadedModel) -> torch.dtype:
    return next(model.generator.parameters()).dtype


def _run_restarts(fn: EnergyFunction, target: torch.Tensor, pose0: torch.Tensor, z0: torch.Tensor,
                  config: FitConfig) -> List[RestartRecord]:
    """Optimize a batch of restarts jointly; each row follows its own Adam trajectory."""
    k = pose0.shape[0]
    pose = pose0.clone().requires_grad_(True)
    z = z0.clone().requires_grad_(True)
    optimizer = torch.optim.Adam([{"params": [pose], "lr": config.pose_lr},
                                  {"params": [z], "lr": config.latent_lr}])
    batch_target = target.expand(k, *target.shape[1:])

    traces: List[List[float]] = [[] for _ in range(k)]
    pose_traces: List[List[List[float]]] = [[] for _ in range(k)]
    best_energy = torch.full((k,), math.inf, dtype=torch.float64)
    best_pose, best_z = pose0.clone(), z0.clone()
    best_iteration = [0] * k
    steps = [0] * k
    active = torch.ones(k, dtype=torch.bool)
    converged = torch.zeros(k, dtype=torch.bool)
    diverged = torch.zeros(k, dtype=torch.bool)

    for iteration in range(config.max_iterations + 1):
        values = fn(batch_target, pose, z)
        current = values.detach().to(torch.float64)
        finite = torch.isfinite(current)
        diverged |= active & ~finite
        active &= finite
        for i in torch.nonzero(active).flatten().tolist():
            traces[i].append(float(current[i]))
            if config.record_pose_trace:
                pose_traces[i].append(pose[i].detach().to(torch.float64).tolist())
            if current[i] < best_energy[i]:
                best_energy[i] = current[i]
                best_pose[i] = pose[i].detach()
                best_z[i] = z[i].detach()
                best_iteration[i] = iteration
            trace = traces[i]
            if len(trace) > config.patience:
                before = trace[-1 - config.patience]
                if (before - trace[-1]) / max(abs(before), 1e-12) < config.rel_tol:
                    converged[i] = True
        active &= ~converged
        if iteration == config.max_iterations or not active.any():
            break

        grad_pose, grad_z = torch.autograd.grad(values[active].sum(), [pose, z])
        frozen_pose, frozen_z = pose.detach().clone(), z.detach().clone()
        pose.grad, z.grad = grad_pose, grad_z
        optimizer.step()
        with torch.no_grad():
            pose[~active] = frozen_pose[~active]
            z[~active] = frozen_z[~active]
            pose[:, 5].clamp_(min=config.tz_min)
        pose.grad, z.grad = None, None
        for i in torch.nonzero(active).flatten().tolist():
            steps[i] += 1

    records = []
    for i in range(k):
        found = math.isfinite(float(best_energy[i]))
        records.append(RestartRecord(
            index=i,
            init_pose=pose0[i].to(torch.float64).tolist(),
            init_z=z0[i].to(torch.float64).tolist(),
            energy_trace=traces[i],
            pose_trace=pose_traces[i] if config.record_pose_trace else None,
            final_pose=best_pose[i].to(torch.float64).tolist(),
            final_z=best_z[i].to(torch.float64).tolist(),
            final_energy=float(best_energy[i]) if found else None,
            best_iteration=best_iteration[i],
            iterations=steps[i],
            converged=bool(converged[i]),
            diverged=bool(diverged[i]),
        ))
    return records


# --- Determinism ---

_DETERMINISM_LOCK = threading.Lock()
_determinism_users = 0
_determinism_saved: Tuple[bool, bool] = (False, False)


@contextlib.contextmanager
def deterministic_algorithms(enabled: bool = True):
    """
    Keep torch's deterministic algorithms on for the duration of the block.

    The flag is process-global: nested and concurrent users share one enabled period,
    and the setting in force before the first user entered is restored when the last
    one leaves. A no-op when `enabled` is False.
    """
    global _determinism_users, _determinism_saved
    if not enabled:
        yield
        return
    with _DETERMINISM_LOCK:
        if _determinism_users == 0:
            _determinism_saved = (torch.are_deterministic_algorithms_enabled(),
                                  torch.is_deterministic_algorithms_warn_only_enabled())
            torch.use_deterministic_algorithms(True)
        _determinism_users += 1
    try:
        yield
    finally:
        with _DETERMINISM_LOCK:
            _determinism_users -= 1
            if _determinism_users == 0:
                torch.use_deterministic_algorithms(_determinism_saved[0], warn_only=_determinism_saved[1])


def fit(target: torch.Tensor, model: LoadedModel, config: FitConfig, spec: EnergySpec,
        extractor: Optional[FeatureExtractor] = None) -> FitResult:
    """
    Multi-start gradient fitting of pose and latent code to a segmented target.

    Never raises on poor convergence: when every restart diverges the result carries
    success=False and the reason in `diagnostics`.

    Args:
        target: C x H x W (or 1 x C x H x W) image, background 0; for RGB-D the fourth
            channel is absolute depth encoded with `encode_target_depth`
        model: Frozen generator/encoder pair
        config: Restart count, iteration budget, step sizes, init ranges
        spec: Energy definition
        extractor: Feature extractor for the perceptual energy (built from spec if None)

    Raises:
        ConfigurationError: modality or camera (focal, ref_depth) mismatch between config,
            target and model
        ShapeError: target resolution differs from the model's
    """
    if config.modality != model.modality:
        raise ConfigurationError(f"modality mismatch: fit requested '{config.modality}', "
                                 f"model was trained on '{model.modality}'")
    for key in ("focal", "ref_depth"):
        trained = model.summary.get(key)
        if trained is not None and not math.isclose(float(trained), getattr(config, key)):
            raise ConfigurationError(f"{key} mismatch: fit uses {getattr(config, key)}, "
                                     f"training data was rendered with {trained}")
    started = time.time()
    dtype = _model_dtype(model)
    if extractor is None:
        extractor = build_extractor(spec, model.encoder, dtype)
    elif spec.kind == "perceptual":
        extractor = with_dtype(extractor, dtype)
    fn = EnergyFunction(model.generator, spec, extractor, model.depth_range, config.focal)
    target = fn.check_target(torch.as_tensor(target).to(dtype))

    with deterministic_algorithms(config.strict_deterministic):
        pose0, z0 = sample_initializations(target, config.n_restarts, model.encoder, config,
                                           depth_range=model.depth_range)
        if config.parallel and not config.strict_deterministic:
            records = _run_restarts(fn, target, pose0, z0, config)
        else:
            records = []
            for i in range(config.n_restarts):
                record = _run_restarts(fn, target, pose0[i:i + 1], z0[i:i + 1], config)[0]
                records.append(record.model_copy(update={"index": i}))

    energies = np.array([r.final_energy if r.final_energy is not None else np.inf for r in records])
    success = bool(np.isfinite(energies).any())
    selected = int(np.argmin(energies)) if success else 0
    best = records[selected]
    diagnostics: Dict[str, Any] = {
        "converged_restarts": sum(r.converged for r in records),
        "diverged_restarts": sum(r.diverged for r in records),
    }
    if not success:
        diagnostics["reason"] = "all restarts diverged (non-finite energy)"
        logger.warning("Fit failed: every one of %d restarts diverged", len(records))
    pose = Pose.from_vector(best.final_pose if success else best.init_pose, focal=config.focal)
    result = FitResult(
        pose=pose, z=best.final_z if success else best.init_z,
        energy=best.final_energy, selected=selected, iterations=best.iterations,
        restarts=records, duration_s=time.time() - started, success=success,
        diagnostics=diagnostics, modality=config.modality, energy_kind=spec.kind,
    )
    if success:
        logger.info("Fit: restart %d of %d selected, energy %.5f after %d iterations (%.2fs)",
                    selected, len(records), result.energy, result.iterations, result.duration_s)
    return result


def fit_rgbd(target: torch.Tensor, model: LoadedModel, config: FitConfig, spec: EnergySpec,
             extractor: Optional[FeatureExtractor] = None) -> FitResult:
    """RGB-D fitting: depth is a fourth channel and tz shifts the generated depth."""
    if model.modality != "rgbd":
        raise ConfigurationError("fit_rgbd needs an RGB-D checkpoint; this model was trained on RGB")
    if torch.as_tensor(target).shape[-3] != 4:
        raise ConfigurationError("fit_rgbd needs a 4-channel (RGB + depth) target")
    return fit(target, model, config.model_copy(update={"modality": "rgbd"}), spec, extractor)


# --- Reporting ---

def render_fit(result: FitResult, model: LoadedModel) -> torch.Tensor:
    """Image generated at the selected state, C x H x W."""
    dtype = _model_dtype(model)
    pose_vec = torch.tensor(result.pose.as_vector(), dtype=dtype).unsqueeze(0)
    z = torch.tensor(result.z, dtype=dtype).unsqueeze(0)
    with torch.no_grad():
        image = model.generator.generate_batch(pose_vec, z, result.pose.focal)[0]
    return with_absolute_depth(image, result.pose.tz, model.depth_range)


def with_absolute_depth(image: torch.Tensor, tz: float, depth_range: float) -> torch.Tensor:
    """Generated C x H x W image -> target encoding (relative depth channel shifted by tz)."""
    if image.shape[0] != 4:
        return image
    relative = decode_relative_depth(image[3], depth_range)
    foreground = image[3] > 5e-4
    absolute = torch.where(foreground, shift_depth(relative, tz), torch.zeros_like(relative))
    return torch.cat([image[:3], encode_target_depth(absolute).unsqueeze(0)])


def render_comparison(target: torch.Tensor, rendered: torch.Tensor, path: str):
    """Side-by-side target / fitted rendering / absolute difference."""
    target, rendered = target.detach().cpu().float(), rendered.detach().cpu().float()
    if target.dim() == 4:
        target, rendered = target[0], rendered[0]
    panels = [("target", to_hwc(target[:3])), ("fit", to_hwc(rendered[:3])),
              ("|difference|", to_hwc((target[:3] - rendered[:3]).abs()))]
    if target.shape[0] == 4:
        panels += [("target depth", target[3].numpy()), ("fit depth", rendered[3].numpy())]
    fig, axes = plt.subplots(1, len(panels), figsize=(3 * len(panels), 3))
    for ax, (title, img) in zip(axes, panels):
        ax.imshow(np.clip(img, 0.0, 1.0) if img.ndim == 3 else img, cmap=None if img.ndim == 3 else "viridis")
        ax.set_title(title)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def rotation_error_trace(record: RestartRecord, gt_pose: Pose, symmetric: bool = False) -> List[float]:
    if not record.pose_trace:
        return []
    return [rotation_error(Pose.from_vector(p).rotation, gt_pose.rotation, symmetric) for p in record.pose_trace]


def plot_fit_trace(result: FitResult, gt_pose: Optional[Pose], path: str, symmetric: bool = False):
    """Energy and (when the ground truth is known) rotation error per iteration of the selected restart."""
    record = result.restarts[result.selected]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(record.energy_trace, color="tab:blue")
    ax.set_xlabel("iteration")
    ax.set_ylabel("energy", color="tab:blue")
    if gt_pose is not None and record.pose_trace:
        twin = ax.twinx()
        twin.plot(rotation_error_trace(record, gt_pose, symmetric), color="tab:red")
        twin.set_ylabel("rotation error (deg)", color="tab:red")
    ax.set_title(f"restart {result.selected} ({result.energy_kind})")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
