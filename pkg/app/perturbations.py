"""Image perturbations for the robustness study and baseline augmentation."""
import math
from typing import Optional, Tuple

import numpy as np
import torch

from .config import PerturbConfig
from .errors import ConfigurationError

KINDS = ("brightness", "occlusion", "translation")


def object_box(image: torch.Tensor) -> Tuple[int, int, int, int]:
    """(row0, row1, col0, col1), end-exclusive, of the nonzero pixels; the full image if empty."""
    mask = (image != 0).any(dim=0)
    rows = torch.nonzero(mask.any(dim=1)).flatten()
    cols = torch.nonzero(mask.any(dim=0)).flatten()
    if rows.numel() == 0:
        return 0, image.shape[1], 0, image.shape[2]
    return int(rows[0]), int(rows[-1]) + 1, int(cols[0]), int(cols[-1]) + 1


def adjust_brightness(image: torch.Tensor, gain: float) -> torch.Tensor:
    out = image.clone()
    out[:3] = (image[:3] * gain).clamp(0.0, 1.0)
    return out


def occlude(image: torch.Tensor, fraction: float, rng: np.random.Generator) -> torch.Tensor:
    """Zero a random axis-aligned rectangle covering `fraction` of the object box (all channels)."""
    r0, r1, c0, c1 = object_box(image)
    h, w = r1 - r0, c1 - c0
    area = fraction * h * w
    aspect = math.exp(rng.uniform(math.log(0.5), math.log(2.0)))
    rh = int(np.clip(round(math.sqrt(area * aspect)), 1, h))
    rw = int(np.clip(round(area / rh), 1, w))
    rh = int(np.clip(round(area / rw), 1, h))
    top = r0 + int(rng.integers(0, h - rh + 1))
    left = c0 + int(rng.integers(0, w - rw + 1))
    out = image.clone()
    out[:, top:top + rh, left:left + rw] = 0
    return out


def shift(image: torch.Tensor, dy: int, dx: int) -> torch.Tensor:
    """Integer-pixel translation with zero fill."""
    out = torch.zeros_like(image)
    _, h, w = image.shape
    if abs(dy) >= h or abs(dx) >= w:
        return out
    src_r = slice(max(0, -dy), h - max(0, dy))
    dst_r = slice(max(0, dy), h - max(0, -dy))
    src_c = slice(max(0, -dx), w - max(0, dx))
    dst_c = slice(max(0, dx), w - max(0, -dx))
    out[:, dst_r, dst_c] = image[:, src_r, src_c]
    return out


def perturb(image: torch.Tensor, kind: str, magnitude: float, seed: int = 0,
            config: Optional[PerturbConfig] = None) -> torch.Tensor:
    """
    Apply one perturbation to a C x H x W image.

    Args:
        image: Segmented image, background 0
        kind: brightness | occlusion | translation
        magnitude: Fraction of the kind's full range, in [0, 1]
        seed: Seeds the random sign, rectangle placement or direction
        config: Physical extent of magnitude 1 per kind

    Returns:
        New tensor; magnitude 0 returns an exact copy
    """
    if kind not in KINDS:
        raise ConfigurationError(f"Unknown perturbation kind '{kind}' (expected one of {', '.join(KINDS)})")
    if not 0.0 <= magnitude <= 1.0:
        raise ConfigurationError(f"perturbation magnitude must lie in [0, 1], got {magnitude}")
    if magnitude == 0:
        return image.clone()
    config = config or PerturbConfig()
    rng = np.random.default_rng(seed)
    if kind == "brightness":
        sign = 1.0 if rng.random() < 0.5 else -1.0
        return adjust_brightness(image, 1.0 + sign * magnitude * config.brightness_scale)
    if kind == "occlusion":
        return occlude(image, magnitude * config.occlusion_scale, rng)
    distance = magnitude * config.translation_scale * image.shape[-1]
    angle = rng.uniform(0.0, 2 * math.pi)
    return shift(image, int(round(distance * math.sin(angle))), int(round(distance * math.cos(angle))))


def augment(image: torch.Tensor, rng: np.random.Generator, config: Optional[PerturbConfig] = None) -> torch.Tensor:
    """Random training augmentation within the configured physical ranges (baseline only)."""
    config = config or PerturbConfig()
    out = image
    if config.augment_brightness > 0:
        out = adjust_brightness(out, 1.0 + rng.uniform(-config.augment_brightness, config.augment_brightness))
    if config.augment_occlusion > 0 and rng.random() < 0.5:
        out = occlude(out, rng.uniform(0.0, config.augment_occlusion), rng)
    if config.augment_translation > 0:
        distance = rng.uniform(0.0, config.augment_translation) * image.shape[-1]
        angle = rng.uniform(0.0, 2 * math.pi)
        out = shift(out, int(round(distance * math.sin(angle))), int(round(distance * math.cos(angle))))
    return out
