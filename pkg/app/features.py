"""Frozen feature extractors for the perceptual energy."""
import functools
import logging
import math
import threading
from typing import List, Optional, Sequence

import torch
import torch.nn as nn

from .config import EnergySpec
from .errors import ConfigurationError
from .generator import Encoder, freeze

logger = logging.getLogger(__name__)

# relu2_2, relu3_3, relu4_3 in torchvision's vgg16().features
VGG_LAYERS = (8, 15, 22)
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
SQRT_EPS = 1e-12


def safe_sqrt(x: torch.Tensor) -> torch.Tensor:
    """sqrt with a finite gradient at 0, shifted so that safe_sqrt(0) == 0."""
    return (x + SQRT_EPS).sqrt() - math.sqrt(SQRT_EPS)


class FeatureExtractor(nn.Module):
    name = "base"

    def forward(self, image: torch.Tensor) -> List[torch.Tensor]:
        raise NotImplementedError


class VGGFeatures(FeatureExtractor):
    """Intermediate activations of an ImageNet-pretrained VGG16 (RGB channels only)."""
    name = "vgg16"

    def __init__(self, layers: Sequence[int] = VGG_LAYERS):
        super().__init__()
        from torchvision.models import VGG16_Weights, vgg16

        self.layers = sorted(layers)
        body = vgg16(weights=VGG16_Weights.IMAGENET1K_V1).features
        self.body = freeze(body[: self.layers[-1] + 1])
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))

    def forward(self, image: torch.Tensor) -> List[torch.Tensor]:
        h = (image[:, :3] - self.mean.to(image.dtype)) / self.std.to(image.dtype)
        out = []
        for index, layer in enumerate(self.body):
            h = layer(h)
            if index in self.layers:
                out.append(h)
        return out


class EncoderFeatures(FeatureExtractor):
    """Stage activations of the trained VAE encoder; works offline."""
    name = "encoder"

    def __init__(self, encoder: Encoder, layers: Optional[Sequence[int]] = None):
        super().__init__()
        self.encoder = encoder
        n_stages = len(encoder.stages)
        self.layers = sorted(layers) if layers else list(range(n_stages))
        if any(i < 0 or i >= n_stages for i in self.layers):
            raise ConfigurationError(f"encoder has {n_stages} stages, feature_layers {self.layers} out of range")
        self.channels = encoder.descriptor.out_channels

    def forward(self, image: torch.Tensor) -> List[torch.Tensor]:
        rgb = image[:, :3]
        if self.channels == 4:
            # color-only comparison; depth is handled by its own energy term
            rgb = torch.cat([rgb, torch.zeros_like(rgb[:, :1])], dim=1)
        feats = self.encoder.features(rgb)
        return [feats[i] for i in self.layers]


_VGG_LOCK = threading.Lock()


@functools.lru_cache(maxsize=4)
def _cached_vgg(layers: tuple, dtype: torch.dtype) -> VGGFeatures:
    return VGGFeatures(layers).to(dtype)


def build_extractor(spec: EnergySpec, encoder: Optional[Encoder] = None,
                    dtype: torch.dtype = torch.float32) -> Optional[FeatureExtractor]:
    """
    Extractor for a perceptual EnergySpec (None for pixel-space kinds).

    VGG16 extractors are shared, one per (layers, dtype), and never cast in place.
    Falls back to the encoder's features, with a warning, when the pretrained VGG16
    weights cannot be loaded.
    """
    if spec.kind != "perceptual":
        return None
    if spec.extractor == "vgg16":
        try:
            with _VGG_LOCK:
                return _cached_vgg(tuple(spec.feature_layers or VGG_LAYERS), dtype)
        except Exception as err:
            logger.warning("Pretrained VGG16 unavailable (%s); falling back to encoder features", err)
    if encoder is None:
        raise ConfigurationError("perceptual energy needs a feature extractor: no VGG16 weights and no encoder")
    extractor = EncoderFeatures(encoder, spec.feature_layers if spec.extractor == "encoder" else None)
    return extractor


def with_dtype(extractor: FeatureExtractor, dtype: torch.dtype) -> FeatureExtractor:
    """The extractor itself when it already runs in `dtype`, else the shared VGG16 copy for `dtype`."""
    param = next(extractor.parameters(), None)
    if param is None or param.dtype == dtype:
        return extractor
    if isinstance(extractor, VGGFeatures):
        with _VGG_LOCK:
            return _cached_vgg(tuple(extractor.layers), dtype)
    raise ConfigurationError(f"feature extractor runs in {param.dtype}, the model in {dtype}")


def extract_features(image: torch.Tensor, extractor: FeatureExtractor) -> List[torch.Tensor]:
    if image.dim() == 3:
        image = image.unsqueeze(0)
    return extractor(image)


def feature_distance(a: List[torch.Tensor], b: List[torch.Tensor]) -> torch.Tensor:
    """Per-sample sum over layers of the RMS feature difference, shape (B,). Exactly 0 for identical features."""
    total = 0.0
    for fa, fb in zip(a, b):
        total = total + safe_sqrt((fa - fb).pow(2).flatten(1).mean(dim=1))
    return total
