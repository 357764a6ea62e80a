"""
Discriminative baseline: a VGG-style convolutional network regressing elevation and
azimuth (as sine/cosine pairs) directly from an image.
"""
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch
import torch.nn as nn
from pydantic import BaseModel
from torch.utils.data import DataLoader, Dataset
from tqdm import tqdm

from .config import PerturbConfig, TrainConfig
from .dataset import ToyDataset
from .errors import ConfigurationError, TrainingError
from .generator import freeze, read_checkpoint, write_checkpoint
from .geometry import Pose, rotation_error
from .perturbations import augment
from .training import CURVE_NAME, REPORT_NAME, seed_everything

logger = logging.getLogger(__name__)

REGRESSOR_NAME = "regressor.pt"
REGRESSOR_CHANNELS = {
    "default": [32, 64, 128, 128],
    "small": [16, 32, 64, 64],
    "tiny": [8, 16],
}


class RegressorDescriptor(BaseModel):
    image_size: int
    channels: List[int]
    hidden: int = 128


class PoseRegressor(nn.Module):
    """Stacks of (conv3x3, ReLU) x 2 + max-pool, then a two-layer head."""

    def __init__(self, descriptor: RegressorDescriptor):
        super().__init__()
        self.descriptor = descriptor
        layers: List[nn.Module] = []
        cin = 3
        for cout in descriptor.channels:
            layers += [nn.Conv2d(cin, cout, 3, padding=1), nn.ReLU(inplace=True),
                       nn.Conv2d(cout, cout, 3, padding=1), nn.ReLU(inplace=True), nn.MaxPool2d(2)]
            cin = cout
        side = descriptor.image_size // 2 ** len(descriptor.channels)
        if side < 1:
            raise ConfigurationError("regressor downsamples below one pixel; use fewer stages")
        self.features = nn.Sequential(*layers)
        self.head = nn.Sequential(nn.Flatten(), nn.Linear(cin * side * side, descriptor.hidden),
                                  nn.ReLU(inplace=True), nn.Linear(descriptor.hidden, 4))

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        """B x 4: (sin rx, cos rx, sin ry, cos ry)."""
        return self.head(self.features(image[:, :3]))


def angle_targets(rx: torch.Tensor, ry: torch.Tensor) -> torch.Tensor:
    return torch.stack([torch.sin(rx), torch.cos(rx), torch.sin(ry), torch.cos(ry)], dim=-1)


class RegressionDataset(Dataset):
    def __init__(self, data: ToyDataset, split: str, augmented: bool, perturb_config: PerturbConfig,
                 seed: int = 0, max_samples: Optional[int] = None):
        self.data = data
        self.indices = data.split(split)[:max_samples] if max_samples else data.split(split)
        if not self.indices:
            raise ConfigurationError(f"split '{split}' is empty")
        self.augmented = augmented
        self.perturb_config = perturb_config
        self.seed = seed
        self.epoch = 0

    def __len__(self) -> int:
        return len(self.indices)

    def __getitem__(self, position: int):
        record = self.data.records[self.indices[position]]
        image = self.data.load_rgb(record)
        if self.augmented:
            image = augment(image, np.random.default_rng((self.seed, self.epoch, position)), self.perturb_config)
        angles = torch.tensor([record.rx, record.ry], dtype=torch.float32)
        return image, angles


@dataclass
class LoadedRegressor:
    descriptor: RegressorDescriptor
    network: PoseRegressor
    summary: Dict[str, Any] = field(default_factory=dict)
    path: Optional[str] = None


def regress_pose(image: torch.Tensor, regressor: LoadedRegressor, ref_depth: float = 1.0, focal: float = 1.0) -> Pose:
    """Predicted out-of-plane rotation; rz = 0 and T at the reference depth."""
    if image.dim() == 3:
        image = image.unsqueeze(0)
    with torch.no_grad():
        out = regressor.network(image.to(next(regressor.network.parameters()).dtype))[0]
    rx = math.atan2(float(out[0]), float(out[1]))
    ry = math.atan2(float(out[2]), float(out[3]))
    return Pose(rx=rx, ry=ry, rz=0.0, tz=ref_depth, focal=focal)


def median_rotation_error(regressor: LoadedRegressor, data: ToyDataset, indices: List[int], symmetric: bool) -> float:
    errors = []
    for index in indices:
        record = data.records[index]
        pred = regress_pose(data.load_rgb(record), regressor)
        errors.append(rotation_error(pred.rotation, record.pose.rotation, symmetric))
    return float(np.median(errors)) if errors else float("nan")


def save_regressor(path: str, network: PoseRegressor, summary: Dict[str, Any], config: Dict[str, Any]):
    write_checkpoint(path, {
        "kind": "regressor",
        "descriptor": network.descriptor.model_dump_json(),
        "weights": network.state_dict(),
        "summary": json.dumps(summary),
        "config": json.dumps(config),
    })


def load_regressor(path: str) -> LoadedRegressor:
    payload = read_checkpoint(path, kind="regressor")
    descriptor = RegressorDescriptor.model_validate_json(payload["descriptor"])
    network = PoseRegressor(descriptor)
    try:
        network.load_state_dict(payload["weights"], strict=True)
    except RuntimeError as err:
        raise ConfigurationError(f"Regressor {path} weights do not match its descriptor: {err}") from err
    freeze(network)
    return LoadedRegressor(descriptor, network, json.loads(payload.get("summary") or "{}"), path)


def plot_regressor_curve(epochs: List[Dict[str, float]], path: str):
    fig, ax = plt.subplots(figsize=(6, 4))
    x = [e["epoch"] for e in epochs]
    ax.plot(x, [e["train_loss"] for e in epochs], marker="o", color="tab:blue")
    ax.set_xlabel("epoch")
    ax.set_ylabel("train loss", color="tab:blue")
    twin = ax.twinx()
    twin.plot(x, [e["val_median_rotation_error_deg"] for e in epochs], marker="s", color="tab:red")
    twin.set_ylabel("val median rotation error (deg)", color="tab:red")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


class RegressorReport(BaseModel):
    run_id: Optional[str] = None
    kind: str = "regressor"
    epochs: List[Dict[str, float]]
    median_val_rotation_error_deg: float
    checkpoint: str
    duration_s: float
    config: Dict[str, Any]


def train_regressor(config: TrainConfig, perturb_config: Optional[PerturbConfig] = None,
                    run_id: Optional[str] = None, run_config: Optional[Dict[str, Any]] = None) -> RegressorReport:
    """
    Train the baseline on the same toy dataset as the generative model.

    With `config.augment` the images are perturbed within the configured
    occlusion/brightness/translation ranges.
    """
    perturb_config = perturb_config or PerturbConfig()
    data = ToyDataset(config.dataset)
    train_set = RegressionDataset(data, "train", config.augment, perturb_config, config.seed, config.max_samples)
    val_indices = data.split("val") or data.split("train")
    if config.max_samples:
        val_indices = val_indices[:config.max_samples]
    rng = seed_everything(config.seed, config.deterministic)

    descriptor = RegressorDescriptor(image_size=data.image_size, channels=REGRESSOR_CHANNELS[config.preset])
    network = PoseRegressor(descriptor)
    optimizer = torch.optim.Adam(network.parameters(), lr=config.learning_rate)
    loader = lambda: DataLoader(train_set, batch_size=config.batch_size, shuffle=True, generator=rng,
                                num_workers=config.num_workers)
    os.makedirs(config.out, exist_ok=True)
    checkpoint = os.path.join(config.out, REGRESSOR_NAME)
    wrapped = LoadedRegressor(descriptor, network)

    started = time.time()
    epochs = []
    for epoch in range(1, config.epochs + 1):
        train_set.epoch = epoch
        network.train()
        total, seen = 0.0, 0
        for images, angles in tqdm(loader(), desc=f"epoch {epoch}", leave=False, unit="batch"):
            optimizer.zero_grad(set_to_none=True)
            loss = (network(images) - angle_targets(angles[:, 0], angles[:, 1])).pow(2).mean()
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite regressor loss at epoch {epoch}", {"epoch": epoch})
            loss.backward()
            optimizer.step()
            total += float(loss) * images.shape[0]
            seen += images.shape[0]
        network.eval()
        median = median_rotation_error(wrapped, data, val_indices, data.symmetric)
        epochs.append({"epoch": epoch, "train_loss": total / seen, "val_median_rotation_error_deg": median})
        logger.info("epoch %d: loss=%.5f val median rotation error=%.2f deg", epoch, total / seen, median)

    summary = {"median_val_rotation_error_deg": epochs[-1]["val_median_rotation_error_deg"],
               "augment": config.augment, "category": data.category, "run_id": run_id}
    resolved = run_config or {"train": config.model_dump(mode="json")}
    save_regressor(checkpoint, network, summary, resolved)
    report = RegressorReport(run_id=run_id, epochs=epochs, checkpoint=checkpoint,
                             median_val_rotation_error_deg=summary["median_val_rotation_error_deg"],
                             duration_s=time.time() - started, config=resolved)
    with open(os.path.join(config.out, REPORT_NAME), "w", encoding="utf-8") as f:
        f.write(report.model_dump_json(indent=2))
    plot_regressor_curve(epochs, os.path.join(config.out, CURVE_NAME))
    return report
