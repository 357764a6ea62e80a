"""
Conditional-VAE training.

Loss per batch: mean |I - G(pose, z)| + kl_weight * KL(N(mu, sigma) || N(0, I)), with
z drawn by reparameterization from the encoder's posterior of another view of the
same instance.
"""
import json
import logging
import math
import os
import time
from typing import Any, Dict, List, Optional

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch
from pydantic import BaseModel
from torch.utils.data import DataLoader
from tqdm import tqdm

from .config import ArchitectureDescriptor, TrainConfig
from .dataset import PairDataset, ToyDataset
from .errors import ConfigurationError, TrainingError
from .generator import ConditionalVAE, save_model

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "model.pt"
REPORT_NAME = "report.json"
CURVE_NAME = "loss_curve.png"
SNAPSHOT_NAME = "nan_snapshot.json"


def kl_divergence(mu: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    """Closed-form KL(N(mu, diag sigma^2) || N(0, I)), summed over latent dims, averaged over the batch."""
    kl = 0.5 * (mu.pow(2) + sigma.pow(2) - 1.0 - 2.0 * torch.log(sigma)).sum(dim=-1)
    return kl.mean()


def reparameterize(mu: torch.Tensor, sigma: torch.Tensor, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
    return mu + sigma * eps


class StepResult(BaseModel):
    loss: float
    l1: float
    kl: float


class EpochRecord(BaseModel):
    epoch: int
    train_loss: float
    train_l1: float
    train_kl: float
    val_l1: float


class TrainingReport(BaseModel):
    run_id: Optional[str] = None
    kind: str = "vae"
    variant: str
    descriptor: Dict[str, Any]
    epochs: List[EpochRecord]
    val_l1: float
    checkpoint: str
    duration_s: float
    config: Dict[str, Any]


def vae_loss(model, source: torch.Tensor, target: torch.Tensor, pose: torch.Tensor, kl_weight: float,
             sample: bool = True, generator: Optional[torch.Generator] = None):
    """Returns (loss, l1, kl, mu, sigma) for one batch; nothing is updated."""
    mu, sigma = model.encoder(source)
    z = reparameterize(mu, sigma, generator) if sample else mu
    rendered = model.generator.generate_batch(pose.to(z.dtype), z)
    l1 = (rendered - target).abs().mean()
    kl = kl_divergence(mu, sigma)
    return l1 + kl_weight * kl, l1, kl, mu, sigma


def vae_step(model, optimizer: Optional[torch.optim.Optimizer], batch, kl_weight: float,
             sample: bool = True, generator: Optional[torch.Generator] = None) -> StepResult:
    """
    One optimizer update on a (source, target, pose) batch.

    Args:
        model: Object with `.encoder(image) -> (mu, sigma)` and `.generator.generate_batch(pose, z)`
        optimizer: Optimizer over the model parameters; None evaluates the loss only
        batch: (source images, target images, B x 6 target poses)
        kl_weight: Weight of the KL term (0 for the noVAE variant)
        sample: Draw z by reparameterization; False uses the posterior mean
        generator: Torch RNG for the reparameterization noise

    Raises:
        TrainingError: non-finite loss; `snapshot` carries the batch statistics
    """
    source, target, pose = batch
    if optimizer is not None:
        optimizer.zero_grad(set_to_none=True)
    loss, l1, kl, mu, sigma = vae_loss(model, source, target, pose, kl_weight, sample, generator)
    if not torch.isfinite(loss):
        snapshot = {
            "loss": float(loss), "l1": float(l1), "kl": float(kl),
            "mu_abs_max": float(mu.detach().abs().max()),
            "sigma_min": float(sigma.detach().min()), "sigma_max": float(sigma.detach().max()),
            "poses": pose.detach().cpu().tolist(),
        }
        raise TrainingError(f"non-finite training loss ({float(loss)})", snapshot)
    if optimizer is not None:
        loss.backward()
        optimizer.step()
    return StepResult(loss=float(loss), l1=float(l1), kl=float(kl))


@torch.no_grad()
def validation_l1(model, loader: DataLoader) -> float:
    """Mean per-pixel L1 with z set to the posterior mean."""
    total, count = 0.0, 0
    for source, target, pose in loader:
        mu, _ = model.encoder(source)
        rendered = model.generator.generate_batch(pose.to(mu.dtype), mu)
        total += float((rendered - target).abs().mean()) * source.shape[0]
        count += source.shape[0]
    return total / max(count, 1)


def seed_everything(seed: int, deterministic: bool = True) -> torch.Generator:
    np.random.seed(seed)
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)
        torch.backends.cudnn.benchmark = False
    return torch.Generator().manual_seed(seed)


def plot_loss_curve(epochs: List[EpochRecord], path: str, title: str = "training"):
    fig, ax = plt.subplots(figsize=(6, 4))
    x = [e.epoch for e in epochs]
    ax.plot(x, [e.train_loss for e in epochs], marker="o", label="train loss")
    ax.plot(x, [e.train_l1 for e in epochs], marker=".", label="train L1")
    ax.plot(x, [e.val_l1 for e in epochs], marker="s", label="val L1")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _loader(pairs: PairDataset, config: TrainConfig, shuffle: bool, rng: Optional[torch.Generator]) -> DataLoader:
    return DataLoader(pairs, batch_size=config.batch_size, shuffle=shuffle, generator=rng,
                      num_workers=config.num_workers, drop_last=False)


def prepare_data(config: TrainConfig):
    """Open the dataset and build train/val pair datasets. Fails before any training step."""
    data = ToyDataset(config.dataset)
    common = dict(modality=config.modality, depth_range=config.depth_range,
                  same_view=config.same_view, seed=config.seed)
    train_pairs = PairDataset(data, "train", max_samples=config.max_samples, **common)
    val_split = "val" if data.split("val") else "train"
    val_pairs = PairDataset(data, val_split, max_samples=config.max_samples, **common)
    return data, train_pairs, val_pairs


def train(config: TrainConfig, run_id: Optional[str] = None, run_config: Optional[Dict[str, Any]] = None) -> TrainingReport:
    """
    Train a conditional VAE and write `model.pt`, `report.json` and `loss_curve.png` to `config.out`.

    The noVAE variant uses the posterior mean as z and a zero KL weight; the no3D
    variant swaps in the 2D-only decoder.
    """
    if config.model != "vae":
        raise ConfigurationError("train() builds VAE models; use baseline.train_regressor for regressors")
    data, train_pairs, val_pairs = prepare_data(config)
    descriptor: ArchitectureDescriptor = config.descriptor(data.image_size)
    rng = seed_everything(config.seed, config.deterministic)

    model = ConditionalVAE(descriptor)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    variational = config.variant != "noVAE"
    kl_weight = config.kl_weight if variational else 0.0

    os.makedirs(config.out, exist_ok=True)
    checkpoint = os.path.join(config.out, CHECKPOINT_NAME)
    val_loader = _loader(val_pairs, config, shuffle=False, rng=None)
    logger.info("Training %s/%s on %d pairs (%d val), descriptor %s",
                config.variant, config.modality, len(train_pairs), len(val_pairs), descriptor.model_dump())

    started = time.time()
    epochs: List[EpochRecord] = []
    for epoch in range(1, config.epochs + 1):
        train_pairs.set_epoch(epoch)
        model.train()
        sums = np.zeros(3)
        seen = 0
        for batch in tqdm(_loader(train_pairs, config, shuffle=True, rng=rng), desc=f"epoch {epoch}",
                          leave=False, unit="batch"):
            try:
                step = vae_step(model, optimizer, batch, kl_weight, sample=variational, generator=rng)
            except TrainingError as err:
                err.snapshot["epoch"] = epoch
                with open(os.path.join(config.out, SNAPSHOT_NAME), "w", encoding="utf-8") as f:
                    json.dump(err.snapshot, f, indent=2)
                raise
            n = batch[0].shape[0]
            sums += n * np.array([step.loss, step.l1, step.kl])
            seen += n
        model.eval()
        record = EpochRecord(epoch=epoch, train_loss=sums[0] / seen, train_l1=sums[1] / seen,
                             train_kl=sums[2] / seen, val_l1=validation_l1(model, val_loader))
        epochs.append(record)
        logger.info("epoch %d: loss=%.5f l1=%.5f kl=%.4f val_l1=%.5f",
                    epoch, record.train_loss, record.train_l1, record.train_kl, record.val_l1)

    render = data.metadata.get("render", {})
    summary = {
        "val_l1": epochs[-1].val_l1,
        "variant": config.variant,
        "modality": config.modality,
        "depth_range": config.depth_range,
        "category": data.category,
        "symmetric": data.symmetric,
        "elevation_range_deg": list(render.get("elevation_range_deg", (-30.0, 60.0))),
        "focal": render.get("focal", 1.0),
        "ref_depth": render.get("ref_depth", 1.0),
        "run_id": run_id,
    }
    resolved = run_config or {"train": config.model_dump(mode="json")}
    try:
        save_model(checkpoint, model, summary, resolved)
        report = TrainingReport(
            run_id=run_id, variant=config.variant, descriptor=descriptor.model_dump(mode="json"),
            epochs=epochs, val_l1=epochs[-1].val_l1, checkpoint=checkpoint,
            duration_s=time.time() - started, config=resolved,
        )
        with open(os.path.join(config.out, REPORT_NAME), "w", encoding="utf-8") as f:
            f.write(report.model_dump_json(indent=2))
        plot_loss_curve(epochs, os.path.join(config.out, CURVE_NAME), title=f"{config.variant} ({data.category})")
    except OSError as err:
        raise TrainingError(f"failed to write training artifacts to {config.out}: {err}") from err
    if not math.isfinite(report.val_l1):
        raise TrainingError("validation L1 is not finite")
    logger.info("Training finished in %.1fs, val_l1=%.5f", report.duration_s, report.val_l1)
    return report
