"""
Evaluation protocol: AP-vs-threshold curves, inverse-crime benchmarks, the
perturbation robustness study and the seen/unseen instance gap.
"""
import csv
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch
from pydantic import BaseModel, Field, ValidationError, model_validator
from tqdm import tqdm

from .baseline import LoadedRegressor, regress_pose
from .config import EnergySpec, EvalConfig, FitConfig, PerturbConfig
from .dataset import ToyDataset
from .errors import ConfigurationError, DatasetError
from .features import FeatureExtractor, build_extractor
from .fitting import FitResult, deterministic_algorithms, fit, with_absolute_depth
from .generator import LoadedModel
from .geometry import Pose, rotation_error, similarity_warp, translation_error
from .perturbations import KINDS, perturb

logger = logging.getLogger(__name__)

__all__ = [
    "EvalRecord", "APCurve", "average_precision", "ap_at", "perturb", "KINDS",
    "inverse_crime_targets", "inverse_crime_benchmark", "run_robustness_study", "instance_gap_study",
]


# --- Records and AP ---

class EvalRecord(BaseModel):
    sample_id: str
    category: Optional[str] = None
    symmetric: bool = False
    gt: Pose
    pred: Pose
    overlap: float = Field(1.0, ge=0.0, le=1.0)
    method: str = "fit"

    def rotation_error(self) -> float:
        return rotation_error(self.pred.rotation, self.gt.rotation, self.symmetric)

    def translation_error(self) -> float:
        return translation_error(self.pred.translation, self.gt.translation)

    def error(self, metric: str) -> float:
        return self.rotation_error() if metric == "rotation_deg" else self.translation_error()


class APCurve(BaseModel):
    metric: str
    thresholds: List[float]
    precision: Optional[List[float]] = None
    n: int = 0
    no_detections: bool = False

    @model_validator(mode="after")
    def _monotone(self):
        if self.precision is not None:
            if len(self.precision) != len(self.thresholds):
                raise ValueError("one precision value per threshold")
            if any(b < a for a, b in zip(self.precision, self.precision[1:])):
                raise ValueError("precision must be non-decreasing in the threshold")
        return self

    def at(self, threshold: float) -> Optional[float]:
        if self.precision is None:
            return None
        for t, p in zip(self.thresholds, self.precision):
            if math.isclose(t, threshold, abs_tol=1e-9):
                return p
        raise ConfigurationError(f"threshold {threshold} not on the {self.metric} curve")


METRICS = ("rotation_deg", "translation_units")
# float round-off of errors that sit exactly on a threshold
ERROR_TOL = 1e-9


def average_precision(records: Sequence[EvalRecord], metric: str, thresholds: Sequence[float],
                      detection_threshold: float = 0.10) -> APCurve:
    """
    Fraction of detected records whose error is within each threshold.

    Records with overlap below `detection_threshold` are excluded. When none are
    left the curve is flagged `no_detections` and carries no precision values.
    """
    if metric not in METRICS:
        raise ConfigurationError(f"Unknown metric '{metric}' (expected one of {', '.join(METRICS)})")
    if not records:
        raise ConfigurationError("average_precision needs at least one record")
    thresholds = [float(t) for t in thresholds]
    if any(b < a for a, b in zip(thresholds, thresholds[1:])):
        raise ConfigurationError("thresholds must be ascending")
    kept = [r for r in records if r.overlap >= detection_threshold]
    if not kept:
        return APCurve(metric=metric, thresholds=thresholds, no_detections=True)
    errors = np.array([r.error(metric) for r in kept])
    precision = [float(np.mean(errors <= t + ERROR_TOL)) for t in thresholds]
    return APCurve(metric=metric, thresholds=thresholds, precision=precision, n=len(kept))


def ap_at(records: Sequence[EvalRecord], threshold_deg: float, detection_threshold: float = 0.10) -> Optional[float]:
    """Rotation AP at a single threshold (AP_10, AP_60)."""
    return average_precision(records, "rotation_deg", [threshold_deg], detection_threshold).at(threshold_deg)


def ap_curves(records: Sequence[EvalRecord], config: EvalConfig) -> Dict[str, APCurve]:
    return {
        "rotation_deg": average_precision(records, "rotation_deg", config.rotation_thresholds, config.detection_threshold),
        "translation_units": average_precision(records, "translation_units", config.translation_thresholds,
                                               config.detection_threshold),
    }


# --- Results files ---

def write_records(path: str, records: Sequence[EvalRecord]):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for record in records:
            f.write(record.model_dump_json() + "\n")


def read_records(path: str) -> List[EvalRecord]:
    if not os.path.exists(path):
        raise ConfigurationError(f"Results file not found: {path}")
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                records.append(EvalRecord.model_validate_json(line))
            except ValidationError as err:
                raise DatasetError(f"malformed result record: {err.errors()[0]['msg']}", path, line_number) from err
    if not records:
        raise DatasetError("results file holds no records", path)
    return records


def write_ap_outputs(curves: Dict[str, APCurve], out_dir: str, provenance: Dict[str, Any]) -> Dict[str, str]:
    """ap.json, ap.csv and one curve plot per metric."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {"json": os.path.join(out_dir, "ap.json"), "csv": os.path.join(out_dir, "ap.csv")}
    summary = {name: curve.model_dump() for name, curve in curves.items()}
    rotation = curves.get("rotation_deg")
    if rotation is not None and rotation.precision is not None:
        for tau in (10.0, 60.0):
            if any(math.isclose(t, tau) for t in rotation.thresholds):
                summary[f"AP_{int(tau)}"] = rotation.at(tau)
    with open(paths["json"], "w", encoding="utf-8") as f:
        json.dump(dict(summary, **provenance), f, indent=2)
    with open(paths["csv"], "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["metric", "threshold", "precision"])
        for name, curve in curves.items():
            for i, t in enumerate(curve.thresholds):
                writer.writerow([name, t, "" if curve.precision is None else curve.precision[i]])
    for name, curve in curves.items():
        if curve.precision is None:
            continue
        path = os.path.join(out_dir, f"ap_{name}.png")
        fig, ax = plt.subplots(figsize=(5, 4))
        ax.plot(curve.thresholds, [100 * p for p in curve.precision], marker=".")
        ax.set_xlabel("degrees" if name == "rotation_deg" else "translation error")
        ax.set_ylabel("AP (%)")
        ax.set_ylim(0, 100)
        ax.set_title(f"{name} (n={curve.n})")
        fig.tight_layout()
        fig.savefig(path, dpi=100)
        plt.close(fig)
        paths[name] = path
    return paths


# --- Targets ---

@dataclass
class Target:
    """A fitting target with its ground-truth pose (and latent, for generated targets)."""
    sample_id: str
    image: torch.Tensor
    gt: Pose
    z: Optional[List[float]] = None
    split: str = "generated"


def _uniform(rng: np.random.Generator, bounds) -> float:
    return float(rng.uniform(bounds[0], bounds[1]))


def inverse_crime_targets(model: LoadedModel, n: int, seed: int, config: Optional[EvalConfig] = None,
                          focal: float = 1.0, out_of_plane_only: bool = False, ref_depth: float = 1.0) -> List[Target]:
    """
    Targets generated by the model itself at random poses and latents drawn from the prior.

    With `out_of_plane_only` the targets keep rz = 0 and T = (0, 0, ref_depth).
    """
    config = config or EvalConfig()
    rng = np.random.default_rng(seed)
    dtype = next(model.generator.parameters()).dtype
    targets = []
    for i in range(n):
        rx = math.radians(_uniform(rng, config.target_elevation_range_deg))
        ry = float(rng.uniform(0.0, 2 * math.pi))
        if out_of_plane_only:
            rz, tx, ty, tz = 0.0, 0.0, 0.0, ref_depth
        else:
            rz = math.radians(_uniform(rng, config.target_inplane_range_deg))
            r = config.target_translation_range
            tx, ty = float(rng.uniform(-r, r)), float(rng.uniform(-r, r))
            tz = _uniform(rng, config.target_tz_range)
        pose = Pose(rx=rx, ry=ry, rz=rz, tx=tx, ty=ty, tz=tz, focal=focal)
        z = rng.standard_normal(model.descriptor.latent_dim)
        with torch.no_grad():
            image = model.generator.generate_batch(torch.tensor(pose.as_vector(), dtype=dtype).unsqueeze(0),
                                                   torch.tensor(z, dtype=dtype).unsqueeze(0), focal)[0]
        targets.append(Target(sample_id=f"gen-{i:05d}", image=with_absolute_depth(image, tz, model.depth_range),
                              gt=pose, z=z.tolist()))
    return targets


def dataset_targets(data: ToyDataset, split: str, n: int, seed: int, config: Optional[EvalConfig] = None,
                    out_of_plane_only: bool = False) -> List[Target]:
    """
    Rendered views of the given split. Unless `out_of_plane_only`, each view is warped
    by a random in-plane rotation and translation and its label updated accordingly.
    """
    config = config or EvalConfig()
    indices = data.split(split)
    if not indices:
        raise ConfigurationError(f"dataset split '{split}' is empty")
    rng = np.random.default_rng(seed)
    chosen = sorted(rng.choice(indices, size=min(n, len(indices)), replace=False).tolist())
    targets = []
    for index in chosen:
        record = data.records[index]
        image = data.load_rgb(record)
        pose = record.pose
        if not out_of_plane_only:
            rz = math.radians(_uniform(rng, config.target_inplane_range_deg))
            r = config.target_translation_range
            t = [float(rng.uniform(-r, r)), float(rng.uniform(-r, r)), _uniform(rng, config.target_tz_range)]
            image = similarity_warp(image.unsqueeze(0), torch.tensor([t], dtype=image.dtype), rz, pose.focal)[0]
            pose = Pose(rx=pose.rx, ry=pose.ry, rz=rz, tx=t[0], ty=t[1], tz=t[2] * pose.tz, focal=pose.focal)
        targets.append(Target(sample_id=f"{split}-{index:06d}", image=image, gt=pose, split=split))
    return targets


# --- Benchmarks ---

class TrialStats(BaseModel):
    sample_id: str
    rotation_error_deg: float
    translation_error: float
    tz_relative_error: float
    iterations: int
    energy: Optional[float] = None
    success: bool = True


class BenchmarkResult(BaseModel):
    records: List[EvalRecord]
    trials: List[TrialStats]
    summary: Dict[str, Any]


def _fit_targets(targets: Sequence[Target], model: LoadedModel, fit_config: FitConfig, spec: EnergySpec,
                 extractor: Optional[FeatureExtractor], seed: int, workers: int,
                 progress: str = "fit") -> List[FitResult]:
    def run(i: int) -> FitResult:
        config = fit_config.model_copy(update={"seed": seed + i})
        return fit(targets[i].image, model, config, spec, extractor)

    # one enabled period for the whole pool
    with deterministic_algorithms(fit_config.strict_deterministic):
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                return list(tqdm(pool.map(run, range(len(targets))), total=len(targets), desc=progress, leave=False))
        return [run(i) for i in tqdm(range(len(targets)), desc=progress, leave=False)]


def inverse_crime_benchmark(model: LoadedModel, fit_config: FitConfig, spec: EnergySpec,
                            eval_config: Optional[EvalConfig] = None, n: Optional[int] = None, seed: int = 0,
                            extractor: Optional[FeatureExtractor] = None,
                            targets: Optional[List[Target]] = None) -> BenchmarkResult:
    """
    Fit model-generated targets with known ground truth and collect pose errors.

    Summary keys: AP_10, AP_60, rotation_within_5deg, translation_within_5pct,
    tz_within_1pct, tz_over_5pct, median_iterations, mean_rotation_error_deg.
    """
    eval_config = eval_config or EvalConfig()
    n = n or eval_config.n_samples
    symmetric = _symmetric(model, eval_config)
    if targets is None:
        targets = inverse_crime_targets(model, n, seed, eval_config, fit_config.focal)
    if extractor is None:
        extractor = build_extractor(spec, model.encoder)
    results = _fit_targets(targets, model, fit_config, spec, extractor, seed, eval_config.workers)

    records, trials = [], []
    for target, result in zip(targets, results):
        record = EvalRecord(sample_id=target.sample_id, category=model.summary.get("category"),
                            symmetric=symmetric, gt=target.gt, pred=result.pose)
        records.append(record)
        trials.append(TrialStats(
            sample_id=target.sample_id,
            rotation_error_deg=record.rotation_error(),
            translation_error=record.translation_error(),
            tz_relative_error=abs(result.pose.tz - target.gt.tz) / target.gt.tz,
            iterations=result.iterations, energy=result.energy, success=result.success,
        ))
    records.sort(key=lambda r: r.sample_id)
    trials.sort(key=lambda t: t.sample_id)
    return BenchmarkResult(records=records, trials=trials, summary=summarize_trials(records, trials))


def summarize_trials(records: Sequence[EvalRecord], trials: Sequence[TrialStats]) -> Dict[str, Any]:
    rot = np.array([t.rotation_error_deg for t in trials])
    trans = np.array([t.translation_error for t in trials])
    tz_rel = np.array([t.tz_relative_error for t in trials])
    tz = np.array([r.gt.tz for r in records])
    return {
        "n": len(trials),
        "AP_10": ap_at(records, 10.0),
        "AP_60": ap_at(records, 60.0),
        "mean_rotation_error_deg": float(rot.mean()),
        "rotation_within_5deg": float(np.mean(rot < 5.0)),
        "translation_within_5pct": float(np.mean(trans < 0.05 * tz)),
        "tz_within_1pct": float(np.mean(tz_rel < 0.01)),
        "tz_over_5pct": float(np.mean(tz_rel > 0.05)),
        "median_iterations": float(np.median([t.iterations for t in trials])),
        "failed_fits": int(sum(not t.success for t in trials)),
    }


def _symmetric(model: LoadedModel, config: EvalConfig) -> bool:
    if config.symmetric is not None:
        return config.symmetric
    return bool(model.summary.get("symmetric", False))


# --- Robustness ---

class RobustnessRow(BaseModel):
    factor: str
    magnitude: float
    method: str
    mean_rotation_error_deg: float
    n: int


class RobustnessReport(BaseModel):
    rows: List[RobustnessRow]
    ratios: Dict[str, Dict[str, Optional[float]]]
    fitter_more_robust_factors: int
    instance_gap: Optional[List[Dict[str, Any]]] = None
    provenance: Dict[str, Any] = Field(default_factory=dict)

    def table(self, factor: str, method: str) -> List[RobustnessRow]:
        return [r for r in self.rows if r.factor == factor and r.method == method]


Predictor = Callable[[torch.Tensor, int], Pose]


def _mean_error(targets: Sequence[Target], predict: Predictor, symmetric: bool, transform=None) -> float:
    errors = []
    for i, target in enumerate(targets):
        image = transform(target.image, i) if transform else target.image
        pred = predict(image, i)
        errors.append(rotation_error(pred.rotation, target.gt.rotation, symmetric))
    return float(np.mean(errors))


def _fit_predictor(model: LoadedModel, fit_config: FitConfig, spec: EnergySpec,
                   extractor: Optional[FeatureExtractor], seed: int) -> Predictor:
    return lambda image, i: fit(image, model, fit_config.model_copy(update={"seed": seed + i}), spec, extractor).pose


def _baseline_predictor(regressor: LoadedRegressor) -> Predictor:
    return lambda image, i: regress_pose(image[:3], regressor)


def run_robustness_study(model: LoadedModel, regressor: LoadedRegressor, fit_config: FitConfig, spec: EnergySpec,
                         eval_config: Optional[EvalConfig] = None, perturb_config: Optional[PerturbConfig] = None,
                         n: Optional[int] = None, seed: int = 0, targets: Optional[List[Target]] = None,
                         extractor: Optional[FeatureExtractor] = None) -> RobustnessReport:
    """
    Perturb held-out targets one factor at a time and compare the mean rotation
    error of the fitter and the regression baseline.

    Targets default to out-of-plane-only inverse-crime images, which is the pose
    space the baseline predicts.
    """
    eval_config = eval_config or EvalConfig()
    perturb_config = perturb_config or PerturbConfig()
    n = n or eval_config.n_samples
    symmetric = _symmetric(model, eval_config)
    if targets is None:
        targets = inverse_crime_targets(model, n, seed, eval_config, fit_config.focal, out_of_plane_only=True,
                                        ref_depth=fit_config.ref_depth)
    if extractor is None:
        extractor = build_extractor(spec, model.encoder)
    methods = {"fit": _fit_predictor(model, fit_config, spec, extractor, seed), "baseline": _baseline_predictor(regressor)}

    rows = []
    for factor in eval_config.factors:
        for magnitude in eval_config.magnitudes:
            transform = lambda image, i, f=factor, m=magnitude: perturb(image, f, m, seed + i, perturb_config)
            for method, predict in methods.items():
                error = _mean_error(targets, predict, symmetric, transform)
                rows.append(RobustnessRow(factor=factor, magnitude=magnitude, method=method,
                                          mean_rotation_error_deg=error, n=len(targets)))
                logger.info("robustness %s m=%.2f %s: %.2f deg", factor, magnitude, method, error)

    ratios: Dict[str, Dict[str, Optional[float]]] = {}
    wins = 0
    lo, hi = min(eval_config.magnitudes), max(eval_config.magnitudes)
    for factor in eval_config.factors:
        ratios[factor] = {}
        for method in methods:
            by_m = {r.magnitude: r.mean_rotation_error_deg for r in rows if r.factor == factor and r.method == method}
            ratios[factor][method] = by_m[hi] / by_m[lo] if by_m[lo] > 0 else None
        fit_ratio, base_ratio = ratios[factor]["fit"], ratios[factor]["baseline"]
        if fit_ratio is not None and base_ratio is not None and fit_ratio < base_ratio:
            wins += 1
    if wins < 2:
        logger.warning("Fitter more robust than the baseline on only %d of %d factors", wins, len(eval_config.factors))
    return RobustnessReport(rows=rows, ratios=ratios, fitter_more_robust_factors=wins)


def instance_gap_study(model: LoadedModel, regressor: LoadedRegressor, data: ToyDataset, fit_config: FitConfig,
                       spec: EnergySpec, n: int, seed: int = 0, eval_config: Optional[EvalConfig] = None,
                       extractor: Optional[FeatureExtractor] = None) -> List[Dict[str, Any]]:
    """Mean rotation error on seen-instance validation views versus unseen test instances."""
    eval_config = eval_config or EvalConfig()
    if not data.split("test"):
        logger.warning("Dataset %s has no unseen test instances; skipping the instance gap study", data.root)
        return []
    symmetric = _symmetric(model, eval_config)
    if extractor is None:
        extractor = build_extractor(spec, model.encoder)
    methods = {"fit": _fit_predictor(model, fit_config, spec, extractor, seed), "baseline": _baseline_predictor(regressor)}
    rows = []
    for split in ("val", "test"):
        targets = dataset_targets(data, split, n, seed, eval_config, out_of_plane_only=True)
        for method, predict in methods.items():
            error = _mean_error(targets, predict, symmetric)
            rows.append({"split": split, "method": method, "mean_rotation_error_deg": error, "n": len(targets)})
    return rows


def write_robustness_outputs(report: RobustnessReport, out_dir: str) -> Dict[str, str]:
    os.makedirs(out_dir, exist_ok=True)
    paths = {"json": os.path.join(out_dir, "robustness.json"), "csv": os.path.join(out_dir, "robustness.csv"),
             "plot": os.path.join(out_dir, "robustness.png")}
    with open(paths["json"], "w", encoding="utf-8") as f:
        f.write(report.model_dump_json(indent=2))
    with open(paths["csv"], "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["factor", "magnitude", "method", "mean_rotation_error_deg", "n"])
        for row in report.rows:
            writer.writerow([row.factor, row.magnitude, row.method, row.mean_rotation_error_deg, row.n])
    factors = sorted({r.factor for r in report.rows}, key=[r.factor for r in report.rows].index)
    fig, axes = plt.subplots(1, max(len(factors), 1), figsize=(4 * max(len(factors), 1), 3.5), squeeze=False)
    for ax, factor in zip(axes[0], factors):
        for method in ("fit", "baseline"):
            rows = report.table(factor, method)
            ax.plot([r.magnitude for r in rows], [r.mean_rotation_error_deg for r in rows], marker="o", label=method)
        ax.set_title(factor)
        ax.set_xlabel("magnitude")
        ax.set_ylabel("mean rotation error (deg)")
        ax.legend()
    fig.tight_layout()
    fig.savefig(paths["plot"], dpi=100)
    plt.close(fig)
    return paths
