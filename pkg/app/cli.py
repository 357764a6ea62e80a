"""
Command-line surface: `python -m app <render-data|train|fit|evaluate|ablate> [flags]`.

Exit codes: 0 success, 1 runtime failure (including an unsuccessful fit), 2 usage
or configuration error.
"""
import argparse
import csv
import json
import logging
import os
import sys
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import torch
from PIL import Image
from pydantic import BaseModel, ValidationError

from .baseline import train_regressor
from .config import RunConfig, load_run_config
from .dataset import DEPTH_UNIT, ToyDataset, render_toy_dataset
from .errors import ConfigurationError, FitFailure, PoseSynthError
from .evaluation import (ap_curves, dataset_targets, instance_gap_study, inverse_crime_benchmark,
                         inverse_crime_targets, read_records, run_robustness_study, write_ap_outputs,
                         write_records, write_robustness_outputs)
from .features import build_extractor
from .fitting import fit, plot_fit_trace, render_comparison, render_fit
from .geometry import Pose, encode_target_depth, to_chw
from .model_manager import ModelManager
from .run_log import start_run_log
from .training import train

logger = logging.getLogger(__name__)

# Checkpoints loaded by the running command; emptied when main() returns
manager = ModelManager()

ABLATION_DEFAULTS = {
    "latent_dim": ["4", "16", "128"],
    "variant": ["full", "no3D", "noVAE"],
    "energy": ["perceptual", "l1", "l2", "ssim", "noreg"],
    "restarts": ["1", "4", "16"],
}


# --- Shared plumbing ---

def _setup(args: argparse.Namespace, command: str) -> Tuple[str, RunConfig]:
    run_id = start_run_log(command, args.name, args.log_level)
    config = load_run_config(args.config, _overrides(args))
    logger.info("Resolved config: %s", config.model_dump_json())
    return run_id, config


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    keys = RunConfig().flat_keys()
    return {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}


def _provenance(run_id: str, config: RunConfig, command: str) -> Dict[str, Any]:
    return {"run_id": run_id, "command": command, "config": config.model_dump(mode="json")}


def _out_dir(args: argparse.Namespace, default: str) -> str:
    out = args.out or default
    os.makedirs(out, exist_ok=True)
    return out


def _validated(section: BaseModel, update: Dict[str, Any]) -> BaseModel:
    try:
        return type(section).model_validate(dict(section.model_dump(), **update))
    except ValidationError as err:
        raise ConfigurationError(f"Invalid sweep value {update}: {err}") from err


def _write_json(path: str, payload: Dict[str, Any]):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2)


def _load_target(path: str, depth_path: Optional[str], modality: str) -> torch.Tensor:
    if not os.path.exists(path):
        raise ConfigurationError(f"Target image not found: {path}")
    with Image.open(path) as img:
        rgb = to_chw(np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0)
    if modality == "rgb":
        return rgb
    if not depth_path or not os.path.exists(depth_path):
        raise ConfigurationError("RGB-D fitting needs --depth pointing to a 16-bit depth PNG")
    with Image.open(depth_path) as img:
        depth = torch.from_numpy(np.asarray(img).astype(np.float32) * DEPTH_UNIT)
    return torch.cat([rgb, encode_target_depth(depth).unsqueeze(0)])


# --- Commands ---

def cmd_render_data(args: argparse.Namespace) -> int:
    run_id, config = _setup(args, "render-data")
    records = render_toy_dataset(config.render)
    _write_json(os.path.join(config.render.out, "run.json"), _provenance(run_id, config, "render-data"))
    logger.info("Wrote %d records to %s", len(records), config.render.out)
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    run_id, config = _setup(args, "train")
    provenance = _provenance(run_id, config, "train")
    if config.train.model == "regressor":
        report = train_regressor(config.train, config.perturb, run_id, provenance)
        logger.info("Regressor median val rotation error: %.2f deg", report.median_val_rotation_error_deg)
    else:
        report = train(config.train, run_id, provenance)
        logger.info("Final val L1: %.5f", report.val_l1)
    return 0


def cmd_fit(args: argparse.Namespace) -> int:
    run_id, config = _setup(args, "fit")
    out = _out_dir(args, "runs/fit")
    model_id = manager.load(args.checkpoint, name="fit")
    model = manager.get(model_id)
    if config.fit.modality != model.modality:
        raise ConfigurationError(f"modality mismatch: --modality {config.fit.modality} but checkpoint "
                                 f"{args.checkpoint} was trained on {model.modality}")

    gt: Optional[Pose] = None
    if args.target == "generated":
        target = inverse_crime_targets(model, 1, config.fit.seed, config.eval, config.fit.focal)[0]
        image, gt = target.image, target.gt
    elif args.dataset is not None:
        data = ToyDataset(args.dataset)
        if not 0 <= args.index < len(data.records):
            raise ConfigurationError(f"--index {args.index} outside the dataset ({len(data.records)} records)")
        record = data.records[args.index]
        image = data.load_image(record, config.fit.modality, depth="absolute")
        gt = record.pose
    elif args.target:
        image = _load_target(args.target, args.depth, config.fit.modality)
    else:
        raise ConfigurationError("fit needs --target IMAGE, --target generated, or --dataset D --index I")

    result = fit(image, model, config.fit, config.energy)
    manager.record_fit(model_id, result)
    payload = json.loads(result.to_json(compact=args.compact))
    payload.update(_provenance(run_id, config, "fit"))
    if gt is not None:
        payload["ground_truth"] = gt.model_dump()
    _write_json(os.path.join(out, "fit_result.json"), payload)
    if result.success:
        render_comparison(image, render_fit(result, model), os.path.join(out, "comparison.png"))
        plot_fit_trace(result, gt, os.path.join(out, "trace.png"), bool(model.summary.get("symmetric", False)))
    if not manager.verify_frozen(model_id):
        raise FitFailure("model weights changed during fitting")
    if not result.success:
        raise FitFailure(result.diagnostics.get("reason", "fit failed"))
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    run_id, config = _setup(args, "evaluate")
    out = _out_dir(args, "runs/evaluate")
    provenance = _provenance(run_id, config, "evaluate")

    if args.results:
        records = read_records(args.results)
        write_ap_outputs(ap_curves(records, config.eval), out, provenance)
        return 0
    if not args.checkpoint:
        raise ConfigurationError("evaluate needs --results FILE or --checkpoint C")

    model = manager.get(manager.load(args.checkpoint, name="generative"))
    if args.robustness:
        if not args.baseline:
            raise ConfigurationError("--robustness needs --baseline REGRESSOR_CHECKPOINT")
        regressor = manager.get(manager.load(args.baseline, name="baseline", kind="regressor"))
        data = ToyDataset(args.dataset) if args.dataset else None
        targets = None
        if data is not None:
            targets = dataset_targets(data, "val", config.eval.n_samples, config.fit.seed,
                                      config.eval, out_of_plane_only=True)
        extractor = build_extractor(config.energy, model.encoder)
        report = run_robustness_study(model, regressor, config.fit, config.energy, config.eval, config.perturb,
                                      seed=config.fit.seed, targets=targets, extractor=extractor)
        if data is not None:
            report.instance_gap = instance_gap_study(model, regressor, data, config.fit, config.energy,
                                                     config.eval.n_samples, config.fit.seed, config.eval, extractor)
        report.provenance = provenance
        write_robustness_outputs(report, out)
        return 0

    benchmark = inverse_crime_benchmark(model, config.fit, config.energy, config.eval, seed=config.fit.seed)
    write_records(os.path.join(out, "records.jsonl"), benchmark.records)
    _write_json(os.path.join(out, "benchmark.json"),
                dict(summary=benchmark.summary, trials=[t.model_dump() for t in benchmark.trials], **provenance))
    write_ap_outputs(ap_curves(benchmark.records, config.eval), out, provenance)
    logger.info("Benchmark summary: %s", benchmark.summary)
    return 0


def _ablation_row(value: str, benchmark, extra: Dict[str, Any]) -> Dict[str, Any]:
    row = {"value": value}
    row.update(extra)
    for key in ("AP_10", "AP_60", "mean_rotation_error_deg", "rotation_within_5deg", "median_iterations"):
        row[key] = benchmark.summary[key]
    return row


def cmd_ablate(args: argparse.Namespace) -> int:
    run_id, config = _setup(args, "ablate")
    out = _out_dir(args, "runs/ablate")
    values: List[str] = args.values or ABLATION_DEFAULTS[args.sweep]
    rows = []

    if args.sweep in ("latent_dim", "variant"):
        if not args.dataset:
            raise ConfigurationError(f"--sweep {args.sweep} trains models and needs --dataset")
        for value in values:
            key = args.sweep
            train_config = _validated(config.train, {key: value,
                                                     "out": os.path.join(out, f"{key}_{value}")})
            report = train(train_config, run_id, _provenance(run_id, config, "ablate"))
            loaded = manager.get(manager.load(report.checkpoint, name=f"{key}_{value}"))
            benchmark = inverse_crime_benchmark(loaded, config.fit, config.energy, config.eval, seed=config.fit.seed)
            rows.append(_ablation_row(value, benchmark, {"val_l1": report.val_l1}))
    else:
        if not args.checkpoint:
            raise ConfigurationError(f"--sweep {args.sweep} fits an existing model and needs --checkpoint")
        model = manager.get(manager.load(args.checkpoint, name="ablated"))
        targets = inverse_crime_targets(model, config.eval.n_samples, config.fit.seed, config.eval, config.fit.focal)
        for value in values:
            fit_config, spec = config.fit, config.energy
            if args.sweep == "restarts":
                fit_config = _validated(fit_config, {"n_restarts": value})
            elif value == "noreg":
                spec = _validated(spec, {"kind": "perceptual", "regularizer_weight": 0.0})
            else:
                spec = _validated(spec, {"kind": value})
            benchmark = inverse_crime_benchmark(model, fit_config, spec, config.eval, seed=config.fit.seed,
                                                targets=targets)
            rows.append(_ablation_row(value, benchmark, {}))

    payload = dict(sweep=args.sweep, rows=rows, **_provenance(run_id, config, "ablate"))
    _write_json(os.path.join(out, "ablation.json"), payload)
    with open(os.path.join(out, "ablation.csv"), "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    for row in rows:
        logger.info("ablation %s=%s: %s", args.sweep, row["value"], row)
    return 0


# --- Parser ---

def _common(parser: argparse.ArgumentParser):
    parser.add_argument("--seed", type=int, help="Global seed")
    parser.add_argument("--config", help="Flat JSON config file")
    parser.add_argument("--out", help="Output directory")
    parser.add_argument("--name", help="Run name used for the log file")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])


def _fit_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--energy", dest="kind", choices=["perceptual", "l1", "l2", "ssim"])
    parser.add_argument("--regularizer-weight", dest="regularizer_weight", type=float)
    parser.add_argument("--extractor", choices=["vgg16", "encoder"])
    parser.add_argument("--restarts", dest="n_restarts", type=int)
    parser.add_argument("--max-iterations", dest="max_iterations", type=int)
    parser.add_argument("--modality", choices=["rgb", "rgbd"])
    parser.add_argument("--strict-deterministic", dest="strict_deterministic", action="store_const", const=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="python -m app", description="Pose estimation by generative model fitting")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render-data", help="Render a procedural multi-view dataset")
    _common(p)
    p.add_argument("--category")
    p.add_argument("--instances", type=int)
    p.add_argument("--views", type=int)
    p.add_argument("--test-instances", dest="test_instances", type=int)
    p.add_argument("--image-size", dest="image_size", type=int)
    p.add_argument("--supersample", type=int)
    p.add_argument("--val-fraction", dest="val_fraction", type=float)
    p.set_defaults(handler=cmd_render_data)

    p = sub.add_parser("train", help="Train the conditional VAE or the regression baseline")
    _common(p)
    p.add_argument("--dataset")
    p.add_argument("--model", choices=["vae", "regressor"])
    p.add_argument("--variant", choices=["full", "no3D", "noVAE"])
    p.add_argument("--preset", choices=["default", "small", "tiny"])
    p.add_argument("--latent-dim", dest="latent_dim", type=int)
    p.add_argument("--kl-weight", dest="kl_weight", type=float)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--modality", choices=["rgb", "rgbd"])
    p.add_argument("--depth-range", dest="depth_range", type=float)
    p.add_argument("--max-samples", dest="max_samples", type=int)
    p.add_argument("--same-view", dest="same_view", action="store_const", const=True)
    p.add_argument("--style-split", dest="style_split", action="store_const", const=True)
    p.add_argument("--activation", choices=["lrelu", "silu"])
    p.add_argument("--no-augment", dest="augment", action="store_const", const=False)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("fit", help="Fit pose and latent code to a target image")
    _common(p)
    _fit_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--target", help="Image path, or 'generated' for a model-generated target")
    p.add_argument("--depth", help="16-bit depth PNG for RGB-D targets")
    p.add_argument("--dataset", help="Dataset directory (with --index) as the target source")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--compact", action="store_true", help="Omit per-iteration traces")
    p.set_defaults(handler=cmd_fit)

    p = sub.add_parser("evaluate", help="AP curves, inverse-crime benchmark, robustness study")
    _common(p)
    _fit_flags(p)
    p.add_argument("--results", help="JSON-lines file of evaluation records")
    p.add_argument("--checkpoint")
    p.add_argument("--baseline", help="Regressor checkpoint for the robustness study")
    p.add_argument("--robustness", action="store_true")
    p.add_argument("--dataset", help="Held-out views for the robustness and instance-gap studies")
    p.add_argument("--samples", dest="n_samples", type=int)
    p.add_argument("--workers", type=int)
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("ablate", help="Sweep latent size, variant, energy or restart count")
    _common(p)
    _fit_flags(p)
    p.add_argument("--sweep", required=True, choices=sorted(ABLATION_DEFAULTS))
    p.add_argument("--values", nargs="+")
    p.add_argument("--checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--epochs", type=int)
    p.add_argument("--preset", choices=["default", "small", "tiny"])
    p.add_argument("--samples", dest="n_samples", type=int)
    p.set_defaults(handler=cmd_ablate)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except PoseSynthError as err:
        logger.debug("command failed", exc_info=True)
        sys.stderr.write(f"error: {err}\n")
        return err.exit_code
    except KeyboardInterrupt:
        sys.stderr.write("interrupted\n")
        return 1
    except Exception as err:
        logger.exception("Unexpected failure")
        sys.stderr.write(f"error: {err}\n")
        return 1
    finally:
        manager.cleanup_all()
