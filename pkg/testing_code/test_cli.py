import csv
import json
import math
import os

import pytest

from app.cli import main
from app.evaluation import EvalRecord, write_records
from app.geometry import Pose

FAST = ["--energy", "l1", "--restarts", "2", "--max-iterations", "3"]


def _json(path):
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def test_render_data(tmp_path):
    out = str(tmp_path / "data")
    code = main(["render-data", "--out", out, "--category", "mug", "--instances", "2", "--views", "2",
                 "--image-size", "16", "--supersample", "1", "--seed", "3"])
    assert code == 0
    assert os.path.exists(os.path.join(out, "manifest.jsonl"))
    run = _json(os.path.join(out, "run.json"))
    assert run["config"]["render"]["category"] == "mug"
    assert run["config"]["render"]["seed"] == 3
    assert run["run_id"]


def test_unknown_category_is_a_usage_error(tmp_path, capsys):
    code = main(["render-data", "--out", str(tmp_path), "--category", "teapot"])
    assert code == 2
    assert "teapot" in capsys.readouterr().err


def test_train_without_dataset(tmp_path):
    assert main(["train", "--dataset", str(tmp_path / "missing"), "--out", str(tmp_path / "run")]) == 2


def test_bad_config_file(tmp_path):
    config = tmp_path / "run.json"
    config.write_text(json.dumps({"restart_count": 3}))
    assert main(["fit", "--checkpoint", "x.pt", "--config", str(config)]) == 2


def test_missing_required_flag_exits_2():
    with pytest.raises(SystemExit) as err:
        main(["fit"])
    assert err.value.code == 2


def test_fit_generated_target(trained_checkpoint, tmp_path):
    out = str(tmp_path / "fit")
    code = main(["fit", "--checkpoint", trained_checkpoint, "--target", "generated", "--out", out] + FAST)
    assert code == 0
    result = _json(os.path.join(out, "fit_result.json"))
    assert len(result["restarts"]) == 2
    assert result["config"]["fit"]["n_restarts"] == 2
    assert result["run_id"] and result["ground_truth"]
    assert os.path.exists(os.path.join(out, "comparison.png"))
    assert os.path.exists(os.path.join(out, "trace.png"))


def test_fit_dataset_view(trained_checkpoint, tiny_dataset, tmp_path):
    out = str(tmp_path / "fit")
    code = main(["fit", "--checkpoint", trained_checkpoint, "--dataset", tiny_dataset, "--index", "1",
                 "--out", out, "--compact"] + FAST)
    assert code == 0
    result = _json(os.path.join(out, "fit_result.json"))
    assert "energy_trace" not in result["restarts"][0]
    code = main(["fit", "--checkpoint", trained_checkpoint, "--dataset", tiny_dataset, "--index", "999",
                 "--out", out] + FAST)
    assert code == 2


def test_fit_modality_mismatch(trained_checkpoint, tmp_path, capsys):
    code = main(["fit", "--checkpoint", trained_checkpoint, "--target", "generated", "--modality", "rgbd",
                 "--out", str(tmp_path)])
    assert code == 2
    assert "modality" in capsys.readouterr().err


def test_evaluate_results_file(tmp_path):
    records = [EvalRecord(sample_id=str(i), gt=Pose(), pred=Pose(rx=math.radians(e)))
               for i, e in enumerate([2.0, 12.0, 70.0])]
    results = str(tmp_path / "records.jsonl")
    write_records(results, records)
    out = str(tmp_path / "eval")
    assert main(["evaluate", "--results", results, "--out", out]) == 0
    summary = _json(os.path.join(out, "ap.json"))
    assert summary["AP_10"] == pytest.approx(1 / 3)
    assert summary["config"]["eval"]["detection_threshold"] == 0.1


def test_evaluate_malformed_results(tmp_path):
    results = tmp_path / "records.jsonl"
    results.write_text("not json\n")
    assert main(["evaluate", "--results", str(results), "--out", str(tmp_path / "eval")]) == 2


def test_evaluate_benchmark(trained_checkpoint, tmp_path):
    out = str(tmp_path / "bench")
    assert main(["evaluate", "--checkpoint", trained_checkpoint, "--samples", "2", "--out", out] + FAST) == 0
    assert os.path.exists(os.path.join(out, "records.jsonl"))
    assert _json(os.path.join(out, "benchmark.json"))["summary"]["n"] == 2


def test_evaluate_robustness(trained_checkpoint, regressor_checkpoint, tiny_dataset, tmp_path):
    config = tmp_path / "run.json"
    config.write_text(json.dumps({"magnitudes": [0.0, 1.0], "factors": ["occlusion"]}))
    out = str(tmp_path / "robust")
    code = main(["evaluate", "--checkpoint", trained_checkpoint, "--baseline", regressor_checkpoint,
                 "--robustness", "--dataset", tiny_dataset, "--samples", "2", "--config", str(config),
                 "--out", out] + FAST)
    assert code == 0
    report = _json(os.path.join(out, "robustness.json"))
    assert len(report["rows"]) == 4
    assert len(report["instance_gap"]) == 4
    assert report["provenance"]["run_id"]


def test_ablate_restarts(trained_checkpoint, tmp_path):
    out = str(tmp_path / "ablate")
    code = main(["ablate", "--sweep", "restarts", "--values", "1", "2", "--checkpoint", trained_checkpoint,
                 "--samples", "2", "--energy", "l1", "--max-iterations", "2", "--out", out])
    assert code == 0
    with open(os.path.join(out, "ablation.csv"), encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    assert [r["value"] for r in rows] == ["1", "2"]
    assert _json(os.path.join(out, "ablation.json"))["sweep"] == "restarts"


def test_ablate_rejects_bad_values(trained_checkpoint, tmp_path):
    code = main(["ablate", "--sweep", "energy", "--values", "cosine", "--checkpoint", trained_checkpoint,
                 "--samples", "1", "--out", str(tmp_path)])
    assert code == 2


def test_ablate_latent_dim_trains_one_model_per_value(tiny_dataset, tmp_path):
    out = str(tmp_path / "ablate")
    code = main(["ablate", "--sweep", "latent_dim", "--values", "4", "16", "128", "--dataset", tiny_dataset,
                 "--preset", "tiny", "--epochs", "1", "--samples", "1", "--out", out] + FAST)
    assert code == 0
    with open(os.path.join(out, "ablation.csv"), encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    assert [r["value"] for r in rows] == ["4", "16", "128"]
    assert all(float(r["val_l1"]) >= 0.0 for r in rows)
    for value in ("4", "16", "128"):
        assert os.path.exists(os.path.join(out, f"latent_dim_{value}", "model.pt"))


@pytest.mark.slow
def test_render_data_full_size_is_reproducible(tmp_path):
    manifests = []
    for name in ("a", "b"):
        out = str(tmp_path / name)
        code = main(["render-data", "--category", "laptop", "--instances", "8", "--views", "200", "--seed", "1",
                     "--out", out])
        assert code == 0
        with open(os.path.join(out, "manifest.jsonl"), "rb") as f:
            manifests.append(f.read())
    assert len(manifests[0].splitlines()) == 1600
    assert manifests[0] == manifests[1]
