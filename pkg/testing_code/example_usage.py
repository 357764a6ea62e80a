"""
Example usage of the pose-estimation library: render data, train, fit, evaluate.
"""
import os
import sys

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from app.config import EnergySpec, EvalConfig, FitConfig, RenderConfig, TrainConfig  # noqa: E402
from app.dataset import render_toy_dataset  # noqa: E402
from app.evaluation import inverse_crime_benchmark, inverse_crime_targets  # noqa: E402
from app.fitting import fit  # noqa: E402
from app.generator import load_model  # noqa: E402
from app.training import train  # noqa: E402

WORKDIR = os.path.join("runs", "example")


def example_render_and_train():
    """Render a small laptop dataset and train a tiny generator on it."""
    print("=== Render + Train Example ===\n")

    data_dir = os.path.join(WORKDIR, "data")
    print("1. Rendering the dataset...")
    records = render_toy_dataset(RenderConfig(category="laptop", instances=4, views=40, test_instances=1,
                                              image_size=16, out=data_dir))
    print(f"   {len(records)} views written to {data_dir}")

    print("\n2. Training (tiny preset, 3 epochs)...")
    report = train(TrainConfig(dataset=data_dir, out=os.path.join(WORKDIR, "model"), preset="tiny",
                               latent_dim=8, epochs=3, batch_size=16))
    print(f"   val L1: {report.val_l1:.4f}")
    print(f"   checkpoint: {report.checkpoint}")
    return report.checkpoint


def example_fit(checkpoint):
    """Fit a target generated by the model itself, so the true pose is known."""
    print("\n\n=== Fitting Example ===\n")

    model = load_model(checkpoint)
    target = inverse_crime_targets(model, 1, seed=0)[0]
    print(f"Ground truth: {target.gt}")

    result = fit(target.image, model, FitConfig(n_restarts=8, max_iterations=100), EnergySpec(kind="l1"))
    print(f"Selected restart {result.selected} of {len(result.restarts)}, energy {result.energy:.5f}")
    print(f"Estimated:    {result.pose}")


def example_benchmark(checkpoint):
    """Inverse-crime benchmark over a handful of generated targets."""
    print("\n\n=== Benchmark Example ===\n")

    model = load_model(checkpoint)
    bench = inverse_crime_benchmark(model, FitConfig(n_restarts=4, max_iterations=50), EnergySpec(kind="l1"),
                                    EvalConfig(n_samples=10, workers=2))
    for key, value in bench.summary.items():
        print(f"   {key}: {value}")


if __name__ == "__main__":
    ckpt = example_render_and_train()
    example_fit(ckpt)
    example_benchmark(ckpt)
