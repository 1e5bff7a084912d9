"""PNG rendering: files exist, are valid PNGs, and reproduce byte for byte."""

import pytest

from algomimic.plots import (
    save_size_generalisation,
    save_training_curves,
    save_transfer_comparison,
)
from algomimic.training import Metrics

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def demo_metrics():
    return Metrics(
        teacher="bellman_ford",
        count=10,
        pred_accuracy=0.8,
        train_loss_curve=[1.2, 0.7, 0.5, 0.42],
        val_accuracy_curve=[0.2, 0.5, 0.6, 0.72, 0.8],
    )


def demo_rows():
    return [
        {"n": 16, "pred_accuracy": 0.9, "reach_accuracy": 0.99, "chance_pred_accuracy": 0.2},
        {"n": 32, "pred_accuracy": 0.8, "reach_accuracy": 0.97, "chance_pred_accuracy": 0.15},
        {"n": 64, "pred_accuracy": 0.6, "reach_accuracy": 0.93, "chance_pred_accuracy": 0.1},
    ]


def demo_summary():
    methods = {}
    for i, m in enumerate(("transfer", "ablation", "baseline")):
        methods[m] = {
            str(s): {"mean": 0.5 + 0.1 * i, "min": 0.4 + 0.1 * i, "max": 0.6 + 0.1 * i}
            for s in (32, 64)
        }
    return {"sizes": [32, 64], "seeds": [0, 1, 2], "methods": methods}


def test_training_curves_png(tmp_path):
    path = tmp_path / "curves.png"
    save_training_curves(path, demo_metrics(), title="demo")
    assert path.read_bytes()[:8] == PNG_MAGIC


def test_training_curves_handles_zero_epochs(tmp_path):
    metrics = Metrics(teacher="bfs", val_accuracy_curve=[0.3])
    save_training_curves(tmp_path / "flat.png", metrics)
    assert (tmp_path / "flat.png").stat().st_size > 0


def test_size_generalisation_png(tmp_path):
    path = tmp_path / "sizegen.png"
    save_size_generalisation(path, demo_rows(), title="bellman_ford")
    assert path.read_bytes()[:8] == PNG_MAGIC
    with pytest.raises(ValueError):
        save_size_generalisation(tmp_path / "empty.png", [])


def test_transfer_comparison_png(tmp_path):
    path = tmp_path / "transfer.png"
    save_transfer_comparison(path, demo_summary())
    assert path.read_bytes()[:8] == PNG_MAGIC


def test_renders_are_deterministic(tmp_path):
    a, b = tmp_path / "a.png", tmp_path / "b.png"
    save_training_curves(a, demo_metrics(), title="same")
    save_training_curves(b, demo_metrics(), title="same")
    assert a.read_bytes() == b.read_bytes()

    c, d = tmp_path / "c.png", tmp_path / "d.png"
    save_transfer_comparison(c, demo_summary())
    save_transfer_comparison(d, demo_summary())
    assert c.read_bytes() == d.read_bytes()
