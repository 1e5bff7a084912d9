"""Headless figure rendering for the report paths.

Each figure goes straight to a PNG with pinned dpi and metadata, so rerunning
a command reproduces the image byte for byte (the default PNG metadata would
embed the backend version string).
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .training import Metrics

DPI = 120
_METADATA = {"Software": "algomimic"}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=DPI, metadata=_METADATA)
    plt.close(fig)


def save_training_curves(path, metrics: Metrics, title: str = "") -> None:
    """Training loss and the validation selection metric, one point per epoch."""
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    loss = list(metrics.train_loss_curve)
    ax.plot(range(1, len(loss) + 1), loss, color="tab:red", label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("train loss")
    twin = ax.twinx()
    val = list(metrics.val_accuracy_curve)  # entry 0 is the pre-training model
    twin.plot(range(len(val)), val, color="tab:blue", label="val accuracy")
    twin.set_ylabel("validation accuracy")
    twin.set_ylim(0.0, 1.05)
    handles = ax.get_lines() + twin.get_lines()
    ax.legend(handles, [h.get_label() for h in handles], loc="center right")
    if title:
        ax.set_title(title)
    _save(fig, path)


def save_size_generalisation(path, rows: list[dict], title: str = "") -> None:
    """Accuracy against graph size, with the uniform-guess chance level."""
    if not rows:
        raise ValueError("size-generalisation plot needs at least one row")
    sizes = [int(r["n"]) for r in rows]
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    ax.plot(sizes, [float(r["pred_accuracy"]) for r in rows],
            marker="o", color="tab:blue", label="predecessor accuracy")
    ax.plot(sizes, [float(r["reach_accuracy"]) for r in rows],
            marker="s", color="tab:green", label="reach accuracy")
    ax.plot(sizes, [float(r["chance_pred_accuracy"]) for r in rows],
            linestyle="--", color="tab:gray", label="chance (uniform over in-edges)")
    ax.set_xscale("log", base=2)
    ax.set_xticks(sizes, [str(s) for s in sizes])
    ax.set_xlabel("graph size n")
    ax.set_ylabel("held-out accuracy")
    ax.set_ylim(0.0, 1.05)
    ax.legend(loc="lower left")
    if title:
        ax.set_title(title)
    _save(fig, path)


def save_transfer_comparison(path, summary: dict, title: str = "") -> None:
    """Mean accuracy per method against training-set size, min-max band."""
    sizes = [int(s) for s in summary["sizes"]]
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for method in sorted(summary["methods"]):
        per_size = summary["methods"][method]
        mean = [per_size[str(s)]["mean"] for s in sizes]
        lo = [per_size[str(s)]["min"] for s in sizes]
        hi = [per_size[str(s)]["max"] for s in sizes]
        line, = ax.plot(sizes, mean, marker="o", label=method)
        ax.fill_between(sizes, lo, hi, color=line.get_color(), alpha=0.15)
    ax.set_xscale("log", base=2)
    ax.set_xticks(sizes, [str(s) for s in sizes])
    ax.set_xlabel("training samples")
    ax.set_ylabel("validation predecessor accuracy")
    ax.set_ylim(0.0, 1.05)
    ax.legend(loc="lower right")
    if title:
        ax.set_title(title)
    _save(fig, path)
