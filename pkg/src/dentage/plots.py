"""Matplotlib figures for the harness (headless Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# no timestamp in PNG metadata so reruns are byte-identical
_PNG_META = {"Software": None}


def training_curves(history: list, path, title: str | None = None) -> Path:
    epochs = [r.epoch for r in history]
    fig, (ax_loss, ax_mae) = plt.subplots(1, 2, figsize=(10, 4))
    ax_loss.plot(epochs, [r.train_loss for r in history], label="train")
    ax_loss.plot(epochs, [r.val_loss for r in history], label="validation")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss (MSE, years²)")
    ax_loss.legend()
    ax_mae.plot(epochs, [r.train_mae for r in history], label="train")
    ax_mae.plot(epochs, [r.val_mae for r in history], label="validation")
    ax_mae.set_xlabel("epoch")
    ax_mae.set_ylabel("MAE (years)")
    ax_mae.legend()
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return Path(path)


def actual_vs_predicted(actual, predicted, path, title: str | None = None) -> Path:
    actual = np.asarray(actual, dtype=float)
    predicted = np.asarray(predicted, dtype=float)
    lo = float(min(actual.min(), predicted.min()))
    hi = float(max(actual.max(), predicted.max()))
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.scatter(actual, predicted, s=10, alpha=0.7)
    ax.plot([lo, hi], [lo, hi], color="k", linewidth=1, label="y = x")
    ax.set_xlabel("actual age (years)")
    ax.set_ylabel("estimated age (years)")
    ax.legend(loc="upper left")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return Path(path)


def decade_edges(ages) -> np.ndarray:
    ages = np.asarray(ages, dtype=float)
    lo = np.floor(ages.min() / 10.0) * 10.0
    hi = (np.floor(ages.max() / 10.0) + 1.0) * 10.0
    return np.arange(lo, hi + 1e-9, 10.0)


def age_histogram(ages, path) -> tuple[Path, np.ndarray, np.ndarray]:
    """Histogram with 10-year bins; returns (path, counts, edges)."""
    edges = decade_edges(ages)
    counts, _ = np.histogram(ages, bins=edges)
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.hist(ages, bins=edges, edgecolor="black")
    ax.set_xlabel("age (years)")
    ax.set_ylabel("images")
    ax.set_xticks(edges)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return Path(path), counts, edges
