"""Figure rendering for the CLI report paths.

Everything here draws to files through the Agg backend; nothing opens a
window. Each helper returns the path it wrote so callers can log it.
"""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .metrics import METRIC_KEYS

LOSS_COLUMNS = ("ce", "m2m", "total")


def save_loss_curves(path, history):
    """Line plot of whichever loss terms the history rows carry."""
    path = Path(path)
    epochs = [row["epoch"] for row in history]
    fig, ax = plt.subplots(figsize=(6.4, 3.6), constrained_layout=True)
    for column in LOSS_COLUMNS:
        if history and column in history[0]:
            ax.plot(epochs, [row[column] for row in history], label=column)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def save_fold_metrics(path, report):
    """Grouped bars per fold with the mean +/- std overlaid."""
    path = Path(path)
    data = report.as_dict()
    folds = data["folds"]
    centers = np.arange(len(METRIC_KEYS), dtype=float)
    width = 0.8 / max(len(folds), 1)

    fig, ax = plt.subplots(figsize=(6.4, 3.6), constrained_layout=True)
    for k, fold in enumerate(folds):
        offset = (k - (len(folds) - 1) / 2.0) * width
        ax.bar(centers + offset, [fold[m] for m in METRIC_KEYS], width=width, label=f"fold {k}")
    ax.errorbar(
        centers,
        [data["mean"][m] for m in METRIC_KEYS],
        yerr=[data["std"][m] for m in METRIC_KEYS],
        fmt="k_",
        capsize=4,
        label="mean +/- std",
    )
    ax.set_xticks(centers)
    ax.set_xticklabels(METRIC_KEYS)
    ax.set_ylim(0.0, 1.05)
    ax.legend(fontsize="small")
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def save_heatmap(path, matrix, title="", xlabel="", ylabel=""):
    """Render a rank-2 array (attention scores, similarities) as an image."""
    path = Path(path)
    matrix = np.asarray(matrix)
    fig, ax = plt.subplots(figsize=(5.0, 4.2), constrained_layout=True)
    image = ax.imshow(matrix, aspect="auto")
    fig.colorbar(image, ax=ax, shrink=0.9)
    if title:
        ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
