"""SVG figures for training runs: loss curve and score histogram."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "svg.hashsalt": "matcn",
}


def plot_loss_curve(history, path) -> None:
    """Train loss (left axis) and validation accuracy (right axis) per epoch."""
    epochs = [h.epoch for h in history]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        ax.plot(epochs, [h.train_loss for h in history], marker="o", ms=3, color="C0", label="train loss")
        ax.set_xlabel("epoch")
        ax.set_ylabel("train BCE loss")
        acc = ax.twinx()
        acc.spines["right"].set_visible(True)
        acc.plot(epochs, [h.val_accuracy for h in history], marker="s", ms=3, color="C1", label="val accuracy")
        acc.set_ylabel("val accuracy")
        acc.set_ylim(0.0, 1.0)
        lines = ax.get_lines() + acc.get_lines()
        ax.legend(lines, [ln.get_label() for ln in lines], loc="center right")
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def plot_score_histogram(scores, labels, path, threshold: float = 0.5) -> None:
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    bins = np.linspace(0.0, 1.0, 21)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        ax.hist(scores[labels == 0], bins=bins, alpha=0.6, label="same driver")
        ax.hist(scores[labels == 1], bins=bins, alpha=0.6, label="different drivers")
        ax.axvline(threshold, color="k", lw=0.8, ls="--")
        ax.set_xlabel("dissimilarity score")
        ax.set_ylabel("pairs")
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
