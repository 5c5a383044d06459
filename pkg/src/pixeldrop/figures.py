"""Matplotlib figures rendered next to the CSV reports.

Everything draws on the Agg backend straight to files; nothing here opens
a window or depends on a display.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def training_curves(metrics, path):
    """Loss and validation accuracies against the epoch index."""
    epochs = [m["epoch"] for m in metrics]
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax_loss.plot(epochs, [m["train_loss"] for m in metrics], marker="o")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("train loss")
    ax_acc.plot(epochs, [m["val_acc_clean"] for m in metrics],
                marker="o", label="clean")
    ax_acc.plot(epochs, [m["val_acc_drop90"] for m in metrics],
                marker="s", label="drop 0.9")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("validation accuracy")
    ax_acc.set_ylim(0, 1)
    ax_acc.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def accuracy_vs_drop(rates, series, path):
    """Accuracy curves over the drop-rate grid; series: label -> list."""
    fig, ax = plt.subplots(figsize=(5.5, 4))
    for label, accs in series.items():
        ax.plot(rates, accs, marker="o", label=label)
    ax.set_xlabel("drop rate")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def loss_trajectories(trajectories, path, title=""):
    """Per-image attack objective value against the PGD iteration."""
    fig, ax = plt.subplots(figsize=(5.5, 4))
    for row in np.asarray(trajectories):
        ax.plot(range(len(row)), row, alpha=0.5, linewidth=1)
    ax.set_xlabel("iteration")
    ax.set_ylabel("objective")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def filter_montage(filter_images, path, columns=8):
    """Grid of [3,kh,kw] byte images, one tile per first-layer filter."""
    n = len(filter_images)
    columns = min(columns, max(1, n))
    rows = (n + columns - 1) // columns
    fig, axes = plt.subplots(rows, columns, figsize=(columns * 1.1, rows * 1.1))
    axes = np.atleast_1d(axes).ravel()
    for ax in axes:
        ax.set_axis_off()
    for ax, image in zip(axes, filter_images):
        ax.imshow(np.transpose(image, (1, 2, 0)), interpolation="nearest")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def explanation_montage(panels, path):
    """One row per image: original, map, kept-position map, dropped-position map.

    panels: list of (original [3,H,W] in [-1,1], full map, kept map, dropped map).
    """
    titles = ("input", "|gradient|", "kept", "dropped")
    rows = len(panels)
    fig, axes = plt.subplots(rows, 4, figsize=(8, 2 * rows), squeeze=False)
    for r, (original, emap, kept, dropped) in enumerate(panels):
        axes[r][0].imshow(np.clip((np.transpose(original, (1, 2, 0)) + 1) / 2, 0, 1))
        peak = max(float(emap.max()), 1e-12)
        for c, plane in ((1, emap), (2, kept), (3, dropped)):
            axes[r][c].imshow(plane, cmap="inferno", vmin=0, vmax=peak)
        for c in range(4):
            axes[r][c].set_axis_off()
            if r == 0:
                axes[r][c].set_title(titles[c], fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
