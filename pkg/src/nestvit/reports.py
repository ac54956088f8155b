"""Matplotlib renderings of run artifacts.

Every function writes a figure file next to the delimited outputs it
visualizes; nothing opens a window (Agg backend only).
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.patches as mpatches
import matplotlib.pyplot as plt
import numpy as np


def loss_curve_figure(history: list[dict], path) -> None:
    """Training loss plus accuracies over epochs."""
    if not history:
        raise ValueError("empty history")
    epochs = [row["epoch"] for row in history]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(epochs, [row["train_loss"] for row in history],
            color="tab:red", label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss", color="tab:red")
    ax2 = ax.twinx()
    ax2.plot(epochs, [row["train_acc"] for row in history],
             color="tab:blue", label="train acc")
    if "eval_acc" in history[0]:
        ax2.plot(epochs, [row["eval_acc"] for row in history],
                 color="tab:green", label="eval acc")
    ax2.set_ylabel("accuracy")
    ax2.set_ylim(0, 1.02)
    lines = ax.get_lines() + ax2.get_lines()
    ax.legend(lines, [ln.get_label() for ln in lines], loc="center right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def ablation_figure(rows: list[dict], path) -> None:
    """Grouped bars of final accuracies per aggregation variant."""
    if not rows:
        raise ValueError("no ablation rows")
    names = [row["variant"] for row in rows]
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(1.6 * len(names) + 2, 4))
    ax.bar(x - 0.2, [row["train_acc"] for row in rows], width=0.4,
           label="train acc")
    ax.bar(x + 0.2, [row["eval_acc"] for row in rows], width=0.4,
           label="eval acc")
    ax.set_xticks(x, names, rotation=20, ha="right")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("accuracy")
    ax.set_title("block aggregation variants")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def heatmap_figure(heat: np.ndarray, path, title: str = "",
                   image: np.ndarray | None = None,
                   bbox: tuple[int, int, int, int] | None = None) -> None:
    """Render a heatmap, optionally over its source image with a box drawn
    as (x0, y0, x1, y1) inclusive pixel coordinates."""
    heat = np.asarray(heat, dtype=np.float64)
    if heat.ndim != 2:
        raise ValueError(f"heatmap must be 2-D, got shape {heat.shape}")
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    if image is not None:
        ax.imshow(np.clip(image, 0.0, 1.0))
        im = ax.imshow(heat, cmap="jet", alpha=0.5,
                       extent=(-0.5, image.shape[1] - 0.5,
                               image.shape[0] - 0.5, -0.5))
    else:
        im = ax.imshow(heat, cmap="viridis")
    if bbox is not None:
        x0, y0, x1, y1 = bbox
        ax.add_patch(mpatches.Rectangle((x0 - 0.5, y0 - 0.5),
                                        x1 - x0 + 1, y1 - y0 + 1,
                                        fill=False, edgecolor="white", lw=2))
    ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def image_grid_figure(images: np.ndarray, path, title: str = "") -> None:
    """Tile a batch of tanh-range images into one figure."""
    images = np.asarray(images)
    if images.ndim != 4:
        raise ValueError(f"expected (b, h, w, c), got shape {images.shape}")
    b = images.shape[0]
    cols = int(np.ceil(np.sqrt(b)))
    rows = int(np.ceil(b / cols))
    fig, axes = plt.subplots(rows, cols, figsize=(2.2 * cols, 2.2 * rows),
                             squeeze=False)
    for i in range(rows * cols):
        ax = axes[i // cols][i % cols]
        ax.axis("off")
        if i < b:
            ax.imshow(np.clip((images[i] + 1.0) / 2.0, 0.0, 1.0))
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
