"""Static PNG figures: loss curves and prediction composites."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

CLASS_COLORS = {
    "background": (0.1, 0.1, 0.1),
    "foreground": (0.95, 0.85, 0.2),
    "road": (0.55, 0.55, 0.6),
    "vehicle": (0.9, 0.2, 0.15),
}


def plot_loss_curves(history: list[dict], path) -> None:
    steps = [r["step"] for r in history]
    fig, axes = plt.subplots(1, 2, figsize=(10, 3.6))
    for key in ("total", "focal_main", "focal_aux"):
        axes[0].plot(steps, [r[key] for r in history], label=key, lw=1)
    axes[0].set_yscale("log")
    axes[0].set_xlabel("step")
    axes[0].set_title("objective")
    axes[0].legend(fontsize=8)
    for key in ("l_fw", "l_bw"):
        axes[1].plot(steps, [r[key] for r in history], label=key, lw=1)
    axes[1].set_yscale("log")
    axes[1].set_xlabel("step")
    axes[1].set_title("cycle terms")
    axes[1].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def colorize(classes: np.ndarray, class_set) -> np.ndarray:
    out = np.zeros(classes.shape + (3,))
    for i, name in enumerate(class_set):
        out[classes == i] = CLASS_COLORS.get(name, (1, 1, 1))
    return out


def plot_prediction(image: np.ndarray, classes: np.ndarray, class_set, path, gt=None) -> None:
    panels = [("front view", image), ("predicted BEV", colorize(classes, class_set))]
    if gt is not None:
        panels.append(("ground truth BEV", colorize(gt, class_set)))
    fig, axes = plt.subplots(1, len(panels), figsize=(3.4 * len(panels), 3.4))
    for ax, (title, arr) in zip(axes, panels):
        ax.imshow(arr, interpolation="nearest")
        ax.set_title(title, fontsize=9)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
