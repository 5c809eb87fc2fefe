"""Figures written next to the results tables (matplotlib, Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_training(record, path) -> Path:
    """Per-epoch training losses and validation F1/mA for one run."""
    ep = [e.epoch for e in record.epochs]
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3))
        ax1.plot(ep, [e.train_loss_a for e in record.epochs], label="task A")
        ax1.plot(ep, [e.train_loss_b for e in record.epochs], label="task B")
        ax1.set_xlabel("epoch")
        ax1.set_ylabel("training BCE")
        ax1.legend(frameon=False)
        ax2.plot(ep, [e.val["f1"] for e in record.epochs], label="F1")
        ax2.plot(ep, [e.val["mA"] for e in record.epochs], label="mA")
        ax2.axvline(record.best_epoch, color="0.5", ls=":", lw=1)
        ax2.set_xlabel("epoch")
        ax2.set_ylabel("validation")
        ax2.legend(frameon=False)
        fig.suptitle(record.config.get("sharing_kind", ""))
        return _save(fig, path)


def plot_suite(summary: list[dict], path, metric: str = "f1") -> Path:
    """Bar chart of mean +- std of ``metric`` per variant."""
    names = [row["variant"] for row in summary]
    means = np.array([row.get(f"{metric}_mean", np.nan) for row in summary], dtype=float)
    stds = np.array([row.get(f"{metric}_std", 0.0) for row in summary], dtype=float)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4, 0.8 * len(names) + 1), 3))
        x = np.arange(len(names))
        ax.bar(x, means, yerr=stds, capsize=3, color="tab:blue", alpha=0.8)
        ax.set_xticks(x)
        ax.set_xticklabels(names, rotation=30, ha="right")
        finite = means[np.isfinite(means)]
        if finite.size:
            lo = max(0.0, finite.min() - 3 * max(stds.max(initial=0.0), 0.01))
            ax.set_ylim(lo, min(1.0, finite.max() + 3 * max(stds.max(initial=0.0), 0.01)))
        ax.set_ylabel(f"test {metric}")
        return _save(fig, path)


def plot_maps(image: np.ndarray, maps: list[tuple[int, np.ndarray, np.ndarray]], path) -> Path:
    """One image and its per-layer task-A / task-B attention maps."""
    cols = 1 + len(maps)
    with plt.rc_context({**STYLE, "axes.grid": False}):
        fig, axes = plt.subplots(2, cols, figsize=(1.3 * cols, 4.2), squeeze=False)
        for row in range(2):
            axes[row, 0].imshow(np.clip(image, 0, 1))
            axes[row, 0].set_title("input" if row == 0 else "")
        for j, (layer, ma, mb) in enumerate(maps, start=1):
            axes[0, j].imshow(ma, cmap="gray", vmin=0, vmax=1)
            axes[0, j].set_title(f"layer {layer} A")
            axes[1, j].imshow(mb, cmap="gray", vmin=0, vmax=1)
            axes[1, j].set_title(f"layer {layer} B")
        for ax in axes.ravel():
            ax.set_xticks([])
            ax.set_yticks([])
        return _save(fig, path)
