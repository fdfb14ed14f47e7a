"""Matplotlib figures written next to the JSON reports."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .explain import ActiveMask, overlay_rgb  # noqa: E402

DPI = 120


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    # pinned metadata keeps the PNG bytes reproducible
    fig.savefig(path, dpi=DPI, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_training(report, path) -> Path:
    """Loss and validation mean AUC per epoch."""
    epochs = np.arange(1, len(report.losses) + 1)
    fig, (ax_l, ax_a) = plt.subplots(1, 2, figsize=(8, 3))
    ax_l.plot(epochs, report.losses, marker="o", ms=3)
    ax_l.set_xlabel("epoch")
    ax_l.set_ylabel("train BCE")
    auc = [np.nan if v is None else v for v in report.val_mean_auc]
    ax_a.plot(epochs, auc, marker="o", ms=3, color="tab:red")
    if report.best_epoch is not None:
        ax_a.axvline(report.best_epoch + 1, color="gray", ls="--", lw=0.8)
    ax_a.set_xlabel("epoch")
    ax_a.set_ylabel("val mean AUC")
    ax_a.set_ylim(0.0, 1.0)
    return _save(fig, path)


def plot_explanations(image: np.ndarray, masks: Sequence[ActiveMask], path, title: str = "") -> Path:
    """Input image followed by one overlay panel per selected mask."""
    n = len(masks) + 1
    fig, axes = plt.subplots(1, n, figsize=(2.2 * n, 2.4))
    axes = np.atleast_1d(axes)
    img = image[0] if image.ndim == 3 else image
    axes[0].imshow(img, cmap="gray", vmin=0, vmax=1)
    axes[0].set_title("input", fontsize=8)
    for ax, am in zip(axes[1:], masks):
        ax.imshow(overlay_rgb(img, am.heatmap))
        ax.set_title(f"mask {am.index}  a={am.activity:.3g}", fontsize=8)
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    if title:
        fig.suptitle(title, fontsize=9)
    return _save(fig, path)


def plot_per_class_auc(class_names: Sequence[str], per_class: Sequence[float | None], path) -> Path:
    vals = [np.nan if v is None else v for v in per_class]
    fig, ax = plt.subplots(figsize=(max(3, 0.5 * len(vals) + 1), 2.8))
    ax.bar(range(len(vals)), vals, color="tab:blue")
    ax.set_xticks(range(len(vals)))
    ax.set_xticklabels(class_names, rotation=45, ha="right", fontsize=7)
    ax.set_ylim(0.0, 1.0)
    ax.set_ylabel("AUC")
    return _save(fig, path)
