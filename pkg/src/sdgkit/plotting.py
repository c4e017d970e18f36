"""Figures written next to the tabular outputs: result bars, training curves, Grad-CAM overlays."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib import colormaps  # noqa: E402
from PIL import Image  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "svg.hashsalt": "sdgkit",
}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # no timestamp so reruns give identical files
    fig.savefig(path, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def plot_results(table, path, title: str | None = None):
    """Grouped bars: one group per target column (sources + average), one bar per row."""
    with plt.rc_context(STYLE):
        cols = [f"C{s}" for s in table.sources] + ["Avg"]
        fig, ax = plt.subplots(figsize=(1.1 * len(cols) + 2, 3.2))
        width = 0.8 / max(len(table.rows), 1)
        x = np.arange(len(cols))
        for i, row in enumerate(table.rows):
            means = [table.mean(row, s) for s in table.sources] + [table.average(row)]
            stds = [table.std(row, s) for s in table.sources] + [None]
            h = [np.nan if m is None else 100 * m for m in means]
            e = [0 if s is None else 100 * s for s in stds]
            ax.bar(x + (i - (len(table.rows) - 1) / 2) * width, h, width, yerr=e, label=row, capsize=2)
        ax.set_xticks(x, cols)
        ax.set_ylabel("target accuracy (%)")
        ax.set_ylim(0, 100)
        ax.set_title(title if title is not None else table.title)
        ax.legend(fontsize=7, frameon=False, ncol=2)
        return _save(fig, path)


def plot_curves(records, path):
    """Validation accuracy per epoch for every run, one panel per method/variant."""
    groups: dict[str, list] = {}
    for r in records:
        groups.setdefault(r.variant or r.method, []).append(r)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, max(len(groups), 1), figsize=(3.0 * max(len(groups), 1), 2.6),
                                 squeeze=False, sharey=True)
        for ax, (name, recs) in zip(axes[0], groups.items()):
            for r in recs:
                ep = [h["epoch"] for h in r.history]
                ax.plot(ep, [h["val_accuracy"] for h in r.history], lw=0.8, alpha=0.8)
                if r.best_epoch is not None and r.history:
                    ax.plot(r.best_epoch, r.history[r.best_epoch]["val_accuracy"], "k.", ms=3)
            ax.set_title(name)
            ax.set_xlabel("epoch")
        axes[0][0].set_ylabel("validation accuracy")
        return _save(fig, path)


def overlay(image: np.ndarray, heatmap: np.ndarray, alpha: float = 0.45, cmap: str = "jet") -> np.ndarray:
    """Blend a [0,1] heatmap over an RGB image; returns ``H x W x 3`` uint8.

    ``image`` may be ``3 x H x W`` or ``H x W x 3``, float in [0,1] or uint8.
    """
    img = np.asarray(image)
    if img.ndim == 3 and img.shape[0] == 3 and img.shape[-1] != 3:
        img = img.transpose(1, 2, 0)
    img = img.astype(np.float64) / 255.0 if img.dtype == np.uint8 else img.astype(np.float64)
    heat = np.clip(np.asarray(heatmap, dtype=np.float64), 0, 1)
    if heat.shape != img.shape[:2]:
        raise ValueError(f"heatmap {heat.shape} does not match image {img.shape[:2]}")
    colored = colormaps[cmap](heat)[..., :3]
    mixed = (1 - alpha) * img + alpha * colored
    return np.round(np.clip(mixed, 0, 1) * 255).astype(np.uint8)


def save_overlay(image, heatmap, path, alpha: float = 0.45) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(overlay(image, heatmap, alpha)).save(path)
    return path
