"""Report figures written next to the CSV/JSON outputs of the CLI."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

REGION_COLORS = {"wt": "tab:green", "tc": "tab:orange", "et": "tab:red"}
CLASS_NAMES = {1: "NCR/NET", 2: "ED", 4: "ET"}

# fixed metadata keeps the PNG bytes reproducible across runs
_PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_training_curves(history: Sequence[Mapping], path) -> Path:
    epochs = [r["epoch"] for r in history]
    fig, (ax_loss, ax_lr) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax_loss.plot(epochs, [r["train_loss"] for r in history], label="train")
    ax_loss.plot(epochs, [r["val_loss"] for r in history], label="validation")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("GDL")
    ax_loss.legend()
    ax_lr.semilogy(epochs, [r["lr"] for r in history], drawstyle="steps-post")
    ax_lr.set_xlabel("epoch")
    ax_lr.set_ylabel("learning rate")
    fig.tight_layout()
    return _save(fig, path)


def plot_class_distribution(counts: Sequence[Mapping[int, int]], path) -> Path:
    """Box plot of tumor-class voxel counts over cases (healthy tissue excluded)."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    data = [[c.get(label, 0) for c in counts] for label in CLASS_NAMES]
    ax.boxplot(data)
    ax.set_xticks(range(1, len(CLASS_NAMES) + 1), list(CLASS_NAMES.values()))
    ax.set_ylabel("voxels per case")
    fig.tight_layout()
    return _save(fig, path)


def plot_uncertainty_curves(curves: Mapping[str, Sequence], path) -> Path:
    """Filtered Dice, FTP ratio and FTN ratio against the threshold per region.

    ``curves`` maps region -> list of points with ``threshold``, ``dice``,
    ``ftp`` and ``ftn`` attributes (or keys), typically averaged over cases.
    """
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.3), sharex=True)
    for region, points in curves.items():
        get = (lambda p, k: p[k]) if points and isinstance(points[0], Mapping) else getattr
        t = [get(p, "threshold") for p in points]
        for ax, key in zip(axes, ("dice", "ftp", "ftn")):
            ax.plot(t, [get(p, key) for p in points], color=REGION_COLORS.get(region), label=region.upper())
    for ax, title in zip(axes, ("Dice (filtered)", "FTP ratio", "FTN ratio")):
        ax.set_title(title)
        ax.set_xlabel("uncertainty threshold")
    axes[0].legend()
    fig.tight_layout()
    return _save(fig, path)


def plot_region_scores(rows: Sequence[Mapping[str, float]], path, metric: str = "dice") -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    regions = list(REGION_COLORS)
    data = [[r[f"{metric}_{g}"] for r in rows] for g in regions]
    ax.boxplot(data)
    ax.set_xticks(range(1, len(regions) + 1), [g.upper() for g in regions])
    ax.set_ylabel(metric)
    fig.tight_layout()
    return _save(fig, path)


def plot_calibration(table: Sequence[Mapping[str, float]], path, key: str = "mean_dice_wt") -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot([r["threshold"] for r in table], [r[key] for r in table], marker="o")
    ax.set_xlabel("component size ratio threshold")
    ax.set_ylabel(key.replace("_", " "))
    fig.tight_layout()
    return _save(fig, path)


def plot_case_overview(image: np.ndarray, labels: np.ndarray, maps: Dict[str, np.ndarray], path, axis: int = 0) -> Path:
    """Middle slice of the FLAIR channel, the prediction and each uncertainty map."""
    idx = image.shape[axis + 1] // 2
    take = lambda v: np.take(v, idx, axis=axis)  # noqa: E731
    panels = [("FLAIR", take(image[0]), "gray"), ("prediction", take(labels), "viridis")]
    panels += [(f"uncertainty {k}", take(v), "magma") for k, v in maps.items()]
    fig, axes = plt.subplots(1, len(panels), figsize=(3 * len(panels), 3))
    for ax, (title, data, cmap) in zip(np.atleast_1d(axes), panels):
        ax.imshow(data, cmap=cmap, vmin=0 if "uncertainty" in title else None, vmax=100 if "uncertainty" in title else None)
        ax.set_title(title)
        ax.axis("off")
    fig.tight_layout()
    return _save(fig, path)
