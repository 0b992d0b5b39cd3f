"""Report figures written next to the CSV/JSON outputs."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

LEVEL_TITLES = {"lob": "Lobar", "seg": "Segmental", "sub": "Subsegmental"}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_training_curve(history: list[dict], path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    epochs = [h["epoch"] for h in history]
    ax.plot(epochs, [h["loss"] for h in history], color="k", lw=1.5, label="total")
    for key in sorted(k for k in history[0] if k.startswith("s")):
        ax.plot(epochs, [h[key] for h in history], lw=0.8, alpha=0.7, label=key)
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss per tree")
    ax.legend(fontsize=6, ncol=2, frameon=False)
    return _save(fig, path)


def plot_level_metrics(report: dict, path) -> Path:
    """Grouped bars of ACC/PR/RC/F1 per level, CS annotated."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    metrics = ("acc", "pr", "rc", "f1")
    x = np.arange(3)
    width = 0.2
    for k, metric in enumerate(metrics):
        vals = [report[f"{m}_{metric}"] for m in LEVEL_TITLES]
        ax.bar(x + (k - 1.5) * width, vals, width, label=metric.upper())
    ax.set_xticks(x, [LEVEL_TITLES[m] for m in LEVEL_TITLES])
    ax.set_ylim(0, 1.05)
    ax.set_title(f"CS = {report['seg_cs']:.3f}", fontsize=9)
    ax.legend(fontsize=7, ncol=4, loc="lower center", frameon=False)
    return _save(fig, path)


def plot_ablation(table: list[dict], path) -> Path:
    fig, axes = plt.subplots(1, 3, figsize=(10, 3.2), sharey=False)
    names = [r["variant"] for r in table]
    for ax, (col, title) in zip(axes, (("seg_cs", "Segmental CS"), ("seg_acc", "Segmental ACC"),
                                       ("sub_acc", "Subsegmental ACC"))):
        vals = [r[col] for r in table]
        ax.bar(range(len(names)), vals, color="0.6")
        ax.set_xticks(range(len(names)), names, rotation=35, ha="right", fontsize=8)
        lo = min(vals)
        ax.set_ylim(max(0.0, lo - 0.1), 1.0)
        ax.set_title(title, fontsize=9)
    return _save(fig, path)


def plot_subtree_maps(raw, refined, gt, path) -> Path:
    fig, axes = plt.subplots(1, 3, figsize=(9, 3))
    for ax, m, title in zip(axes, (gt, raw, refined), ("ground truth", "raw", "refined")):
        ax.imshow(np.asarray(m), vmin=0, vmax=1, cmap="viridis", interpolation="nearest")
        ax.set_title(title, fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
    return _save(fig, path)
