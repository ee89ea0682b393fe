"""Training-curve figures rendered from a history CSV."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

METRICS = ("acc", "precision", "recall", "f1")


def read_history(path) -> dict:
    """Columns of a history CSV as float lists; empty cells become NaN."""
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return {}
    return {k: [float(r[k]) if r[k] != "" else float("nan") for r in rows] for k in rows[0]}


def _style(ax, xlabel, ylabel):
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.grid(alpha=0.3)
    for side in ("top", "right"):
        ax.spines[side].set_visible(False)


def plot_loss(hist: dict, path):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(hist["epoch"], hist["train_loss"], label="train")
    if "val_loss" in hist:
        ax.plot(hist["epoch"], hist["val_loss"], "o-", ms=3, label="validation")
    _style(ax, "epoch", "weighted cross-entropy")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_metrics(hist: dict, path):
    """One row per split (train, validation), one panel per metric."""
    fig, axes = plt.subplots(2, len(METRICS), figsize=(12, 5), sharex=True, sharey=True)
    for r, split in enumerate(("train", "val")):
        for c, m in enumerate(METRICS):
            ax = axes[r, c]
            key = f"{split}_{m}"
            if key in hist:
                ax.plot(hist["epoch"], hist[key], "o-" if split == "val" else "-", ms=3)
            ax.set_ylim(-0.02, 1.02)
            _style(ax, "epoch" if r == 1 else "", m if c == 0 else "")
            ax.set_title(f"{'train' if split == 'train' else 'validation'} {m}", fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_report(history_csv, out_dir) -> list:
    hist = read_history(history_csv)
    if not hist:
        raise ValueError(f"{history_csv}: no rows")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "loss.png", out / "metrics.png"]
    plot_loss(hist, paths[0])
    plot_metrics(hist, paths[1])
    return paths
