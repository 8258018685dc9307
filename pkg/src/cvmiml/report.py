"""Figure and table rendering for run outputs.

Figures are PNGs rendered with the Agg backend and stripped of the
writer-version metadata so reruns produce byte-identical files; tables
are plain CSV. Every function returns the path it wrote.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

_SAVE_KW = dict(dpi=120, metadata={"Software": None})


def write_csv(path: str | Path, rows: list[dict], fieldnames: list[str]) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in fieldnames})
    return path


def save_loss_curves(history: list[dict], path: str | Path) -> Path:
    """Per-term loss trajectories with the ramp weight on a twin axis."""
    path = Path(path)
    epochs = [r["epoch"] for r in history]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for key, label in [
        ("loss_classification", "classification"),
        ("loss_intra_bag", "intra-bag"),
        ("loss_cross_view", "cross-view"),
        ("loss_entropy", "entropy"),
        ("loss_total", "total"),
    ]:
        ax.plot(epochs, [r[key] for r in history], label=label, linewidth=1.4)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.grid(alpha=0.3)
    twin = ax.twinx()
    twin.plot(epochs, [r["delta"] for r in history], color="gray", linestyle=":", linewidth=1.2)
    twin.set_ylabel("ramp weight", color="gray")
    twin.set_ylim(0, 1.05)
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path


def save_cmc_curve(curve: tuple[float, ...], map_value: float, path: str | Path) -> Path:
    """Full CMC curve as a step plot, annotated with mAP."""
    path = Path(path)
    ranks = list(range(1, len(curve) + 1))
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.step(ranks, list(curve), where="post", linewidth=1.6)
    ax.set_xlabel("rank")
    ax.set_ylabel("matching rate")
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    ax.set_title(f"CMC (mAP = {map_value:.4f})", fontsize=10)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path


def save_ablation_chart(rows: list[dict], path: str | Path) -> Path:
    """Grouped bars: median rank-1 and mAP per ablation configuration."""
    path = Path(path)
    names = [r["config"] for r in rows]
    r1 = [r["rank1_median"] for r in rows]
    mp = [r["map_median"] for r in rows]
    x = range(len(names))
    width = 0.38
    fig, ax = plt.subplots(figsize=(7.5, 4))
    ax.bar([i - width / 2 for i in x], r1, width=width, label="rank-1 (median)")
    ax.bar([i + width / 2 for i in x], mp, width=width, label="mAP (median)")
    ax.set_xticks(list(x))
    ax.set_xticklabels(names, rotation=15, ha="right", fontsize=8)
    ax.set_ylim(0, 1.02)
    ax.grid(axis="y", alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path
