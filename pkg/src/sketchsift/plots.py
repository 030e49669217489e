"""Report figures rendered to files next to their CSV counterparts."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .embedder import EpochStats
from .oracles import GatingReport, NoiseResistanceReport
from .ppo import SelectorEpochStats
from .ranking import CurveSample
from .sketch import StrokeMask, VectorSketch


def save_retrieval_training(log: Sequence[EpochStats], path: Path | str) -> None:
    fig, ax_loss = plt.subplots(figsize=(7, 4))
    epochs = [s.epoch for s in log]
    ax_loss.plot(epochs, [s.loss for s in log], color="tab:red", label="triplet loss")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss", color="tab:red")
    ax_acc = ax_loss.twinx()
    ax_acc.plot(epochs, [s.val_acc1 for s in log], color="tab:blue", label="val acc@1")
    ax_acc.set_ylabel("val acc@1", color="tab:blue")
    ax_acc.set_ylim(0, 1)
    fig.suptitle("retrieval training")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_selector_training(log: Sequence[SelectorEpochStats], path: Path | str) -> None:
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.5))
    epochs = [s.epoch for s in log]
    axes[0].plot(epochs, [s.mean_reward for s in log])
    axes[0].set_title("mean episode reward")
    axes[1].plot(epochs, [s.acc1 for s in log], label="acc@1")
    axes[1].plot(epochs, [s.acc5 for s in log], label="acc@5")
    axes[1].set_ylim(0, 1)
    axes[1].legend()
    axes[1].set_title("val accuracy (greedy subset)")
    axes[2].plot(epochs, [s.entropy for s in log])
    axes[2].set_title("policy entropy")
    for ax in axes:
        ax.set_xlabel("epoch")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_onthefly_curves(
    curves: Sequence[Sequence[CurveSample]], path: Path | str, label: str = ""
) -> None:
    """Mean percentile and 1/rank against completion fraction, binned to a
    common grid across episodes."""
    grid = np.linspace(0.05, 1.0, 20)
    pct = np.zeros_like(grid)
    inv = np.zeros_like(grid)
    counts = np.zeros_like(grid)
    for samples in curves:
        for s in samples:
            i = int(np.clip(np.searchsorted(grid, s.fraction), 0, len(grid) - 1))
            pct[i] += s.percentile
            inv[i] += s.inv_rank
            counts[i] += 1
    mask = counts > 0
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    axes[0].plot(grid[mask], pct[mask] / counts[mask])
    axes[0].set_ylabel("mean ranking percentile")
    axes[1].plot(grid[mask], inv[mask] / counts[mask])
    axes[1].set_ylabel("mean 1/rank")
    for ax in axes:
        ax.set_xlabel("fraction of sketch")
        ax.set_xlim(0, 1)
    if label:
        fig.suptitle(label)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_accuracy_bars(report: NoiseResistanceReport, path: Path | str) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    conditions = ["clean", "noisy", "noisy+selector"]
    acc1 = [report.acc1_clean, report.acc1_noisy, report.acc1_selected]
    acc5 = [report.acc5_clean, report.acc5_noisy, report.acc5_selected]
    x = np.arange(3)
    ax.bar(x - 0.18, acc1, width=0.36, label="acc@1")
    ax.bar(x + 0.18, acc5, width=0.36, label="acc@5")
    ax.set_xticks(x, conditions)
    ax.set_ylim(0, 1)
    ax.legend()
    ax.set_title("retrieval accuracy by condition")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_critic_scatter(
    samples: Sequence[tuple[float, float]], rho: float, path: Path | str
) -> None:
    scores, pcts = zip(*samples)
    fig, ax = plt.subplots(figsize=(5, 4.5))
    ax.scatter(scores, pcts, s=6, alpha=0.35)
    ax.set_xlabel("critic score")
    ax.set_ylabel("ranking percentile")
    ax.set_title(f"critic vs percentile (spearman rho = {rho:.3f})")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_gating_summary(reports: Sequence[GatingReport], path: Path | str) -> None:
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    taus = [r.threshold for r in reports]
    axes[0].plot(taus, [r.feeds_saved_frac for r in reports], marker="o")
    axes[0].set_xlabel("threshold")
    axes[0].set_ylabel("feeds saved")
    axes[0].set_ylim(0, 1)
    axes[1].plot(taus, [r.r_a_gated for r in reports], marker="o", label="gated r@A")
    axes[1].plot(taus, [r.r_a_full for r in reports], marker="s", label="ungated r@A")
    axes[1].set_xlabel("threshold")
    axes[1].legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_selection_examples(
    sketches: Sequence[VectorSketch],
    masks: Sequence[StrokeMask],
    path: Path | str,
    max_panels: int = 8,
) -> None:
    """Selected strokes solid, dropped strokes dashed and dimmed."""
    n = min(len(sketches), max_panels)
    cols = min(4, n)
    rows = (n + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(3 * cols, 3 * rows), squeeze=False)
    for i in range(rows * cols):
        ax = axes[i // cols][i % cols]
        ax.axis("off")
        if i >= n:
            continue
        sketch, mask = sketches[i], masks[i]
        for stroke, keep in zip(sketch.strokes, mask.bits):
            arr = stroke.to_array()
            if keep:
                ax.plot(arr[:, 0], arr[:, 1], color="black", linewidth=1.5)
            else:
                ax.plot(arr[:, 0], arr[:, 1], color="tab:red", linewidth=1.0,
                        linestyle="--", alpha=0.5)
        ax.set_xlim(0, sketch.canvas_w)
        ax.set_ylim(sketch.canvas_h, 0)
        ax.set_title(f"{mask.selected_count}/{len(mask)} kept", fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
