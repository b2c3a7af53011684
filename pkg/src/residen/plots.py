"""Matplotlib figure rendering for reports, training curves and heatmaps.

Everything renders through the Agg backend straight to files; PNG metadata
is stripped so repeated runs produce identical bytes.
"""

from __future__ import annotations

from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import MetricsReport  # noqa: E402

_PNG_META = {"metadata": {"Software": None}}


def save_report_figure(report: MetricsReport, path: str) -> None:
    """Grouped bars: accuracy, F1 and final score per unit plus the means."""
    labels = [str(a) for a in report.au_ids] + ["mean"]
    acc = list(report.accuracy) + [report.mean_accuracy]
    f1 = list(report.f1) + [report.mean_f1]
    fin = list(report.final_score) + [report.mean_final_score]
    x = np.arange(len(labels))
    w = 0.27
    fig, ax = plt.subplots(figsize=(max(6.0, 0.7 * len(labels)), 4.0))
    ax.bar(x - w, acc, w, label="accuracy", color="#4878cf")
    ax.bar(x, f1, w, label="f1", color="#6acc65")
    ax.bar(x + w, fin, w, label="final score", color="#d65f5f")
    ax.set_xticks(x)
    ax.set_xticklabels(labels)
    ax.set_ylim(0.0, 1.05)
    ax.set_xlabel("action unit")
    ax.set_title(f"detection metrics ({report.num_samples} samples, "
                 f"threshold {report.threshold:g})")
    ax.legend(loc="lower right", fontsize=8)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110, **_PNG_META)
    plt.close(fig)


def save_training_curves(rows: Sequence[dict], path: str,
                         score_key: str = "val_mean_final_score") -> None:
    """Loss on the left axis, validation scores on the right, by epoch."""
    fig, ax = plt.subplots(figsize=(7.0, 4.0))
    if rows:
        epochs = [r["epoch"] for r in rows]
        ax.plot(epochs, [r["train_loss"] for r in rows], color="#d65f5f",
                marker="o", ms=3, label="train loss")
        ax.set_xlabel("epoch")
        ax.set_ylabel("train loss")
        ax2 = ax.twinx()
        acc_key = ("val_mean_accuracy" if "val_mean_accuracy" in rows[0]
                   else "val_accuracy")
        ax2.plot(epochs, [r[acc_key] for r in rows], color="#4878cf",
                 marker="s", ms=3, label="val accuracy")
        if score_key in rows[0]:
            ax2.plot(epochs, [r[score_key] for r in rows], color="#6acc65",
                     marker="^", ms=3, label="val final score")
        ax2.set_ylabel("validation metric")
        ax2.set_ylim(0.0, 1.05)
        lines, labels = ax.get_legend_handles_labels()
        l2, lb2 = ax2.get_legend_handles_labels()
        ax.legend(lines + l2, labels + lb2, loc="center right", fontsize=8)
    else:
        ax.set_title("no epochs ran")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110, **_PNG_META)
    plt.close(fig)


def save_heatmap_overlay(image01: np.ndarray, heatmap: np.ndarray, path: str,
                         alpha: float = 0.45, title: Optional[str] = None) -> None:
    """Blend a [0,1] heatmap over an [H,W,3] image in [0,1] and save it."""
    fig, ax = plt.subplots(figsize=(4.0, 4.0))
    ax.imshow(np.clip(image01, 0.0, 1.0))
    ax.imshow(np.clip(heatmap, 0.0, 1.0), cmap="jet", alpha=alpha,
              vmin=0.0, vmax=1.0)
    ax.set_axis_off()
    if title:
        ax.set_title(title, fontsize=9)
    fig.tight_layout(pad=0.2)
    fig.savefig(path, dpi=110, **_PNG_META)
    plt.close(fig)
