"""Matplotlib renderings saved next to the delimited reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import roc_points

DPI = 150


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)


def loss_curve(losses, path, epoch_auc=(), iters_per_epoch=None) -> None:
    """Training loss per iteration, with per-epoch AUC on a twin axis if present."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(losses, lw=0.8, color="tab:blue")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.grid(alpha=0.3)
    epoch_auc = list(epoch_auc)
    if epoch_auc and iters_per_epoch:
        ax2 = ax.twinx()
        xs = [(i + 1) * iters_per_epoch - 1 for i in range(len(epoch_auc))]
        ax2.plot(xs, epoch_auc, lw=1.2, color="tab:orange", label="AUC")
        ax2.set_ylabel("held-out AUC", color="tab:orange")
        ax2.set_ylim(0.0, 1.05)
    _save(fig, path)


def roc_figure(scores, labels, auc, path) -> None:
    fpr, tpr = roc_points(scores, labels)
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.plot(fpr, tpr, lw=1.5)
    ax.plot([0, 1], [0, 1], ls="--", lw=0.8, color="gray")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title(f"AUC = {auc:.4f}")
    ax.grid(alpha=0.3)
    _save(fig, path)


def f1_figure(f1_curve, path) -> None:
    rows = np.asarray(f1_curve)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(rows[:, 0], rows[:, 1], lw=1.0, label="precision")
    ax.plot(rows[:, 0], rows[:, 2], lw=1.0, label="recall")
    ax.plot(rows[:, 0], rows[:, 3], lw=1.5, label="F1")
    ax.set_xlabel("score threshold")
    ax.set_ylabel("value")
    ax.set_ylim(0.0, 1.05)
    ax.legend(loc="best", fontsize=8)
    ax.grid(alpha=0.3)
    _save(fig, path)


def saliency_figure(sal_values, path, mask=None, title=None) -> None:
    fig, ax = plt.subplots(figsize=(4, 4))
    im = ax.imshow(sal_values, cmap="inferno")
    if mask is not None and np.any(mask):
        ax.contour(mask, levels=[0.5], colors="cyan", linewidths=1.0)
    if title:
        ax.set_title(title, fontsize=9)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.colorbar(im, ax=ax, fraction=0.046)
    _save(fig, path)


def auc_f1_figure(curve, path) -> None:
    """Localization quality against detection quality across thresholds."""
    rows = np.asarray(curve, dtype=float)
    keep = np.isfinite(rows[:, 2])
    fig, ax = plt.subplots(figsize=(4.5, 4))
    ax.plot(rows[keep, 1], rows[keep, 2], marker=".", ms=3, lw=0.8)
    ax.set_xlabel("detection F1")
    ax.set_ylabel("mean pixel AUC of detected anomalies")
    ax.grid(alpha=0.3)
    _save(fig, path)
