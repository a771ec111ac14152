"""Figure rendering for training runs and ablation tables.

Every CSV the pipeline emits gets a matching PNG next to it.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def plot_pretrain_history(history, out_path):
    """Combined/cosine/MSE loss curves per split from HistoryRow records."""
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for split, style in (("train", "-"), ("validation", "--")):
        rows = [r for r in history if r.split == split]
        if not rows:
            continue
        epochs = [r.epoch for r in rows]
        axes[0].plot(epochs, [r.loss_combined for r in rows], style, label=split)
        axes[1].plot(epochs, [r.loss_mse for r in rows], style, label=split)
    axes[0].set_title("combined loss")
    axes[1].set_title("masked MSE")
    for ax in axes:
        ax.set_xlabel("epoch")
        ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_downstream_history(history, out_path):
    """Training loss and validation ROC-AUC across epochs."""
    fig, ax1 = plt.subplots(figsize=(7, 4))
    epochs = [m.epoch for m in history]
    ax1.plot(epochs, [m.train_loss for m in history], color="tab:blue", label="train loss")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("cross-entropy", color="tab:blue")
    ax2 = ax1.twinx()
    ax2.plot(epochs, [m.val_auc for m in history], color="tab:orange", label="val ROC-AUC")
    ax2.set_ylabel("ROC-AUC", color="tab:orange")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_ablation(rows, out_path, split="test"):
    """Bar chart of ROC-AUC per ablation configuration."""
    rows = [r for r in rows if r[1] == split]
    names = [r[0] for r in rows]
    aucs = [r[2] if r[2] is not None else 0.0 for r in rows]
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.bar(range(len(names)), aucs, color="tab:blue")
    ax.axhline(0.5, color="grey", linestyle=":")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylabel(f"ROC-AUC ({split})")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
