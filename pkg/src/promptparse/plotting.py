"""Figures for experiment reports: validation curves and accuracy bars."""
from __future__ import annotations

import math
import os
from typing import Dict, List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# PNG metadata would otherwise carry the matplotlib version string
_SAVE_KW = dict(dpi=120, metadata={"Software": None})


def _style(ax, xlabel, ylabel, title=None):
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title, fontsize=10)
    ax.grid(True, alpha=0.3, linewidth=0.5)
    for side in ("top", "right"):
        ax.spines[side].set_visible(False)


def plot_learning_curves(histories: Dict[str, List[dict]], path, title=None) -> str:
    """Validation exact match against epoch, one line per run label."""
    fig, ax = plt.subplots(figsize=(6, 3.7))
    for label in sorted(histories):
        hist = histories[label]
        ax.plot([h["epoch"] for h in hist], [h["val_em"] for h in hist], marker=".", linewidth=1, label=label)
    ax.set_ylim(-0.02, 1.02)
    _style(ax, "epoch", "validation exact match", title)
    if histories:
        ax.legend(fontsize=7, frameon=False, loc="lower right")
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return str(path)


def plot_accuracy(rows: Sequence[dict], path, title=None) -> str:
    """Bar chart of mean accuracy (sample std as error bar) per aggregate row."""
    labels = [f"{r['scheme']}\n{r['tuning']}\n{r['decoding']}" for r in rows]
    means = [r["mean"] for r in rows]
    errs = [0.0 if r["std"] is None or math.isnan(r["std"]) else r["std"] for r in rows]
    fig, ax = plt.subplots(figsize=(max(4, 1.1 * len(rows) + 1), 3.7))
    ax.bar(range(len(rows)), means, yerr=errs, capsize=3, color="0.55", edgecolor="0.2", linewidth=0.6)
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, fontsize=7)
    ax.set_ylim(0, 1.05)
    for i, m in enumerate(means):
        ax.text(i, min(m + 0.02, 1.0), f"{m:.3f}", ha="center", fontsize=7)
    _style(ax, "", "test exact match", title)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return str(path)


def render_report(out_dir, rows, histories) -> List[str]:
    """Write the figures into ``out_dir``, alongside the CSVs they summarize."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    if histories:
        written.append(plot_learning_curves(histories, os.path.join(out_dir, "learning_curves.png")))
    if rows:
        written.append(plot_accuracy(rows, os.path.join(out_dir, "accuracy.png")))
    return written
