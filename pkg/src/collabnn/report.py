"""Matplotlib figures rendered next to the delimited metrics output."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .train import RunMetrics

TERM_LABELS = {
    "hard": "hard CE",
    "out": "branch consensus",
    "mid": "local classifiers",
    "pull_push": "similarity pull/push",
    "kernel": "kernel decorrelation",
}


def save_training_curves(metrics: RunMetrics, path) -> Path:
    """Loss terms and error curves over epochs, written as one PNG."""
    path = Path(path)
    epochs = [r.epoch for r in metrics.records]
    fig, (ax_loss, ax_err) = plt.subplots(1, 2, figsize=(11, 4))

    ax_loss.plot(epochs, [r.loss_total for r in metrics.records], label="total", color="black")
    for term, label in TERM_LABELS.items():
        values = [r.loss_terms.get(term, 0.0) for r in metrics.records]
        if any(v != 0.0 for v in values):
            ax_loss.plot(epochs, values, label=label, alpha=0.8)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("training loss")
    ax_loss.legend(fontsize=8)
    ax_loss.grid(alpha=0.3)

    ax_err.plot(epochs, [r.train_error for r in metrics.records], label="train error")
    ax_err.plot(epochs, [r.test_error for r in metrics.records], label="test error")
    ax_err.set_xlabel("epoch")
    ax_err.set_ylabel("error (%)")
    ax_err.legend(fontsize=8)
    ax_err.grid(alpha=0.3)

    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_sweep_figure(rows: list[dict], path) -> Path:
    """Best test error vs noise level, one line per variant (mean over seeds).

    rows: dicts with keys variant, level, seed, best_test_error.
    """
    path = Path(path)
    fig, ax = plt.subplots(figsize=(7, 5))
    variants = sorted({r["variant"] for r in rows})
    for variant in variants:
        levels = sorted({r["level"] for r in rows if r["variant"] == variant})
        means = []
        for level in levels:
            errs = [
                r["best_test_error"]
                for r in rows
                if r["variant"] == variant and r["level"] == level
            ]
            means.append(sum(errs) / len(errs))
        ax.plot([100 * l for l in levels], means, marker="o", label=variant)
    ax.set_xlabel("noise level (%)")
    ax.set_ylabel("best test error (%)")
    ax.legend(fontsize=9)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
