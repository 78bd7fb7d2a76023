"""Report figures. Every PNG carries the run provenance in a text chunk."""

from __future__ import annotations

import json

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

PROVENANCE_KEY = "dctev-provenance"

# colour-blind safe palette
PALETTE = ["#0072B2", "#D55E00", "#009E73", "#CC79A7", "#E69F00", "#56B4E9"]

STYLE = {
    "font.size": 10,
    "axes.labelsize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
}


def new_figure(width: float = 5.0, height: float = 3.2):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(width, height))
    return fig, ax


def save(fig, path, provenance: dict) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={PROVENANCE_KEY: json.dumps(provenance, sort_keys=True)})
    plt.close(fig)


def plot_threshold_sweep(curves: dict[str, list[dict]], path, provenance: dict) -> None:
    """F1 against probability threshold, one line per model."""
    fig, ax = new_figure()
    with plt.rc_context(STYLE):
        for i, (name, rows) in enumerate(curves.items()):
            ax.plot([r["threshold"] for r in rows], [r["f1"] for r in rows], marker="o", ms=3,
                    color=PALETTE[i % len(PALETTE)], label=name)
        ax.set_xlabel("probability threshold")
        ax.set_ylabel("F1")
        ax.set_xlim(0, 1)
        ax.legend(frameon=False)
    save(fig, path, provenance)


def plot_history_sweep(rows: list[dict], path, provenance: dict) -> None:
    fig, ax = new_figure()
    with plt.rc_context(STYLE):
        ax.plot([r["T"] for r in rows], [r["f1"] for r in rows], marker="s", color=PALETTE[0])
        ax.set_xlabel("input history length T (minutes)")
        ax.set_ylabel("test F1 @ 0.5")
    save(fig, path, provenance)


def plot_per_horizon(rows: list[dict], path, provenance: dict, keys=("f1", "precision", "recall", "ap")) -> None:
    fig, ax = new_figure()
    with plt.rc_context(STYLE):
        m = [r["m"] for r in rows]
        for i, key in enumerate(keys):
            vals = [r[key] for r in rows]
            if any(v is None for v in vals):
                continue
            ax.plot(m, vals, marker="o", ms=3, color=PALETTE[i % len(PALETTE)], label=key)
        ax.set_xlabel("horizon m (minutes ahead)")
        ax.set_ylabel("score")
        ax.legend(frameon=False)
    save(fig, path, provenance)


def plot_training_history(history: dict, path, provenance: dict) -> None:
    fig, ax = new_figure()
    with plt.rc_context(STYLE):
        epochs = range(1, len(history["train_loss"]) + 1)
        ax.plot(epochs, history["train_loss"], marker="o", color=PALETTE[0], label="train loss")
        if any(v is not None for v in history["val_loss"]):
            ax.plot(epochs, history["val_loss"], marker="o", color=PALETTE[1], label="validation loss")
        ax.set_xlabel("epoch")
        ax.set_ylabel("BCE loss")
        ax.legend(frameon=False)
    save(fig, path, provenance)
