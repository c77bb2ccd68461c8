"""Figures for the report command. Uses the Agg backend, so no display is needed."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}
LABELS = {"bleu4": "Bleu-4", "rouge1": "Rouge-1", "rouge2": "Rouge-2", "rougeL": "Rouge-L"}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def metric_bars(reports, path) -> Path:
    """Grouped bars, one group per metric, one bar per report."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.4, 3.6))
        keys = list(LABELS)
        x = np.arange(len(keys))
        width = 0.8 / max(1, len(reports))
        for i, r in enumerate(reports):
            vals = [100 * (getattr(r, k) or 0.0) for k in keys]
            ax.bar(x + (i - (len(reports) - 1) / 2) * width, vals, width, label=r.model_label)
        ax.set_xticks(x, [LABELS[k] for k in keys])
        ax.set_ylabel("score (%)")
        ax.set_ylim(0, 100)
        ax.legend(frameon=False, fontsize=8)
        fig.tight_layout()
        return _save(fig, path)


def param_bars(reports, path) -> Path:
    """Trainable parameter counts on a log axis, annotated with the trainable share."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.4, 3.2))
        labels = [r.model_label for r in reports]
        counts = [max(r.trainable_params, 1) for r in reports]
        bars = ax.barh(labels, counts, color="tab:gray")
        ax.set_xscale("log")
        ax.set_xlabel("trainable parameters")
        for b, r in zip(bars, reports):
            if r.trainable_params:
                ax.annotate(f"{100 * r.trainable_ratio:.4f}%", (b.get_width(), b.get_y() + b.get_height() / 2),
                            xytext=(3, 0), textcoords="offset points", va="center", fontsize=8)
        ax.invert_yaxis()
        fig.tight_layout()
        return _save(fig, path)


def loss_curves(logs: dict[str, list[float]], path) -> Path:
    """Per-epoch mean training loss, one line per run or stage."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.4, 3.6))
        for label, losses in logs.items():
            ax.plot(np.arange(1, len(losses) + 1), losses, label=label, lw=1.2)
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean loss")
        ax.set_yscale("log")
        ax.legend(frameon=False, fontsize=8)
        fig.tight_layout()
        return _save(fig, path)
