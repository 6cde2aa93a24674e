"""Figure output for evaluation reports.  Everything renders off-screen to files."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "figure.dpi": 100,
    "savefig.bbox": "tight",
    # keep PNG output byte-stable between runs
    "svg.hashsalt": "radiomsm",
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None} if path.suffix == ".png" else None)
    plt.close(fig)
    return path


def plot_recall_curves(report: dict, path, baseline: dict = None, title="Occupied-block recall") -> Path:
    """Per-step recall for each block resolution; dashed lines for an optional baseline."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        steps = np.arange(1, report["steps"] + 1)
        colors = plt.rcParams["axes.prop_cycle"].by_key()["color"]
        for i, row in enumerate(report["recall"]):
            c = colors[i % len(colors)]
            y = [np.nan if v is None else v for v in row["per_step"]]
            ax.plot(steps, y, "o-", color=c, label=row["block"])
            if baseline is not None:
                brow = next((r for r in baseline["recall"] if r["block"] == row["block"]), None)
                if brow is not None:
                    yb = [np.nan if v is None else v for v in brow["per_step"]]
                    ax.plot(steps, yb, "s--", color=c, alpha=0.7, label=f"{row['block']} (baseline)")
        ax.set_xlabel("tokens ahead")
        ax.set_ylabel("P(correct | occupied)")
        ax.set_ylim(0, 1.02)
        ax.set_xticks(steps)
        ax.set_title(title)
        ax.grid(alpha=0.3)
        ax.legend(loc="lower left")
        return _save(fig, path)


def plot_confusion(cm, path, title="Confusion matrix") -> Path:
    """Row-normalized heatmap annotated with rate and raw count."""
    rates = cm.rates
    with plt.rc_context(STYLE):
        k = len(cm.class_names)
        fig, ax = plt.subplots(figsize=(1.1 * k + 1.6, 1.1 * k + 1.0))
        im = ax.imshow(rates, vmin=0, vmax=1, cmap="Blues")
        for i in range(k):
            for j in range(k):
                ax.text(j, i, f"{rates[i, j]:.2f}\n({cm.counts[i, j]})", ha="center", va="center",
                        color="white" if rates[i, j] > 0.5 else "black", fontsize=7)
        ax.set_xticks(range(k), cm.class_names)
        ax.set_yticks(range(k), cm.class_names)
        ax.set_xlabel("predicted")
        ax.set_ylabel("true")
        ax.set_title(title)
        fig.colorbar(im, ax=ax, fraction=0.046)
        return _save(fig, path)


def plot_spectrogram_pair(image, labels, path, title=("Spectrogram", "Labels")) -> Path:
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(7, 3.2))
        axes[0].imshow(image, origin="lower", aspect="auto", cmap="viridis")
        axes[1].imshow(labels, origin="lower", aspect="auto", cmap="tab10", vmin=0, vmax=9,
                       interpolation="nearest")
        for ax, t in zip(axes, title):
            ax.set_title(t)
            ax.set_xlabel("time (px)")
        axes[0].set_ylabel("frequency (px)")
        return _save(fig, path)


def plot_loss_curve(history, path, title="Training loss") -> Path:
    steps = [h["step"] for h in history]
    loss = [h["loss"] for h in history]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        ax.semilogy(steps, loss)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_title(title)
        ax.grid(alpha=0.3)
        return _save(fig, path)
