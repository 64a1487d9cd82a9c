"""Report figures, rendered off-screen to PNG files."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
}

LOSS_KEYS = {"vq_stage1": "total", "vq_stage2": "total", "bridge": "loss"}


def _smooth(y, width: int = 25):
    if len(y) < width:
        return np.asarray(y)
    kernel = np.ones(width) / width
    return np.convolve(y, kernel, mode="valid")


def plot_losses(logs: dict, path) -> None:
    """One panel per stage: raw per-step loss and a running mean, log scale."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, max(len(logs), 1), figsize=(3.6 * max(len(logs), 1), 3), squeeze=False)
        for ax, (stage, records) in zip(axes[0], logs.items()):
            steps = [r["step"] for r in records]
            loss = [r[LOSS_KEYS[stage]] for r in records]
            ax.plot(steps, loss, lw=0.6, alpha=0.4, color="C0")
            sm = _smooth(loss)
            ax.plot(steps[len(steps) - len(sm):], sm, lw=1.4, color="C0")
            ax.set_yscale("log")
            ax.set_title(stage)
            ax.set_xlabel("step")
        axes[0][0].set_ylabel("loss")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def plot_slices(pairs, preds, path) -> None:
    """Middle z-slices: |partial|, completion and reference UDF for a few shapes."""
    with plt.rc_context({**STYLE, "axes.grid": False}):
        fig, axes = plt.subplots(len(pairs), 3, figsize=(6, 2 * len(pairs)), squeeze=False)
        for row, (pair, pred) in enumerate(zip(pairs, preds)):
            k = pair.complete.dims[2] // 2
            vmax = pair.complete.truncation
            panels = (np.abs(pair.partial.values), pred.values, pair.complete.values)
            for col, (img, title) in enumerate(zip(panels, ("partial", "completion", "reference"))):
                ax = axes[row][col]
                ax.imshow(img[:, :, k].T, origin="lower", cmap="viridis", vmin=0, vmax=vmax)
                ax.set_xticks([])
                ax.set_yticks([])
                if row == 0:
                    ax.set_title(title)
            axes[row][0].set_ylabel(pair.id, fontsize=7)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def plot_metric_bars(report, baseline, path) -> None:
    keys = [k for k in ("l1", "cd", "iou", "f1") if report.means.get(k) is not None
            and baseline.means.get(k) is not None]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(keys), figsize=(2.2 * len(keys), 2.8), squeeze=False)
        for ax, key in zip(axes[0], keys):
            ax.bar([0, 1], [report.means[key], baseline.means[key]], color=["C0", "C7"], width=0.6)
            ax.set_xticks([0, 1], ["bridge", "copy"])
            ax.set_title(key)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
