"""PNG figures for training curves, fold accuracy and detection overlays."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Polygon  # noqa: E402

from .geometry import rect_vertices  # noqa: E402

# no software/version stamp, so identical figures give identical bytes
_META = {"Software": None}


def _save(fig, path):
    fig.savefig(path, format="png", dpi=100, metadata=_META)
    plt.close(fig)


def plot_history(history, path):
    """Loss and validation accuracy per epoch."""
    ep = [h["epoch"] for h in history]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(ep, [h["loss"] for h in history], color="tab:blue")
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss", color="tab:blue")
    if any("val_acc" in h for h in history):
        ax2 = ax.twinx()
        ax2.plot(ep, [100 * h.get("val_acc", np.nan) for h in history], color="tab:orange")
        ax2.set_ylabel("validation success (%)", color="tab:orange")
        ax2.set_ylim(0, 100)
    fig.tight_layout()
    _save(fig, path)


def plot_fold_accuracy(report, path):
    """Grouped bars: one group per fold plus the mean, one bar per column."""
    rows = report.folds + [report.mean]
    labels = [str(i) for i in range(1, len(report.folds) + 1)] + ["mean"]
    n = len(report.columns)
    x = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(7, 3.5))
    for j, c in enumerate(report.columns):
        ax.bar(x + (j - (n - 1) / 2) * 0.8 / n, [100 * r[c] for r in rows], 0.8 / n, label=c)
    ax.set_xticks(x, labels)
    ax.set_xlabel("fold")
    ax.set_ylabel("success (%)")
    ax.set_ylim(0, 105)
    ax.legend(fontsize=7, ncol=2, loc="lower right")
    fig.tight_layout()
    _save(fig, path)


def plot_detections(image, candidates, best, path, truths=()):
    """Candidates in black, the best grasp highlighted, ground truth dashed."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0, 1)
    h, w = img.shape[:2]
    fig, ax = plt.subplots(figsize=(w / 100 * 4, h / 100 * 4))
    ax.imshow(img[..., :3] if img.shape[-1] >= 3 else img[..., 0], cmap="gray",
              interpolation="nearest")
    for g in truths:
        ax.add_patch(Polygon(rect_vertices(g), closed=True, fill=False, ec="tab:cyan",
                             ls="--", lw=1))
    for g in candidates:
        ax.add_patch(Polygon(rect_vertices(g), closed=True, fill=False, ec="black", lw=0.8))
    if best is not None:
        v = rect_vertices(best)
        ax.add_patch(Polygon(v, closed=True, fill=False, ec="tab:red", lw=2))
        # the first edge spans the gripper opening
        ax.plot(v[:2, 0], v[:2, 1], color="yellow", lw=2)
    ax.set_xlim(-0.5, w - 0.5)
    ax.set_ylim(h - 0.5, -0.5)
    ax.set_axis_off()
    fig.tight_layout(pad=0)
    _save(fig, path)
