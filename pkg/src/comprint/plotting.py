"""Report figures (rendered off-screen to files)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "svg.hashsalt": "comprint",
}

# fixed metadata keeps the output files byte-stable between runs
_METADATA = {"png": {"Software": None}, "pdf": {"CreationDate": None, "Producer": None},
             "svg": {"Date": None}}


def _save(fig, path):
    ext = str(path).rsplit(".", 1)[-1].lower()
    fig.savefig(path, bbox_inches="tight", metadata=_METADATA.get(ext))
    plt.close(fig)


def _show_field(ax, field, title, cmap="gray", vmin=None, vmax=None):
    im = ax.imshow(field, cmap=cmap, vmin=vmin, vmax=vmax, interpolation="nearest")
    ax.set_title(title)
    ax.set_xticks([])
    ax.set_yticks([])
    return im


def analysis_figure(path, image, fingerprints, heatmap, score=None, mask=None):
    """Image, each fingerprint, the heatmap and (optionally) the ground truth."""
    with plt.rc_context(RC):
        n = 2 + len(fingerprints) + (mask is not None)
        fig, axes = plt.subplots(1, n, figsize=(2.4 * n, 2.6))
        _show_field(axes[0], image, "image", vmin=0, vmax=255)
        for ax, (name, fp) in zip(axes[1:], fingerprints):
            lo, hi = np.percentile(fp, [1, 99])
            _show_field(ax, fp, name, vmin=lo, vmax=hi)
        title = "heatmap" if score is None else f"heatmap (stat {score:.3f})"
        im = _show_field(axes[1 + len(fingerprints)], heatmap, title, cmap="viridis",
                         vmin=0, vmax=1)
        fig.colorbar(im, ax=axes[1 + len(fingerprints)], fraction=0.046, pad=0.04)
        if mask is not None:
            _show_field(axes[-1], mask, "ground truth", vmin=0, vmax=1)
        _save(fig, path)


def roc_figure(path, points, auc, label="comprint"):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(3.2, 3.2))
        fpr, tpr = zip(*points)
        ax.plot(fpr, tpr, drawstyle="steps-post", label=f"{label} (AUC {auc:.3f})")
        ax.plot([0, 1], [0, 1], color="0.6", lw=0.8, ls="--")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.01)
        ax.set_xlabel("false positive rate")
        ax.set_ylabel("true positive rate")
        ax.legend(loc="lower right", frameon=False)
        _save(fig, path)


def f1_histogram(path, f1_values):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(3.6, 2.6))
        ax.hist(f1_values, bins=np.linspace(0, 1, 21), color="C0", edgecolor="white")
        ax.set_xlabel("max-F1 per image")
        ax.set_ylabel("images")
        _save(fig, path)


def loss_figure(path, step_losses, epoch_losses=None, ylabel="loss"):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.0, 2.6))
        ax.plot(np.arange(1, len(step_losses) + 1), step_losses, lw=0.6, color="0.6",
                label="step")
        if epoch_losses:
            per = len(step_losses) / len(epoch_losses)
            x = per * np.arange(1, len(epoch_losses) + 1)
            ax.plot(x, epoch_losses, "o-", color="C1", ms=3, label="epoch mean")
        ax.set_xlabel("step")
        ax.set_ylabel(ylabel)
        ax.legend(frameon=False)
        _save(fig, path)
