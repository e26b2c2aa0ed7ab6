"""Figure rendering for reports: ROC curves, Grad-CAM overlays, training curves.

Everything renders off-screen (Agg) and PNGs are written without a
``Software`` tag so bytes depend only on the inputs and the renderer version.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

PNG_METADATA = {"Software": None}
OVERLAY_CMAP = "jet"
OVERLAY_ALPHA = 0.5


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=PNG_METADATA)
    plt.close(fig)
    return path


def roc_figure(fpr, tpr, path, auc: float | None = None, operating_point=None,
               title: str = "Fractured (G1-G3) vs normal (G0)") -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    label = "ROC" if auc is None else f"ROC (AUC = {auc:.3f})"
    ax.plot(fpr, tpr, color="C0", lw=2, label=label, drawstyle="default")
    ax.plot([0, 1], [0, 1], color="0.6", lw=1, ls="--")
    if operating_point is not None:
        spe, sen = operating_point
        ax.plot([1 - spe], [sen], "o", color="C3", label=f"argmax (SPE {spe:.2f}, SEN {sen:.2f})")
    ax.set_xlim(-0.01, 1.01)
    ax.set_ylim(-0.01, 1.01)
    ax.set_xlabel("1 - specificity")
    ax.set_ylabel("sensitivity")
    ax.set_title(title, fontsize=10)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def overlay_rgb(ct_slice: np.ndarray, attention_slice: np.ndarray,
                alpha: float = OVERLAY_ALPHA, cmap: str = OVERLAY_CMAP) -> np.ndarray:
    """Blend a grayscale slice with a heatmap; per-pixel opacity is ``alpha * attention``.

    Zero attention therefore leaves the grayscale image untouched.
    """
    gray = np.clip(np.asarray(ct_slice, dtype=np.float64), 0, 1)
    att = np.clip(np.asarray(attention_slice, dtype=np.float64), 0, 1)
    heat = matplotlib.colormaps[cmap](att)[..., :3]
    a = (alpha * att)[..., None]
    rgb = np.repeat(gray[..., None], 3, axis=2) * (1 - a) + heat * a
    return (np.round(rgb * 255)).astype(np.uint8)


def take_slice(volume: np.ndarray, axis: int, index: int) -> np.ndarray:
    return np.take(volume, index, axis=axis)


def save_rgb(rgb: np.ndarray, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    plt.imsave(path, rgb, metadata=PNG_METADATA)
    return path


def gradcam_panel(ct: np.ndarray, attention: np.ndarray, path, slice_axis: int = 0,
                  slices=None, title: str | None = None) -> Path:
    """Two-row figure: overlays on top, the matching CT slices below."""
    if slices is None:
        slices = [ct.shape[slice_axis] // 2]
    fig, axes = plt.subplots(2, len(slices), figsize=(2.2 * len(slices), 4.4), squeeze=False)
    for j, idx in enumerate(slices):
        ct_s = take_slice(ct, slice_axis, idx)
        axes[0, j].imshow(overlay_rgb(ct_s, take_slice(attention, slice_axis, idx)))
        axes[1, j].imshow(ct_s, cmap="gray", vmin=0, vmax=1)
        axes[0, j].set_title(f"slice {idx}", fontsize=8)
        for ax in axes[:, j]:
            ax.set_axis_off()
    if title:
        fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    return _save(fig, path)


def training_curves(history: list[dict], path) -> Path:
    epochs = [h["epoch"] for h in history]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(epochs, [h["mean_loss"] for h in history], color="C0")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean training loss", color="C0")
    evals = [h for h in history if "macro_f1" in h]
    if evals:
        ax2 = ax.twinx()
        ax2.plot([h["epoch"] for h in evals], [h["macro_f1"] for h in evals], "o-", color="C1")
        ax2.set_ylabel("test macro-F1", color="C1")
        ax2.set_ylim(0, 1)
    fig.tight_layout()
    return _save(fig, path)
