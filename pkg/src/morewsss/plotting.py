"""Figures written next to the CSV outputs (headless Agg backend)."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import MetricsReport  # noqa: E402

LOSS_COLUMNS = ("L_cls", "L_mct", "L_cre", "L_ure", "L_seg", "L_total")
# fixed metadata keeps re-rendered files byte-identical
_META = {"Software": None}


def _save(fig, path: str | Path) -> None:
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def label_colors(num_classes: int) -> np.ndarray:
    """RGB rows for background, classes 1..C, and a gray for uncertain."""
    cmap = plt.get_cmap("tab10")
    rows = [(0.0, 0.0, 0.0)] + [cmap(c % 10)[:3] for c in range(num_classes)]
    return np.array(rows + [(0.6, 0.6, 0.6)])


def colorize(labels: np.ndarray, num_classes: int) -> np.ndarray:
    colors = label_colors(num_classes)
    idx = np.where(labels == 255, num_classes + 1, np.clip(labels, 0, num_classes))
    return colors[idx]


def plot_losses(steps: Sequence[int], columns: dict[str, Sequence[float]], path: str | Path,
                smooth: int = 25) -> None:
    """Per-term loss curves; a trailing moving average over ``smooth`` steps is drawn on top."""
    fig, ax = plt.subplots(figsize=(7, 4))
    steps = np.asarray(steps)
    for name in LOSS_COLUMNS:
        if name not in columns:
            continue
        y = np.asarray(columns[name], dtype=float)
        line, = ax.plot(steps, y, lw=0.5, alpha=0.3)
        if len(y) >= smooth > 1:
            avg = np.convolve(y, np.ones(smooth) / smooth, mode="valid")
            ax.plot(steps[smooth - 1:], avg, lw=1.4, color=line.get_color(), label=name)
        else:
            line.set_label(name)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(loc="upper right", ncol=3, fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def plot_iou(reports: dict[str, MetricsReport], path: str | Path) -> None:
    """Grouped per-class IoU bars, one group per label (0 is background)."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    names = list(reports)
    n = len(next(iter(reports.values())).iou)
    width = 0.8 / max(len(names), 1)
    x = np.arange(n)
    for k, name in enumerate(names):
        r = reports[name]
        ax.bar(x + k * width - 0.4 + width / 2, np.nan_to_num(r.iou), width,
               label=f"{name} (mIoU {r.miou:.3f})")
    ax.set_xticks(x, ["bg"] + [str(c) for c in range(1, n)])
    ax.set_ylim(0, 1)
    ax.set_ylabel("IoU")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def plot_maps(image: np.ndarray, panels: dict[str, np.ndarray], num_classes: int, path: str | Path) -> None:
    """Image plus a row of map panels.

    Integer ``[H, W]`` panels are drawn as label maps; float ``[h, w, C]``
    panels get one heatmap per class.
    """
    tiles: list[tuple[str, np.ndarray, str]] = [("image", np.transpose(image, (1, 2, 0)), "rgb")]
    for name, arr in panels.items():
        arr = np.asarray(arr)
        if arr.ndim == 3 and arr.dtype.kind == "f":
            tiles += [(f"{name} {c + 1}", arr[..., c], "heat") for c in range(arr.shape[-1])]
        else:
            tiles.append((name, colorize(arr, num_classes), "rgb"))
    cols = min(len(tiles), 6)
    rows = -(-len(tiles) // cols)
    fig, axes = plt.subplots(rows, cols, figsize=(2 * cols, 2.1 * rows), squeeze=False)
    for ax in axes.ravel():
        ax.axis("off")
    for ax, (title, data, kind) in zip(axes.ravel(), tiles):
        if kind == "heat":
            ax.imshow(data, cmap="viridis", vmin=0, vmax=1, interpolation="nearest")
        else:
            ax.imshow(np.clip(data, 0, 1), interpolation="nearest")
        ax.set_title(title, fontsize=8)
    fig.tight_layout()
    _save(fig, path)
