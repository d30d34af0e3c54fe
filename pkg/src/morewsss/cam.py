"""Class activation maps, localization maps, and reliability masks.

Maps are stored channel-last, ``[..., n_h, n_w, C]``; everything after the
raw projection is a detached numpy computation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

BACKGROUND = 0
UNCERTAIN = 255
FLAT_EPS = 1e-9  # relative; cosine epsilon jitter is ~1e-12


@dataclass
class ActivationMap:
    scores: np.ndarray  # [..., n_h, n_w, C], normalized to [0, 1]
    kind: str           # "CAM" or "LAM"

    @property
    def num_classes(self) -> int:
        return self.scores.shape[-1]


@dataclass
class ReliabilityMask:
    labels: np.ndarray  # [..., n_h, n_w] of {0, 1..C, 255}
    low: float
    high: float


def cam_scores(patch_tokens, w_cls) -> Tensor:
    """Differentiable per-patch class scores ``P @ W_cls``: ``[..., L, C]``."""
    return ad.matmul(patch_tokens, w_cls)


def pool_scores(raw, pooling: str = "mean") -> Tensor:
    """Image-level logits from raw CAM scores ``[..., L, C]``."""
    if pooling == "mean":
        return ad.mean(raw, axis=-2)
    L = raw.shape[-2]
    k = 1 if pooling == "max" else max(1, L // 4)
    if pooling not in ("max", "topk"):
        raise ValueError(f"unknown pooling {pooling!r}")
    vals, _ = ad.topk(ad.swapaxes(raw, -1, -2), k)
    return ad.mean(vals, axis=-1)


def class_logits(patch_tokens, w_cls, pooling: str = "mean") -> Tensor:
    return pool_scores(cam_scores(patch_tokens, w_cls), pooling)


def normalize_channels(raw: np.ndarray, labels: np.ndarray | None = None) -> np.ndarray:
    """Min-max each class channel over the spatial axis (``-2``) of ``[..., L, C]``.

    A flat channel (span within ``FLAT_EPS`` of its magnitude) has no range
    to stretch; it is clipped to [0, 1] as is.
    Channels of classes absent from ``labels`` are zeroed.
    """
    raw = np.asarray(raw, dtype=np.float64)
    lo = raw.min(axis=-2, keepdims=True)
    hi = raw.max(axis=-2, keepdims=True)
    span = hi - lo
    flat = span <= FLAT_EPS * np.maximum(1.0, np.maximum(np.abs(lo), np.abs(hi)))
    out = np.where(flat, np.clip(raw, 0.0, 1.0), (raw - lo) / np.where(flat, 1.0, span))
    if labels is not None:
        present = np.asarray(labels, dtype=bool)[..., None, :]
        out = np.where(present, out, 0.0)
    return out


def to_grid(flat: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    nh, nw = grid
    if flat.shape[-2] != nh * nw:
        raise ad.DimensionError(f"{flat.shape[-2]} patches do not fill a {nh}x{nw} grid")
    return flat.reshape(flat.shape[:-2] + (nh, nw, flat.shape[-1]))


def compute_cam(patch_tokens, w_cls, grid: tuple[int, int], labels: np.ndarray | None = None) -> ActivationMap:
    raw = ad.as_tensor(patch_tokens).data @ ad.as_tensor(w_cls).data
    return ActivationMap(to_grid(normalize_channels(raw, labels), grid), "CAM")


def compute_lam(class_tokens, patch_tokens, grid: tuple[int, int], labels: np.ndarray | None = None) -> ActivationMap:
    """Per-class cosine similarity between class tokens and every patch token."""
    q, p = ad.as_tensor(class_tokens).data, ad.as_tensor(patch_tokens).data
    sim = ad.cosine_matrix(p, q).data  # [..., L, C]
    return ActivationMap(to_grid(normalize_channels(sim, labels), grid), "LAM")


def multi_threshold_filter(cam: ActivationMap, low: float, high: float) -> ReliabilityMask:
    """Foreground above ``high``, background below ``low``, uncertain otherwise."""
    if not 0.0 < low < high < 1.0:
        raise ValueError(f"thresholds must satisfy 0 < low < high < 1, got ({low}, {high})")
    s = cam.scores
    peak = s.max(axis=-1)
    cls = np.argmax(s, axis=-1) + 1  # first max wins ties
    labels = np.full(peak.shape, UNCERTAIN, dtype=np.int64)
    labels[peak > high] = cls[peak > high]
    labels[peak < low] = BACKGROUND
    return ReliabilityMask(labels, low, high)


def to_pseudo_label(amap: ActivationMap, bg_threshold: float) -> np.ndarray:
    s = amap.scores
    out = np.argmax(s, axis=-1) + 1
    out[s.max(axis=-1) < bg_threshold] = BACKGROUND
    return out.astype(np.int64)


def upsample(scores: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear (half-pixel centers) resize of ``[..., h, w, C]`` to ``size``."""
    scores = np.asarray(scores, dtype=np.float64)
    h, w = scores.shape[-3:-1]
    H, W = size

    def axis_weights(n_in, n_out):
        x = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        x = np.clip(x, 0, n_in - 1)
        i0 = np.floor(x).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, x - i0

    y0, y1, fy = axis_weights(h, H)
    x0, x1, fx = axis_weights(w, W)
    top = scores[..., y0, :, :]
    bot = scores[..., y1, :, :]
    rows = top + (bot - top) * fy[:, None, None]
    left = rows[..., :, x0, :]
    right = rows[..., :, x1, :]
    return left + (right - left) * fx[None, :, None]
