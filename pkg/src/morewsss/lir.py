"""Localization-informed regularization of class-patch similarity.

The reliability mask from CAM drives two losses on the class tokens Q and
patch tokens P: a temperature-scaled contrast that pulls each present
class token toward its confidently-labelled patches, and a cosine pull on
uncertain patches that sit in dense foreground neighborhoods.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cam import UNCERTAIN, ReliabilityMask

FOREGROUND_CODE = 2
UNCERTAIN_CODE = 1


@dataclass(frozen=True)
class LirConfig:
    temperature: float = 0.2
    kernel_size: int = 3
    proportion: float = 1.2
    alpha: float = 0.2
    beta: float = 0.1

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd and >= 1")
        if self.proportion <= 0:
            raise ValueError("proportion must be positive")


@dataclass
class RelationMaps:
    confident: np.ndarray  # [..., n_h, n_w] of {0, 1..C}
    uncertain: np.ndarray  # [..., n_h, n_w] of {0, 1}


@dataclass
class UncertainSet:
    mask: np.ndarray  # [..., n_h, n_w] bool

    @property
    def coords(self) -> list[tuple[int, ...]]:
        return [tuple(int(v) for v in c) for c in np.argwhere(self.mask)]

    def __len__(self) -> int:
        return int(self.mask.sum())


def split_relations(mask: ReliabilityMask | np.ndarray) -> RelationMaps:
    m = mask.labels if isinstance(mask, ReliabilityMask) else np.asarray(mask)
    confident = np.where((m > 0) & (m != UNCERTAIN), m, 0).astype(np.int64)
    uncertain = (m == UNCERTAIN).astype(np.int64)
    return RelationMaps(confident, uncertain)


def _window_sum(x: np.ndarray, d: int) -> np.ndarray:
    """Sum over a centered ``d x d`` window on the last two axes, zero padded."""
    r = d // 2
    h, w = x.shape[-2:]
    pad = np.zeros(x.shape[:-2] + (h + 2 * r, w + 2 * r), dtype=np.int64)
    pad[..., r:r + h, r:r + w] = x
    out = np.zeros(x.shape, dtype=np.int64)
    for dy in range(d):
        for dx in range(d):
            out += pad[..., dy:dy + h, dx:dx + w]
    return out


def kernel_scores(confident: np.ndarray, uncertain: np.ndarray, d: int) -> np.ndarray:
    coded = FOREGROUND_CODE * (np.asarray(confident) > 0) + UNCERTAIN_CODE * (np.asarray(uncertain) == 1)
    return _window_sum(coded.astype(np.int64), d)


def kernel_search(confident: np.ndarray, uncertain: np.ndarray, d: int, proportion: float) -> UncertainSet:
    """Uncertain pixels whose coded ``d x d`` neighborhood mean exceeds ``proportion``."""
    if d < 1 or d % 2 == 0:
        raise ValueError(f"kernel size must be odd and >= 1, got {d}")
    confident, uncertain = np.asarray(confident), np.asarray(uncertain)
    if confident.shape != uncertain.shape:
        raise ad.DimensionError(f"relation maps differ in shape: {confident.shape} vs {uncertain.shape}")
    score = kernel_scores(confident, uncertain, d)
    return UncertainSet((uncertain == 1) & (score / (d * d) > proportion))


def _flat(m: np.ndarray, batch: int) -> np.ndarray:
    return np.asarray(m).reshape(batch, -1)


def _batched(q, p, labels):
    q, p = ad.as_tensor(q), ad.as_tensor(p)
    if q.ndim == 2:
        q, p = ad.reshape(q, (1,) + q.shape), ad.reshape(p, (1,) + p.shape)
    labels = np.asarray(labels, dtype=np.float64).reshape(q.shape[0], q.shape[1])
    return q, p, labels


def cre_loss(q, p, confident: np.ndarray, labels: np.ndarray, temperature: float) -> Tensor:
    """Contrast each present class token against all patches; positives come from ``confident``.

    Averaged over positive pairs within an image, then over the batch;
    an image with no positives contributes 0.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    q, p, labels = _batched(q, p, labels)
    B, C, _ = q.shape
    mc = _flat(confident, B)
    pos = (mc[:, None, :] == np.arange(1, C + 1)[None, :, None]) & (labels[:, :, None] > 0)
    n_pos = pos.sum(axis=(1, 2))
    w = pos / np.maximum(n_pos, 1)[:, None, None]
    logits = ad.scale(ad.matmul(ad.normalize(q), ad.swapaxes(ad.normalize(p), -1, -2)), 1.0 / temperature)
    logp = ad.log_softmax(logits, axis=-1)
    return ad.scale(ad.tsum(ad.mul(logp, w)), -1.0 / B)


def ure_loss(q, p, selected: UncertainSet | np.ndarray, labels: np.ndarray) -> Tensor:
    """Pull selected uncertain patches toward present class tokens, push from absent ones."""
    q, p, labels = _batched(q, p, labels)
    B, C, _ = q.shape
    sel = selected.mask if isinstance(selected, UncertainSet) else np.asarray(selected)
    u = _flat(sel, B).astype(np.float64)
    n_u = u.sum(axis=1)
    n_present = labels.sum(axis=1)
    n_absent = C - n_present
    w_pos = labels[:, :, None] * u[:, None, :] / np.maximum(n_present * n_u, 1)[:, None, None]
    w_neg = (1 - labels)[:, :, None] * u[:, None, :] / np.maximum(n_absent * n_u, 1)[:, None, None]
    cos = ad.cosine_matrix(q, p)  # [B, C, L]
    total = ad.add(float(w_pos.sum()), ad.tsum(ad.mul(cos, w_neg - w_pos)))
    return ad.scale(total, 1.0 / B)
