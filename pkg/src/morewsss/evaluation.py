"""Validation: LAM seeds and decoder masks scored against ground truth."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import cam
from .autodiff import Tensor
from .config import RunConfig
from .metrics import ConfusionMatrix, MetricsReport, report
from .synthdata import SyntheticSample, stack
from .training import forward

EVAL_BATCH = 50


@dataclass
class Prediction:
    class_logits: np.ndarray  # [B, C]
    cam: cam.ActivationMap    # feature resolution
    lam: cam.ActivationMap    # feature resolution
    seed_mask: np.ndarray     # [B, H, W] from upsampled LAM
    decoder_mask: np.ndarray  # [B, H, W] from upsampled decoder logits
    neighbors: np.ndarray | None


def predict(params: dict[str, Tensor], images: np.ndarray, labels: np.ndarray, config: RunConfig) -> Prediction:
    """No-grad inference. ``labels`` are the image-level labels that gate LAM/CAM channels."""
    grid = config.encoder.grid
    size = (config.image_size, config.image_size)
    fwd = forward(params, Tensor(images), config)
    q, p = fwd.q.data, fwd.patch_tokens.data
    cam_map = cam.ActivationMap(cam.to_grid(cam.normalize_channels(fwd.cam_raw.data, labels), grid), "CAM")
    lam = cam.compute_lam(q, p, grid, labels)
    seed = cam.to_pseudo_label(cam.ActivationMap(cam.upsample(lam.scores, size), "LAM"), config.bg_threshold)
    seg = fwd.seg_logits.data.reshape(fwd.seg_logits.shape[:-2] + grid + fwd.seg_logits.shape[-1:])
    dec = np.argmax(cam.upsample(seg, size), axis=-1)
    nb = fwd.graph.neighbors if fwd.graph is not None else None
    return Prediction(fwd.class_logits.data, cam_map, lam, seed, dec, nb)


@dataclass
class EvalResult:
    seed: MetricsReport
    mask: MetricsReport
    accuracy: float  # exact-match multi-label accuracy
    seed_cm: ConfusionMatrix
    mask_cm: ConfusionMatrix


def evaluate(params: dict[str, Tensor], samples: Sequence[SyntheticSample], config: RunConfig) -> EvalResult:
    n = config.num_classes + 1
    seed_cm, mask_cm = ConfusionMatrix(n), ConfusionMatrix(n)
    hits = 0
    for i in range(0, len(samples), EVAL_BATCH):
        images, masks, labels = stack(list(samples[i:i + EVAL_BATCH]))
        pred = predict(params, images, labels, config)
        seed_cm.accumulate(pred.seed_mask, masks)
        mask_cm.accumulate(pred.decoder_mask, masks)
        hits += int(np.all((pred.class_logits > 0) == (labels > 0), axis=1).sum())
    return EvalResult(report(seed_cm), report(mask_cm), hits / len(samples), seed_cm, mask_cm)


def classification_accuracy(params: dict[str, Tensor], samples: Sequence[SyntheticSample], config: RunConfig) -> float:
    hits = 0
    for i in range(0, len(samples), EVAL_BATCH):
        images, _, labels = stack(list(samples[i:i + EVAL_BATCH]))
        fwd = forward(params, Tensor(images), config)
        hits += int(np.all((fwd.class_logits.data > 0) == (labels > 0), axis=1).sum())
    return hits / len(samples)
