"""Colored shapes on value-noise backgrounds, with exact masks.

Each class is a fixed (shape, hue) pair, so image-level classification is
easy while pixel-accurate localization is not.
"""
from __future__ import annotations

import colorsys
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

SHAPES = ("circle", "triangle", "square", "diamond")
MIN_AREA, MAX_AREA = 0.04, 0.40
MAX_ATTEMPTS = 100


class PlacementError(RuntimeError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 3
    image_size: int = 64
    max_shapes: int = 3
    hue_jitter: float = 0.10
    min_fraction: float = 0.06
    max_fraction: float = 0.20

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if not 1 <= self.max_shapes <= self.num_classes:
            raise ValueError("max_shapes must be in [1, num_classes]")
        if not MIN_AREA <= self.min_fraction <= self.max_fraction <= MAX_AREA:
            raise ValueError("shape area fractions must lie within [0.04, 0.40]")


@dataclass
class SyntheticSample:
    image: np.ndarray   # [3, H, W] in [0, 1]
    mask: np.ndarray    # [H, W] of {0, 1..C}
    labels: np.ndarray  # [C] multi-hot
    seed: int


def class_shape(c: int) -> str:
    """Shape drawn for 1-based class id ``c``."""
    return SHAPES[(c - 1) % len(SHAPES)]


def class_hue(c: int, num_classes: int) -> float:
    return (c - 1) / num_classes


def _value_noise(rng: np.random.Generator, size: int, cells: int = 5) -> np.ndarray:
    coarse = rng.random((cells + 1, cells + 1))
    x = np.linspace(0, cells, size)
    i = np.minimum(x.astype(int), cells - 1)
    f = x - i
    f = f * f * (3 - 2 * f)
    rows = coarse[i] * (1 - f)[:, None] + coarse[i + 1] * f[:, None]
    return rows[:, i] * (1 - f)[None, :] + rows[:, i + 1] * f[None, :]


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.uniform(0.35, 0.55)
    img = np.empty((3, size, size))
    for ch in range(3):
        img[ch] = base + 0.12 * (_value_noise(rng, size) - 0.5)
    img += rng.normal(0.0, 0.02, size=img.shape)
    return img


@lru_cache(maxsize=4)
def _pixel_centers(size: int) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    return yy, xx


def _rasterize(kind: str, cy: float, cx: float, s: float, size: int) -> np.ndarray:
    yy, xx = _pixel_centers(size)
    dy, dx = yy - cy, xx - cx
    if kind == "circle":
        return dy * dy + dx * dx <= s * s
    if kind == "square":
        return (np.abs(dy) <= s / 2) & (np.abs(dx) <= s / 2)
    if kind == "diamond":
        return np.abs(dy) + np.abs(dx) <= s / 2
    if kind == "triangle":
        # apex up, base at the bottom of an s x s box
        t = (dy + s / 2) / s
        return (t >= 0) & (t <= 1) & (np.abs(dx) <= t * s / 2)
    raise ValueError(f"unknown shape {kind!r}")


def _extent(kind: str, area: float) -> tuple[float, float]:
    """Size parameter for the target area, and the half-extent of its bounding box."""
    if kind == "circle":
        r = np.sqrt(area / np.pi)
        return r, r
    if kind == "square":
        s = np.sqrt(area)
        return s, s / 2
    s = np.sqrt(2 * area)
    return s, s / 2


def _color(rng: np.random.Generator, c: int, num_classes: int, jitter: float) -> np.ndarray:
    hue = (class_hue(c, num_classes) + rng.uniform(-jitter, jitter)) % 1.0
    return np.array(colorsys.hsv_to_rgb(hue, rng.uniform(0.7, 1.0), rng.uniform(0.7, 1.0)))


def _place(rng: np.random.Generator, kind: str, mask: np.ndarray, config: SynthConfig) -> np.ndarray | None:
    n = config.image_size
    for _ in range(MAX_ATTEMPTS):
        frac = rng.uniform(config.min_fraction, config.max_fraction)
        s, half = _extent(kind, frac * n * n)
        if 2 * half + 2 > n:
            continue
        cy, cx = rng.uniform(half + 1, n - half - 1, size=2)
        region = _rasterize(kind, cy, cx, s, n)
        # one-pixel margin keeps shapes from touching
        grown = region.copy()
        grown[1:] |= region[:-1]
        grown[:-1] |= region[1:]
        grown[:, 1:] |= region[:, :-1]
        grown[:, :-1] |= region[:, 1:]
        count = int(region.sum())
        if np.any(mask[grown]) or not MIN_AREA * n * n <= count <= MAX_AREA * n * n:
            continue
        return region
    return None


def generate_sample(seed: int, config: SynthConfig = SynthConfig()) -> SyntheticSample:
    """Deterministic sample for ``seed``; a failed layout is redrawn from scratch."""
    rng = np.random.default_rng(seed)
    n, C = config.image_size, config.num_classes
    image = _background(rng, n)
    k = int(rng.integers(1, config.max_shapes + 1))
    classes = rng.choice(np.arange(1, C + 1), size=k, replace=False)
    for _ in range(MAX_ATTEMPTS):
        mask = np.zeros((n, n), dtype=np.int64)
        regions = []
        for c in classes:
            region = _place(rng, class_shape(int(c)), mask, config)
            if region is None:
                break
            mask[region] = c
            regions.append((int(c), region))
        else:
            break
    else:
        raise PlacementError(f"could not place classes {classes.tolist()} after {MAX_ATTEMPTS} layouts (seed {seed})")
    for c, region in regions:
        color = _color(rng, c, C, config.hue_jitter)
        count = int(region.sum())
        image[:, region] = color[:, None] * (1.0 + rng.normal(0.0, 0.03, size=(3, count)))
    labels = np.zeros(C)
    labels[classes - 1] = 1.0
    return SyntheticSample(np.clip(image, 0.0, 1.0), mask, labels, seed)


def generate_split(seed: int, n: int, config: SynthConfig = SynthConfig()) -> list[SyntheticSample]:
    if n < 1:
        raise ValueError("split size must be >= 1")
    return [generate_sample(seed + i, config) for i in range(n)]


def hflip(sample: SyntheticSample) -> SyntheticSample:
    return SyntheticSample(sample.image[:, :, ::-1].copy(), sample.mask[:, ::-1].copy(),
                           sample.labels.copy(), sample.seed)


def stack(samples: list[SyntheticSample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return (np.stack([s.image for s in samples]), np.stack([s.mask for s in samples]),
            np.stack([s.labels for s in samples]))
