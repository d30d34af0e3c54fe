"""Tiny ViT backbone with one learnable token per foreground class."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MLP_RATIO = 4


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 32
    depth: int = 2
    num_heads: int = 4
    num_classes: int = 3

    def __post_init__(self):
        if self.image_size <= 0 or self.patch_size <= 0 or self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.num_heads <= 0 or self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.depth < 0 or self.num_classes < 1:
            raise ValueError("depth must be >= 0 and num_classes >= 1")

    @property
    def grid(self) -> tuple[int, int]:
        n = self.image_size // self.patch_size
        return n, n

    @property
    def num_patches(self) -> int:
        nh, nw = self.grid
        return nh * nw

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size ** 2


@dataclass
class TokenBundle:
    class_tokens: Tensor  # [B, C, D] or [C, D]
    patch_tokens: Tensor  # [B, L, D] or [L, D]
    grid: tuple[int, int]


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def init_params(config: EncoderConfig, seed: int | np.random.Generator) -> dict[str, Tensor]:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    D, C, L = config.embed_dim, config.num_classes, config.num_patches
    hidden = MLP_RATIO * D
    p: dict[str, np.ndarray] = {
        "enc.patch.w": trunc_normal(rng, (config.patch_dim, D)),
        "enc.patch.b": np.zeros(D),
        "enc.pos": trunc_normal(rng, (L, D)),
        "enc.cls": trunc_normal(rng, (C, D)),
    }
    for i in range(config.depth):
        k = f"enc.block{i}."
        p[k + "ln1.g"], p[k + "ln1.b"] = np.ones(D), np.zeros(D)
        p[k + "qkv.w"], p[k + "qkv.b"] = trunc_normal(rng, (D, 3 * D)), np.zeros(3 * D)
        p[k + "proj.w"], p[k + "proj.b"] = trunc_normal(rng, (D, D)), np.zeros(D)
        p[k + "ln2.g"], p[k + "ln2.b"] = np.ones(D), np.zeros(D)
        p[k + "fc1.w"], p[k + "fc1.b"] = trunc_normal(rng, (D, hidden)), np.zeros(hidden)
        p[k + "fc2.w"], p[k + "fc2.b"] = trunc_normal(rng, (hidden, D)), np.zeros(D)
    return {name: Tensor(v, requires_grad=True, name=name) for name, v in p.items()}


def count_params(params: dict[str, Tensor], prefix: str = "") -> int:
    return sum(t.size for k, t in params.items() if k.startswith(prefix))


def patchify(image, patch_size: int) -> Tensor:
    """``[..., 3, H, W] -> [..., L, 3*p*p]`` with patches in row-major order."""
    image = ad.as_tensor(image)
    *lead, ch, h, w = image.shape
    if h % patch_size or w % patch_size:
        raise ValueError(f"image {h}x{w} not divisible by patch size {patch_size}")
    nh, nw, ps = h // patch_size, w // patch_size, patch_size
    n = len(lead)
    x = ad.reshape(image, (*lead, ch, nh, ps, nw, ps))
    lead_axes = tuple(range(n))
    x = ad.transpose(x, lead_axes + (n + 1, n + 3, n, n + 2, n + 4))
    return ad.reshape(x, (*lead, nh * nw, ch * ps * ps))


def unpatchify(patches: np.ndarray, patch_size: int, grid: tuple[int, int], channels: int = 3) -> np.ndarray:
    patches = np.asarray(patches)
    *lead, _, _ = patches.shape
    nh, nw = grid
    ps = patch_size
    n = len(lead)
    x = patches.reshape(*lead, nh, nw, channels, ps, ps)
    x = np.transpose(x, tuple(range(n)) + (n + 2, n, n + 3, n + 1, n + 4))
    return x.reshape(*lead, channels, nh * ps, nw * ps)


def _affine_ln(x: Tensor, g: Tensor, b: Tensor) -> Tensor:
    return ad.add(ad.mul(ad.layer_norm(x), g), b)


def _attention(x: Tensor, params: dict[str, Tensor], k: str, heads: int) -> Tensor:
    B, N, D = x.shape
    dh = D // heads
    qkv = ad.add(ad.matmul(x, params[k + "qkv.w"]), params[k + "qkv.b"])
    qkv = ad.transpose(ad.reshape(qkv, (B, N, 3, heads, dh)), (2, 0, 3, 1, 4))
    q, kk, v = qkv[0], qkv[1], qkv[2]
    att = ad.softmax(ad.scale(ad.matmul(q, ad.swapaxes(kk, -1, -2)), 1.0 / np.sqrt(dh)), axis=-1)
    out = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (B, N, D))
    return ad.add(ad.matmul(out, params[k + "proj.w"]), params[k + "proj.b"])


def _block(x: Tensor, params: dict[str, Tensor], i: int, heads: int) -> Tensor:
    k = f"enc.block{i}."
    x = ad.add(x, _attention(_affine_ln(x, params[k + "ln1.g"], params[k + "ln1.b"]), params, k, heads))
    h = _affine_ln(x, params[k + "ln2.g"], params[k + "ln2.b"])
    h = ad.gelu(ad.add(ad.matmul(h, params[k + "fc1.w"]), params[k + "fc1.b"]))
    h = ad.add(ad.matmul(h, params[k + "fc2.w"]), params[k + "fc2.b"])
    return ad.add(x, h)


def encode(image, params: dict[str, Tensor], config: EncoderConfig) -> TokenBundle:
    """Run the backbone on ``[3, H, W]`` or a batch ``[B, 3, H, W]``."""
    image = ad.as_tensor(image)
    single = image.ndim == 3
    if single:
        image = ad.reshape(image, (1,) + image.shape)
    s = config.image_size
    if image.ndim != 4 or image.shape[1:] != (3, s, s):
        raise ValueError(f"expected image shape (3, {s}, {s}), got {image.shape[-3:]}")
    B = image.shape[0]
    C, D = config.num_classes, config.embed_dim
    x = patchify(image, config.patch_size)
    x = ad.add(ad.add(ad.matmul(x, params["enc.patch.w"]), params["enc.patch.b"]), params["enc.pos"])
    cls = ad.broadcast_to(params["enc.cls"], (B, C, D))
    tokens = ad.concat([cls, x], axis=1)
    for i in range(config.depth):
        tokens = _block(tokens, params, i, config.num_heads)
    class_tokens, patch_tokens = tokens[:, :C], tokens[:, C:]
    if single:
        class_tokens, patch_tokens = class_tokens[0], patch_tokens[0]
    return TokenBundle(class_tokens, patch_tokens, config.grid)
