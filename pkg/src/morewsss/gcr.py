"""Graph aggregation of patch semantics into class tokens.

Class tokens become *heads*, patch tokens become *tails*. Each head keeps
its K highest-scoring tails as neighbors, builds one edge embedding per
neighbor, and pulls a gated convex combination of those tails back into
itself. All functions take batched inputs (``[B, C, D]`` heads,
``[B, L, D]`` tails); the single-image forms ``[C, D]``/``[L, D]`` and the
single-head form ``[D]`` are accepted as well.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class GraphCategoryState:
    heads: Tensor      # [B, C, D]
    tails: Tensor      # [B, L, D]
    relations: Tensor  # [B, C, K]
    neighbors: np.ndarray  # [B, C, K] patch indices, descending score
    edges: Tensor      # [B, C, K, D]
    weights: Tensor    # [B, C, K]
    aggregate: Tensor  # [B, C, D]
    output: Tensor     # [B, C, D]


def default_k(num_patches: int) -> int:
    """Half the tails, as in 392 of 784 at full scale."""
    return max(1, num_patches // 2)


def init_params(embed_dim: int, seed: int | np.random.Generator) -> dict[str, Tensor]:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    D = embed_dim
    std = 1.0 / np.sqrt(D)
    p = {}
    for name in ("head", "tail", "fuse1", "fuse2"):
        p[f"gcr.{name}.w"] = rng.normal(0.0, std, size=(D, D))
        p[f"gcr.{name}.b"] = np.zeros(D)
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}


def _lift(x: Tensor, target_ndim: int) -> Tensor:
    x = ad.as_tensor(x)
    while x.ndim < target_ndim:
        x = ad.reshape(x, (1,) + x.shape)
    return x


def project(class_tokens, patch_tokens, params: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
    """Linear heads from class tokens and tails from patch tokens."""
    ct, pt = ad.as_tensor(class_tokens), ad.as_tensor(patch_tokens)
    if ct.shape[-1] != pt.shape[-1]:
        raise ad.DimensionError(f"token widths differ: {ct.shape} vs {pt.shape}")
    heads = ad.add(ad.matmul(ct, params["gcr.head.w"]), params["gcr.head.b"])
    tails = ad.add(ad.matmul(pt, params["gcr.tail.w"]), params["gcr.tail.b"])
    return heads, tails


def select_neighbors(heads, tails, k: int) -> tuple[Tensor, np.ndarray]:
    """Top-k tails per head by raw dot product, with softmax over the kept scores.

    Returns ``(r, N)``; ``r[..., j]`` is the weight of tail ``N[..., j]`` and
    both are ordered by descending score (lowest patch index wins ties).
    """
    heads, tails = ad.as_tensor(heads), ad.as_tensor(tails)
    single = heads.ndim == 1
    h, t = _lift(heads, 3), _lift(tails, 3)
    L = t.shape[-2]
    if not 1 <= k <= L:
        raise ValueError(f"K must be in [1, {L}], got {k}")
    scores = ad.matmul(h, ad.swapaxes(t, -1, -2))
    picked, idx = ad.topk(scores, k)
    r = ad.softmax(picked, axis=-1)
    if single:
        return r[0, 0], idx[0, 0]
    if heads.ndim == 2:
        return r[0], idx[0]
    return r, idx


def _gather(tails: Tensor, neighbors: np.ndarray) -> tuple[Tensor, np.ndarray]:
    t = _lift(tails, 3)
    nb = np.asarray(neighbors)
    while nb.ndim < 3:
        nb = nb[None]
    return ad.gather_rows(t, nb), nb


def edge_embeddings(heads, tails, relations, neighbors) -> Tensor:
    """``e_ij = r_ij * t_j + (1 - r_ij) * h_i`` for each kept neighbor j."""
    heads = ad.as_tensor(heads)
    out_ndim = heads.ndim + 1
    h = _lift(heads, 3)
    r = _lift(relations, 3)
    t_sel, _ = _gather(tails, neighbors)
    r4 = ad.reshape(r, r.shape + (1,))
    h4 = ad.reshape(h, h.shape[:-1] + (1, h.shape[-1]))
    e = ad.add(ad.mul(r4, t_sel), ad.mul(ad.sub(1.0, r4), h4))
    return _drop_lead(e, out_ndim)


def _drop_lead(x: Tensor, ndim: int) -> Tensor:
    while x.ndim > ndim:
        x = x[0]
    return x


def aggregate(heads, edges, tails, neighbors) -> tuple[Tensor, Tensor]:
    """Gated weights ``S = softmax_j(t_j . tanh(h_i + e_ij))`` and ``a_i = sum_j S_ij t_j``."""
    heads = ad.as_tensor(heads)
    out_ndim = heads.ndim
    h = _lift(heads, 3)
    e = _lift(edges, 4)
    t_sel, _ = _gather(tails, neighbors)
    h4 = ad.reshape(h, h.shape[:-1] + (1, h.shape[-1]))
    gate = ad.tanh(ad.add(h4, e))
    s = ad.softmax(ad.tsum(ad.mul(t_sel, gate), axis=-1), axis=-1)
    a = ad.tsum(ad.mul(ad.reshape(s, s.shape + (1,)), t_sel), axis=-2)
    return _drop_lead(a, out_ndim), _drop_lead(s, out_ndim)


def fuse(heads, agg, params: dict[str, Tensor]) -> Tensor:
    """Bi-directional fusion: ``lrelu(W1(h + a)) + lrelu(W2(a * h))``."""
    heads, agg = ad.as_tensor(heads), ad.as_tensor(agg)
    if heads.shape != agg.shape:
        raise ad.DimensionError(f"fuse shape mismatch: {heads.shape} vs {agg.shape}")
    s = ad.add(ad.matmul(ad.add(heads, agg), params["gcr.fuse1.w"]), params["gcr.fuse1.b"])
    m = ad.add(ad.matmul(ad.mul(agg, heads), params["gcr.fuse2.w"]), params["gcr.fuse2.b"])
    return ad.add(ad.leaky_relu(s), ad.leaky_relu(m))


def gcr_forward(class_tokens, patch_tokens, params: dict[str, Tensor], k: int) -> tuple[Tensor, GraphCategoryState]:
    ct, pt = ad.as_tensor(class_tokens), ad.as_tensor(patch_tokens)
    single = ct.ndim == 2
    ct, pt = _lift(ct, 3), _lift(pt, 3)
    heads, tails = project(ct, pt, params)
    r, nb = select_neighbors(heads, tails, k)
    e = edge_embeddings(heads, tails, r, nb)
    a, s = aggregate(heads, e, tails, nb)
    q = fuse(heads, a, params)
    state = GraphCategoryState(heads, tails, r, nb, e, s, a, q)
    return (q[0] if single else q), state
