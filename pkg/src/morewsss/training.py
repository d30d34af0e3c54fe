"""Composite objective, segmentation decoder, and the optimization loop."""
from __future__ import annotations

import logging
from dataclasses import dataclass, fields
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import cam, encoder, gcr, lir
from .autodiff import NonFiniteError, Tape, Tensor
from .config import RunConfig
from .synthdata import SyntheticSample, generate_split, hflip, stack

log = logging.getLogger(__name__)

STREAM_HEADER = "step,L_cls,L_mct,L_cre,L_ure,L_seg,L_total"


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.2
    beta: float = 0.1
    gamma: float = 0.12


@dataclass
class LossReport:
    step: int
    L_cls: float
    L_mct: float
    L_cre: float
    L_ure: float
    L_MoRe: float
    L_seg: float
    L_total: float

    def stream_line(self) -> str:
        vals = (self.L_cls, self.L_mct, self.L_cre, self.L_ure, self.L_seg, self.L_total)
        return f"{self.step}," + ",".join(repr(float(v)) for v in vals)


# -- losses ----------------------------------------------------------------

def cls_loss(logits, labels) -> Tensor:
    """Multi-label soft margin: mean over classes (and batch) of the logistic loss."""
    y = np.asarray(labels, dtype=np.float64)
    pos = ad.mul(ad.softplus(ad.scale(logits, -1.0)), y)
    neg = ad.mul(ad.softplus(logits), 1.0 - y)
    return ad.mean(ad.add(pos, neg))


def mct_loss(class_tokens) -> Tensor:
    """Mean hinged cosine over distinct class-token pairs; stands in for the
    class-token discrepancy term and is 0 when there is a single class."""
    q = ad.as_tensor(class_tokens)
    if q.ndim == 2:
        q = ad.reshape(q, (1,) + q.shape)
    B, C, _ = q.shape
    if C < 2:
        return Tensor(0.0)
    pairs = np.triu(np.ones((C, C)), k=1)
    cos = ad.cosine_matrix(q, q)
    return ad.scale(ad.tsum(ad.mul(ad.relu(cos), pairs)), 1.0 / (B * pairs.sum()))


def init_decoder(embed_dim: int, num_classes: int, rng: np.random.Generator) -> dict[str, Tensor]:
    D = embed_dim
    p = {
        "dec.fc1.w": rng.normal(0.0, 1.0 / np.sqrt(D), size=(D, D)),
        "dec.fc1.b": np.zeros(D),
        "dec.fc2.w": rng.normal(0.0, 1.0 / np.sqrt(D), size=(D, num_classes + 1)),
        "dec.fc2.b": np.zeros(num_classes + 1),
    }
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}


def decode(patch_tokens, params: dict[str, Tensor], grid: tuple[int, int] | None = None) -> Tensor:
    """Per-patch background + class logits, ``[..., L, C+1]`` (or ``[..., n_h, n_w, C+1]`` with ``grid``)."""
    p = ad.as_tensor(patch_tokens)
    if grid is not None and p.shape[-2] != grid[0] * grid[1]:
        raise ad.DimensionError(f"{p.shape[-2]} patches do not fill grid {grid}")
    h = ad.gelu(ad.add(ad.matmul(p, params["dec.fc1.w"]), params["dec.fc1.b"]))
    out = ad.add(ad.matmul(h, params["dec.fc2.w"]), params["dec.fc2.b"])
    if grid is not None:
        out = ad.reshape(out, out.shape[:-2] + tuple(grid) + out.shape[-1:])
    return out


def seg_loss(logits, pseudo: np.ndarray) -> Tensor:
    """Mean per-pixel cross-entropy against integer labels."""
    logits = ad.as_tensor(logits)
    k = logits.shape[-1]
    onehot = np.eye(k)[np.asarray(pseudo).reshape(logits.shape[:-1])]
    n = onehot.size // k
    return ad.scale(ad.tsum(ad.mul(ad.log_softmax(logits, axis=-1), onehot)), -1.0 / n)


def total_loss(l_cls, l_mct, l_cre, l_ure, l_seg, weights: LossWeights) -> tuple[Tensor, Tensor]:
    """Returns ``(L_MoRe, L_total)``."""
    more = ad.add(ad.add(ad.add(l_cls, l_mct), ad.scale(l_cre, weights.alpha)), ad.scale(l_ure, weights.beta))
    return more, ad.add(more, ad.scale(l_seg, weights.gamma))


# -- optimizer -------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay (decay applied before the moment step)."""

    def __init__(self, lr: float, weight_decay: float = 0.0, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, no_decay: Sequence[str] = ()):
        self.lr, self.weight_decay = lr, weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.no_decay = set(no_decay)
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            m = self.m.get(name, np.zeros_like(p.data))
            v = self.v.get(name, np.zeros_like(p.data))
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            data = p.data
            if self.weight_decay and name not in self.no_decay:
                data = data * (1 - self.lr * self.weight_decay)
            p.data = data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {f"adam.m/{k}": v for k, v in self.m.items()}
        out.update({f"adam.v/{k}": v for k, v in self.v.items()})
        out["adam.t"] = np.array(float(self.t))
        return out

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        self.m = {k[len("adam.m/"):]: v.copy() for k, v in tensors.items() if k.startswith("adam.m/")}
        self.v = {k[len("adam.v/"):]: v.copy() for k, v in tensors.items() if k.startswith("adam.v/")}
        self.t = int(np.asarray(tensors.get("adam.t", 0.0)).item())


def no_decay_names(params: dict[str, Tensor]) -> list[str]:
    return [k for k, t in params.items() if t.ndim < 2 or k in ("enc.pos", "enc.cls")]


def make_optimizer(config: RunConfig, params: dict[str, Tensor]) -> AdamW:
    return AdamW(config.lr, config.weight_decay, config.beta1, config.beta2, config.adam_eps,
                 no_decay=no_decay_names(params))


# -- model -----------------------------------------------------------------

def init_model(config: RunConfig, seed: int | None = None) -> dict[str, Tensor]:
    rng = np.random.default_rng(config.seed if seed is None else seed)
    params = encoder.init_params(config.encoder, rng)
    gcr_params = gcr.init_params(config.embed_dim, rng)
    if config.use_gcr:
        params.update(gcr_params)
    D, C = config.embed_dim, config.num_classes
    params["cls.w"] = Tensor(rng.normal(0.0, 1.0 / np.sqrt(D), size=(D, C)), requires_grad=True, name="cls.w")
    params.update(init_decoder(D, C, rng))
    return params


@dataclass
class Forward:
    class_tokens: Tensor
    patch_tokens: Tensor
    q: Tensor
    cam_raw: Tensor
    class_logits: Tensor
    seg_logits: Tensor
    graph: gcr.GraphCategoryState | None = None


def forward(params: dict[str, Tensor], images, config: RunConfig) -> Forward:
    bundle = encoder.encode(images, params, config.encoder)
    t, p = bundle.class_tokens, bundle.patch_tokens
    state = None
    if config.use_gcr:
        q, state = gcr.gcr_forward(t, p, params, config.k)
    else:
        q = t
    raw = cam.cam_scores(p, params["cls.w"])
    logits = cam.pool_scores(raw, config.cls_pooling)
    dec_in = p if config.seg_grad_to_encoder else p.detach()
    return Forward(t, p, q, raw, logits, decode(dec_in, params), state)


@dataclass
class StepArtifacts:
    """Detached intermediate maps of one step, for inspection and tests."""
    cam: cam.ActivationMap
    reliability: cam.ReliabilityMask | None
    relations: lir.RelationMaps | None
    uncertain: lir.UncertainSet | None
    lam: cam.ActivationMap
    pseudo: np.ndarray


def objective(fwd: Forward, labels: np.ndarray, config: RunConfig, lir_on: bool):
    """All loss terms of one batch plus the detached maps that fed them."""
    grid = config.encoder.grid
    labels = np.asarray(labels, dtype=np.float64)
    l_cls = cls_loss(fwd.class_logits, labels)
    l_mct = mct_loss(fwd.q)
    cam_map = cam.ActivationMap(
        cam.to_grid(cam.normalize_channels(fwd.cam_raw.data, labels), grid), "CAM")
    zero = Tensor(0.0)
    l_cre = l_ure = zero
    rel = relations = selected = None
    if lir_on and (config.alpha > 0 or config.beta > 0):
        rel = cam.multi_threshold_filter(cam_map, config.cam_low, config.cam_high)
        relations = lir.split_relations(rel)
        if config.alpha > 0:
            l_cre = lir.cre_loss(fwd.q, fwd.patch_tokens, relations.confident, labels, config.temperature)
        if config.beta > 0:
            selected = lir.kernel_search(relations.confident, relations.uncertain,
                                         config.kernel_size, config.proportion)
            l_ure = lir.ure_loss(fwd.q, fwd.patch_tokens, selected, labels)
    lam = cam.compute_lam(fwd.q.data, fwd.patch_tokens.data, grid, labels)
    pseudo = cam.to_pseudo_label(lam, config.bg_threshold)
    l_seg = seg_loss(fwd.seg_logits, pseudo)
    weights = LossWeights(config.alpha, config.beta, config.gamma)
    more, total = total_loss(l_cls, l_mct, l_cre, l_ure, l_seg, weights)
    parts = dict(L_cls=l_cls, L_mct=l_mct, L_cre=l_cre, L_ure=l_ure, L_MoRe=more, L_seg=l_seg, L_total=total)
    return parts, StepArtifacts(cam_map, rel, relations, selected, lam, pseudo)


@dataclass
class TrainState:
    params: dict[str, Tensor]
    optimizer: AdamW
    step: int = 0

    def tensors(self) -> dict[str, np.ndarray]:
        out = {k: t.data for k, t in self.params.items()}
        out.update(self.optimizer.state_tensors())
        return out


def init_state(config: RunConfig) -> TrainState:
    params = init_model(config)
    return TrainState(params, make_optimizer(config, params), 0)


def state_from_tensors(config: RunConfig, tensors: dict[str, np.ndarray], step: int) -> TrainState:
    params = init_model(config)
    missing = set(params) - set(tensors)
    if missing:
        raise KeyError(f"checkpoint lacks parameters: {sorted(missing)}")
    for k, t in params.items():
        if tensors[k].shape != t.shape:
            raise ValueError(f"parameter {k}: checkpoint shape {tensors[k].shape} != model shape {t.shape}")
        t.data = tensors[k].copy()
    opt = make_optimizer(config, params)
    opt.load_state(tensors)
    return TrainState(params, opt, step)


def lir_active(step: int, config: RunConfig) -> bool:
    """``step`` is 1-based; LIR joins once ``lir_warmup`` steps have been taken."""
    return step > config.lir_warmup


def train_step(state: TrainState, images: np.ndarray, labels: np.ndarray, config: RunConfig) -> LossReport:
    """One forward/backward/update; ``state`` is mutated in place."""
    step = state.step + 1
    with Tape() as tape:
        fwd = forward(state.params, Tensor(images), config)
        parts, _ = objective(fwd, labels, config, lir_active(step, config))
    total = parts["L_total"]
    if not np.isfinite(total.data).all():
        where = tape.first_nonfinite() or "loss"
        raise NonFiniteError(f"non-finite loss at step {step}; first bad value in {where}")
    tape.backward(total)
    grads = {k: t.grad for k, t in state.params.items() if t.grad is not None}
    state.optimizer.step(state.params, grads)
    for t in state.params.values():
        t.grad = None
    state.step = step
    return LossReport(step, **{k: float(v.data) for k, v in parts.items()})


def sample_batch(samples: Sequence[SyntheticSample], step: int, config: RunConfig):
    """Batch for a 1-based step; a pure function of (seed, step) so resumed runs match."""
    rng = np.random.default_rng((config.seed, step))
    n = len(samples)
    idx = rng.choice(n, size=min(config.batch_size, n), replace=False)
    flips = rng.random(len(idx)) < 0.5
    batch = [hflip(samples[i]) if (config.hflip and f) else samples[i] for i, f in zip(idx, flips)]
    return stack(batch)


def train_split(config: RunConfig) -> list[SyntheticSample]:
    return generate_split(config.train_seed, config.train_size, config.synth)


def val_split(config: RunConfig) -> list[SyntheticSample]:
    return generate_split(config.val_seed, config.val_size, config.synth)


def train(config: RunConfig, samples: Sequence[SyntheticSample] | None = None,
          state: TrainState | None = None,
          on_step: Callable[[LossReport, TrainState], None] | None = None) -> tuple[TrainState, list[LossReport]]:
    samples = train_split(config) if samples is None else samples
    state = init_state(config) if state is None else state
    reports = []
    while state.step < config.steps:
        images, _, labels = sample_batch(samples, state.step + 1, config)
        rep = train_step(state, images, labels, config)
        reports.append(rep)
        if on_step is not None:
            on_step(rep, state)
        if rep.step % 100 == 0:
            log.info("step %d total %.4f cls %.4f cre %.4f", rep.step, rep.L_total, rep.L_cls, rep.L_cre)
    return state, reports


def report_fields() -> list[str]:
    return [f.name for f in fields(LossReport)]
