"""Self-check suite: naive-loop oracles and finite-difference gradient checks.

Every check is a small pure function returning a :class:`CheckResult`.
``run_all`` executes them in a fixed order. Passing ``fault="grad"`` makes
the gradient checks compare against a deliberately perturbed analytic
gradient, which must be reported as a failure.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import cam, gcr, lir
from .autodiff import Tensor
from .config import RunConfig
from .encoder import EncoderConfig, encode, init_params
from .training import (LossWeights, cls_loss, decode, forward, init_decoder, init_model, objective,
                       seg_loss, total_loss)

GRAD_TOL = 1e-4
INSTANCES = 20


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail} ({self.seconds:.1f}s)"


# -- naive oracles ---------------------------------------------------------

def naive_topk(x: np.ndarray, k: int) -> list[int]:
    return sorted(range(len(x)), key=lambda j: (-x[j], j))[:k]


def naive_kernel_search(confident: np.ndarray, uncertain: np.ndarray, d: int, proportion: float) -> set[tuple[int, int]]:
    h, w = confident.shape
    r = d // 2
    out = set()
    for i in range(h):
        for j in range(w):
            if uncertain[i, j] != 1:
                continue
            s = 0
            for di in range(-r, r + 1):
                for dj in range(-r, r + 1):
                    y, x = i + di, j + dj
                    if 0 <= y < h and 0 <= x < w:
                        s += 2 if confident[y, x] > 0 else (1 if uncertain[y, x] == 1 else 0)
            if s / (d * d) > proportion:
                out.add((i, j))
    return out


def naive_gcr(ct: np.ndarray, pt: np.ndarray, params: dict[str, np.ndarray], k: int) -> np.ndarray:
    """Per-head scalar loops over one image; returns the fused class tokens."""
    C, D = ct.shape
    L = pt.shape[0]

    def lin(x, name):
        w, b = params[f"gcr.{name}.w"], params[f"gcr.{name}.b"]
        return [sum(x[a] * w[a, o] for a in range(D)) + b[o] for o in range(D)]

    def lrelu(v):
        return v if v > 0 else 0.01 * v

    out = np.zeros((C, D))
    tails = [lin(pt[j], "tail") for j in range(L)]
    for i in range(C):
        h = lin(ct[i], "head")
        scores = [sum(h[a] * tails[j][a] for a in range(D)) for j in range(L)]
        nb = naive_topk(scores, k)
        m = max(scores[j] for j in nb)
        z = sum(math.exp(scores[j] - m) for j in nb)
        r = [math.exp(scores[j] - m) / z for j in nb]
        gate = []
        for n, j in enumerate(nb):
            e = [r[n] * tails[j][a] + (1 - r[n]) * h[a] for a in range(D)]
            gate.append(sum(tails[j][a] * math.tanh(h[a] + e[a]) for a in range(D)))
        gm = max(gate)
        gz = sum(math.exp(g - gm) for g in gate)
        s = [math.exp(g - gm) / gz for g in gate]
        agg = [sum(s[n] * tails[j][a] for n, j in enumerate(nb)) for a in range(D)]
        u = lin([h[a] + agg[a] for a in range(D)], "fuse1")
        v = lin([agg[a] * h[a] for a in range(D)], "fuse2")
        out[i] = [lrelu(u[o]) + lrelu(v[o]) for o in range(D)]
    return out


def _cos(a, b) -> float:
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(x * x for x in b))
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return sum(x * y for x, y in zip(a, b)) / (na * nb)


def naive_cre(q: np.ndarray, p: np.ndarray, confident: np.ndarray, labels: np.ndarray, tau: float) -> float:
    """Batch mean of per-image averages over (class, positive patch) pairs."""
    total = 0.0
    for b in range(q.shape[0]):
        mc = confident[b].reshape(-1)
        terms = []
        for c in range(q.shape[1]):
            if labels[b, c] <= 0:
                continue
            logits = [_cos(q[b, c], p[b, j]) / tau for j in range(p.shape[1])]
            m = max(logits)
            lse = m + math.log(sum(math.exp(v - m) for v in logits))
            terms += [lse - logits[j] for j in range(p.shape[1]) if mc[j] == c + 1]
        total += sum(terms) / len(terms) if terms else 0.0
    return total / q.shape[0]


def naive_ure(q: np.ndarray, p: np.ndarray, selected: np.ndarray, labels: np.ndarray) -> float:
    total = 0.0
    for b in range(q.shape[0]):
        us = [j for j, s in enumerate(selected[b].reshape(-1)) if s]
        if not us:
            continue
        present = [c for c in range(q.shape[1]) if labels[b, c] > 0]
        absent = [c for c in range(q.shape[1]) if labels[b, c] <= 0]
        if present:
            total += sum(1 - _cos(q[b, c], p[b, j]) for c in present for j in us) / (len(present) * len(us))
        if absent:
            total += sum(_cos(q[b, c], p[b, j]) for c in absent for j in us) / (len(absent) * len(us))
    return total / q.shape[0]


# -- gradient checking -----------------------------------------------------

def grad_error(f: Callable[[Tensor], Tensor], x: np.ndarray, fault: str | None = None,
               coords: np.ndarray | None = None, step: float = 1e-5) -> float:
    """Max relative error; ``coords`` restricts the central differences to those flat indices."""
    x = np.array(x, dtype=np.float64)
    analytic = ad.grad_of(f, x)
    if fault == "grad":
        analytic = analytic * 1.01 + 1e-3
    if coords is None:
        numeric = ad.numeric_grad(lambda v: f(Tensor(v)).item(), x, step)
        return ad.relative_error(analytic, numeric)
    numeric = np.empty(len(coords))
    flat = x.reshape(-1)
    for n, i in enumerate(coords):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(Tensor(x)).item()
        flat[i] = orig - step
        fm = f(Tensor(x)).item()
        flat[i] = orig
        numeric[n] = (fp - fm) / (2 * step)
    return ad.relative_error(analytic.reshape(-1)[coords], numeric)


def _small_shapes(rng: np.random.Generator) -> tuple[int, int, int]:
    return int(rng.integers(1, 4)), int(rng.choice([4, 9, 16])), int(rng.choice([4, 8]))


def _random_relations(rng, C, n):
    m = rng.choice([0, 1, 2, 255], size=(n, n), p=[0.3, 0.2, 0.2, 0.3]).astype(np.int64)
    m[(m > 0) & (m != 255)] = rng.integers(1, C + 1, size=int(((m > 0) & (m != 255)).sum()))
    return lir.split_relations(m)


def _grad_cases(fault: str | None) -> list[tuple[str, Callable[[np.random.Generator], tuple]]]:
    def cre_case(rng):
        C, L, D = _small_shapes(rng)
        n = int(math.isqrt(L))
        rel = _random_relations(rng, C, n)
        labels = np.ones(C)
        q, p = rng.normal(size=(C, D)), rng.normal(size=(L, D))
        return max(grad_error(lambda t: lir.cre_loss(t, p, rel.confident, labels, 0.2), q, fault),
                   grad_error(lambda t: lir.cre_loss(q, t, rel.confident, labels, 0.2), p, fault))

    def ure_case(rng):
        C, L, D = _small_shapes(rng)
        n = int(math.isqrt(L))
        sel = rng.random((n, n)) < 0.5
        labels = (rng.random(C) < 0.6).astype(float)
        q, p = rng.normal(size=(C, D)), rng.normal(size=(L, D))
        return max(grad_error(lambda t: lir.ure_loss(t, p, sel, labels), q, fault),
                   grad_error(lambda t: lir.ure_loss(q, t, sel, labels), p, fault))

    def gcr_case(rng):
        C, L, D = _small_shapes(rng)
        k = int(rng.integers(1, L + 1))
        params = gcr.init_params(D, rng)
        ct, pt = rng.normal(size=(C, D)), rng.normal(size=(L, D))
        w = rng.normal(size=(C, D))
        err = max(grad_error(lambda t: (gcr.gcr_forward(t, pt, params, k)[0] * w).sum(), ct, fault),
                  grad_error(lambda t: (gcr.gcr_forward(ct, t, params, k)[0] * w).sum(), pt, fault))
        name = sorted(params)[int(rng.integers(len(params)))]
        base = params[name].data.copy()

        def via_param(t):
            ps = dict(params)
            ps[name] = t
            return (gcr.gcr_forward(ct, pt, ps, k)[0] * w).sum()
        return max(err, grad_error(via_param, base, fault))

    def encoder_case(rng):
        C = int(rng.integers(1, 4))
        cfg = EncoderConfig(image_size=8, patch_size=2, embed_dim=int(rng.choice([4, 8])),
                            depth=int(rng.integers(1, 3)), num_heads=2, num_classes=C)
        params = init_params(cfg, rng)
        for t in params.values():  # larger weights so every path carries signal
            t.data = t.data * 20.0 if t.ndim >= 2 else t.data + rng.normal(0, 0.1, t.shape)
        img = rng.normal(size=(3, 8, 8))
        wc = rng.normal(size=(C, cfg.embed_dim))
        wp = rng.normal(size=(cfg.num_patches, cfg.embed_dim))

        def out(bundle):
            return (bundle.class_tokens * wc).sum() + (bundle.patch_tokens * wp).sum()
        err = grad_error(lambda t: out(encode(t, params, cfg)), img, fault)
        # the key slice of qkv.b has an exactly zero gradient (softmax is shift
        # invariant), where central differences only measure rounding noise
        names = sorted(n for n in params if not n.endswith("qkv.b"))
        name = names[int(rng.integers(len(names)))]

        def via_param(t):
            ps = dict(params)
            ps[name] = t
            return out(encode(img, ps, cfg))
        return max(err, grad_error(via_param, params[name].data.copy(), fault))

    def decoder_case(rng):
        C, L, D = _small_shapes(rng)
        params = init_decoder(D, C, rng)
        p = rng.normal(size=(L, D))
        pseudo = rng.integers(0, C + 1, size=L)
        err = grad_error(lambda t: seg_loss(decode(t, params), pseudo), p, fault)
        return max(err, grad_error(lambda t: seg_loss(decode(p, {**params, "dec.fc1.w": t}), pseudo),
                                   params["dec.fc1.w"].data.copy(), fault))

    def total_case(rng):
        C = int(rng.integers(2, 4))
        cfg = RunConfig(image_size=8, patch_size=2, embed_dim=int(rng.choice([4, 8])), depth=1,
                        num_heads=2, num_classes=C, max_shapes=C, seed=int(rng.integers(1 << 30)),
                        train_size=1, val_size=1)
        params = init_model(cfg)
        for name, t in params.items():  # out of the near-linear init regime
            if name.startswith("enc.") and t.ndim >= 2:
                t.data = t.data * 10.0
        images = rng.normal(size=(2, 3, 8, 8))
        labels = np.ones((2, C))
        labels[1, int(rng.integers(C))] = 0.0

        def loss(t):
            return objective(forward(params, t, cfg), labels, cfg, lir_on=True)[0]["L_total"]
        coords = rng.choice(images.size, size=64, replace=False)
        err = grad_error(loss, images, fault, coords=coords)
        name = "cls.w"

        def via_param(t):
            return objective(forward({**params, name: t}, images, cfg), labels, cfg, lir_on=True)[0]["L_total"]
        return max(err, grad_error(via_param, params[name].data.copy(), fault))

    return [("grad L_cre", cre_case), ("grad L_ure", ure_case), ("grad gcr_forward", gcr_case),
            ("grad encoder", encoder_case), ("grad decoder", decoder_case), ("grad L_total", total_case)]


def _timed(name: str, fn: Callable[[], tuple[bool, str]]) -> CheckResult:
    t = time.perf_counter()
    try:
        ok, detail = fn()
    except Exception as exc:  # a crashing check is a failing check
        ok, detail = False, f"raised {type(exc).__name__}: {exc}"
    return CheckResult(name, ok, detail, time.perf_counter() - t)


def gradient_checks(fault: str | None = None, instances: int = INSTANCES, seed: int = 0) -> list[CheckResult]:
    results = []
    for name, case in _grad_cases(fault):
        def run(case=case, name=name):
            rng = np.random.default_rng([seed, sum(map(ord, name))])
            worst = max(case(rng) for _ in range(instances))
            return worst <= GRAD_TOL, f"max rel err {worst:.2e} over {instances} instances"
        results.append(_timed(name, run))
    return results


# -- oracle checks ---------------------------------------------------------

def check_topk(seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    for n in range(200):
        size = int(rng.integers(1, 60))
        x = rng.integers(-4, 5, size=size).astype(float) if n % 2 else rng.normal(size=size)
        k = int(rng.integers(1, size + 1))
        _, idx = ad.topk(Tensor(x), k)
        if idx.tolist() != naive_topk(x, k):
            return False, f"mismatch on instance {n}"
    return True, "200 instances match stable sort"


def check_kernel_search(seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    for n in range(200):
        rel = _random_relations(rng, 3, 8)
        d = int(rng.choice([1, 3, 5]))
        got = set(lir.kernel_search(rel.confident, rel.uncertain, d, 1.2).coords)
        if got != naive_kernel_search(rel.confident, rel.uncertain, d, 1.2):
            return False, f"set mismatch on pair {n}"
    return True, "200 random 8x8 pairs identical"


def check_gcr_oracle(seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(20):
        C, L, D = _small_shapes(rng)
        k = int(rng.integers(1, L + 1))
        params = gcr.init_params(D, rng)
        ct, pt = rng.normal(size=(C, D)), rng.normal(size=(L, D))
        q, _ = gcr.gcr_forward(ct, pt, params, k)
        ref = naive_gcr(ct, pt, {n: t.data for n, t in params.items()}, k)
        worst = max(worst, float(np.max(np.abs(q.data - ref))))
    return worst <= 1e-12, f"max abs diff {worst:.1e}"


def check_lir_oracles(seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(20):
        B = int(rng.integers(1, 4))
        C, L, D = _small_shapes(rng)
        n = int(math.isqrt(L))
        conf = np.stack([_random_relations(rng, C, n).confident for _ in range(B)])
        sel = rng.random((B, n, n)) < 0.4
        labels = (rng.random((B, C)) < 0.7).astype(float)
        q, p = rng.normal(size=(B, C, D)), rng.normal(size=(B, L, D))
        worst = max(worst,
                    abs(lir.cre_loss(q, p, conf, labels, 0.2).item() - naive_cre(q, p, conf, labels, 0.2)),
                    abs(lir.ure_loss(q, p, sel, labels).item() - naive_ure(q, p, sel, labels)))
    return worst <= 1e-10, f"max abs diff {worst:.1e}"


def check_threshold_partition(seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    for n in range(500):
        C = int(rng.integers(1, 4))
        s = rng.random((int(rng.integers(1, 9)), int(rng.integers(1, 9)), C))
        lo, hi = sorted(rng.uniform(0.01, 0.99, size=2))
        if hi - lo < 1e-6:
            continue
        amap = cam.ActivationMap(s, "CAM")
        m = cam.multi_threshold_filter(amap, lo, hi).labels
        valid = (m == 0) | (m == 255) | ((m >= 1) & (m <= C))
        if not valid.all():
            return False, f"map {n}: value outside {{0, 1..C, 255}}"
        fg = ~np.isin(m, (0, 255))
        hi2 = hi + (1 - hi) * rng.random()
        if hi2 < 1:
            m2 = cam.multi_threshold_filter(amap, lo, hi2).labels
            if (~np.isin(m2, (0, 255)) & ~fg).any():
                return False, f"map {n}: raising the high threshold added foreground"
        lo2 = lo * rng.random()
        if lo2 > 0:
            m3 = cam.multi_threshold_filter(amap, lo2, hi).labels
            if ((m3 == 0) & (m != 0)).any():
                return False, f"map {n}: lowering the low threshold added background"
    return True, "500 random maps partitioned and monotone"


def check_loss_anchors() -> tuple[bool, str]:
    L, C = 16, 3
    q = np.ones((1, C, 4))
    p = np.ones((1, L, 4))
    conf = np.zeros((1, 4, 4), dtype=np.int64)
    conf[0, 0, 0] = 1
    cre = lir.cre_loss(q, p, conf, np.array([[1.0, 0, 0]]), 0.2).item()
    seg = seg_loss(Tensor(np.zeros((5, C + 1))), np.arange(5) % (C + 1)).item()
    cls = cls_loss(Tensor(np.zeros((2, C))), np.array([[1.0, 0, 1], [0, 1, 0]])).item()
    errs = (abs(cre - math.log(L)), abs(seg - math.log(C + 1)), abs(cls - math.log(2)))
    return max(errs) <= 1e-9, "cre=ln L, seg=ln(C+1), cls=ln 2 errors " + ", ".join(f"{e:.1e}" for e in errs)


def check_total_identity(seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    w = LossWeights()
    worst = 0.0
    for _ in range(100):
        parts = rng.exponential(size=5)
        more, total = total_loss(*(Tensor(v) for v in parts), w)
        ref = parts[0] + parts[1] + 0.2 * parts[2] + 0.1 * parts[3]
        worst = max(worst, abs(more.item() - ref), abs(total.item() - ref - 0.12 * parts[4]))
    return worst <= 1e-12, f"max abs diff {worst:.1e}"


def oracle_checks(seed: int = 0) -> list[CheckResult]:
    return [
        _timed("topk vs sort", lambda: check_topk(seed)),
        _timed("kernel_search vs sliding window", lambda: check_kernel_search(seed)),
        _timed("gcr vs naive loops", lambda: check_gcr_oracle(seed)),
        _timed("cre/ure vs naive loops", lambda: check_lir_oracles(seed)),
        _timed("threshold partition and monotonicity", lambda: check_threshold_partition(seed)),
        _timed("closed-form loss anchors", check_loss_anchors),
        _timed("composite loss identity", lambda: check_total_identity(seed)),
    ]


def run_all(fault: str | None = None, seed: int = 0) -> list[CheckResult]:
    return oracle_checks(seed) + gradient_checks(fault, seed=seed)
