"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op is a plain function of numpy arrays plus a closure mapping the
output gradient to one gradient per parent. Ops are only recorded when a
:class:`Tape` is active and at least one input requires a gradient, so the
same functions double as the no-grad inference path.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

LEAKY_SLOPE = 0.01
COS_EPS = 1e-12


class DimensionError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_local = threading.local()


def current_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape = None

    # -- introspection ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # -- operators -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self) -> "Tensor":
        return swapaxes(self, -1, -2)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def _not_scalar(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    op: str
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Records ops in execution order; one tape per training step.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = (x * x).sum()
    >>> tape.backward(y)[x]
    array([2., 4.])
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.leaves: dict[int, Tensor] = {}
        self._done = False

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def record(self, out: Tensor, op: str, parents: tuple[Tensor, ...], backward) -> None:
        for p in parents:
            if p.requires_grad and p._tape is not self and id(p) not in self.leaves:
                self.leaves[id(p)] = p
        out._tape = self
        self.nodes.append(_Node(op, out, parents, backward))

    def first_nonfinite(self) -> str | None:
        """Describe the earliest recorded node whose output holds NaN/Inf."""
        for leaf in self.leaves.values():
            if not np.all(np.isfinite(leaf.data)):
                return f"leaf {leaf.name or '<unnamed>'} shape={leaf.shape}"
        for k, node in enumerate(self.nodes):
            if not np.all(np.isfinite(node.out.data)):
                label = f" ({node.out.name})" if node.out.name else ""
                return f"node #{k} op={node.op}{label} shape={node.out.shape}"
        return None

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        if self._done:
            raise RuntimeError("backward already ran on this tape; double-backward is unsupported")
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ValueError("loss was not recorded on this tape")
        self._done = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for p, gp in zip(node.parents, node.backward(g)):
                if gp is None or not p.requires_grad:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = gp if prev is None else prev + gp
        out = {}
        for key, leaf in self.leaves.items():
            g = grads.get(key)
            leaf.grad = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=np.float64).reshape(leaf.shape)
            out[leaf] = leaf.grad
        return out


def _make(data: np.ndarray, parents: tuple[Tensor, ...], op: str, backward) -> Tensor:
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, op, parents, backward)
    return out


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic ----------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b), "add",
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b), "sub",
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b), "mul",
                 lambda g: (unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                            unbroadcast(g * a.data, b.shape) if b.requires_grad else None))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b), "div",
                 lambda g: (unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                            unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * c, (a,), "scale", lambda g: (g * c,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data ** p, (a,), "pow", lambda g: (g * p * a.data ** (p - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), "exp", lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise FloatingPointError("log of non-positive value")
    return _make(np.log(a.data), (a,), "log", lambda g: (g / a.data,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), "tanh", lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _make(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus(a) -> Tensor:
    """log(1 + exp(x)), stable for large |x|."""
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))
    return _make(out, (a,), "softplus", lambda g: (g * _sigmoid(a.data),))


def leaky_relu(a, slope: float = LEAKY_SLOPE) -> Tensor:
    a = as_tensor(a)
    d = np.where(a.data > 0, 1.0, slope)
    return _make(a.data * d, (a,), "leaky_relu", lambda g: (g * d,))


def relu(a) -> Tensor:
    return leaky_relu(a, 0.0)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """Tanh-approximated GELU."""
    a = as_tensor(a)
    x = a.data
    u = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _make(out, (a,), "gelu", bw)


def elementwise(kind: str, *inputs, **kw) -> Tensor:
    """Dispatch by name; mirrors the op table used in config-driven checks."""
    table = {"tanh": tanh, "leaky_relu": leaky_relu, "mul": mul, "add": add, "sub": sub,
             "exp": exp, "log": log, "scale": scale}
    if kind not in table:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return table[kind](*inputs, **kw)


# -- reductions and shape ops --------------------------------------------

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), "sum", bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(tsum(a, axis, keepdims), 1.0 / float(n))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), "transpose", lambda g: (np.transpose(g, inv),))


def swapaxes(a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    return _make(np.swapaxes(a.data, i, j), (a,), "swapaxes", lambda g: (np.swapaxes(g, i, j),))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(np.broadcast_to(a.data, shape).copy(), (a,), "broadcast_to",
                 lambda g: (unbroadcast(g, a.shape),))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        z = np.zeros_like(a.data)
        np.add.at(z, idx, g)
        return (z,)

    return _make(a.data[idx], (a,), "getitem", bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, "concat",
                 lambda g: tuple(np.split(g, sizes, axis=axis)))


def gather_rows(a, index: np.ndarray) -> Tensor:
    """Pick rows of ``a`` (shape ``[B, L, D]``) by ``index`` (``[B, ...]``).

    Output shape is ``index.shape + (D,)``; indices are constants.
    """
    a = as_tensor(a)
    index = np.asarray(index)
    b = np.arange(a.shape[0]).reshape((-1,) + (1,) * (index.ndim - 1))

    def bw(g):
        z = np.zeros_like(a.data)
        np.add.at(z, (b, index), g)
        return (z,)

    return _make(a.data[b, index], (a,), "gather_rows", bw)


def take_along_axis(a, index: np.ndarray, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    index = np.asarray(index)

    def bw(g):
        z = np.zeros_like(a.data)
        ax = axis % a.ndim
        grids = list(np.indices(index.shape, sparse=True))
        grids[ax] = index
        np.add.at(z, tuple(grids), g)
        return (z,)

    return _make(np.take_along_axis(a.data, index, axis), (a,), "take_along_axis", bw)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ka, kb = a.shape[-1], b.shape[-2] if b.ndim > 1 else b.shape[0]
    if ka != kb:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if a.ndim == 1 and b.ndim == 1:
        return tsum(mul(a, b))
    if a.ndim == 1:
        out = matmul(reshape(a, (1, ka)), b)
        return reshape(out, out.shape[:-2] + out.shape[-1:])
    if b.ndim == 1:
        return reshape(matmul(a, reshape(b, (kb, 1))), a.shape[:-1])

    def bw(g):
        ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(np.matmul(a.data, b.data), (a, b), "matmul", bw)


# -- normalized ops --------------------------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(out, (a,), "softmax",
                 lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    return _make(out, (a,), "log_softmax",
                 lambda g: (g - np.exp(out) * g.sum(axis=axis, keepdims=True),))


def layer_norm(a, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis (no affine part)."""
    a = as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    n = a.shape[-1]

    def bw(g):
        return (inv / n * (n * g - g.sum(-1, keepdims=True)
                           - xhat * (g * xhat).sum(-1, keepdims=True)),)

    return _make(xhat, (a,), "layer_norm", bw)


def norm(a, axis: int = -1, keepdims: bool = True) -> Tensor:
    """Euclidean norm; gradient at the zero vector is taken as zero."""
    a = as_tensor(a)
    n = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    safe = np.where(n > 0, n, 1.0)

    def bw(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        return (gk * np.where(n > 0, a.data / safe, 0.0),)

    return _make(n if keepdims else np.squeeze(n, axis), (a,), "norm", bw)


def normalize(a, axis: int = -1, eps: float = COS_EPS) -> Tensor:
    """Rows scaled to unit length: ``a / (||a|| + eps)``."""
    a = as_tensor(a)
    return div(a, add(norm(a, axis), eps))


def cosine_similarity(a, b, eps: float = COS_EPS) -> Tensor:
    """``a.b / (|a| |b| + eps)`` along the last axis; zero vectors give 0."""
    a, b = as_tensor(a), as_tensor(b)
    dot = tsum(mul(a, b), axis=-1)
    den = add(mul(norm(a, keepdims=False), norm(b, keepdims=False)), eps)
    return div(dot, den)


def cosine_matrix(a, b, eps: float = COS_EPS) -> Tensor:
    """Pairwise cosine between rows: ``[..., M, D] x [..., N, D] -> [..., M, N]``."""
    a, b = as_tensor(a), as_tensor(b)
    dots = matmul(a, swapaxes(b, -1, -2))
    den = add(matmul(norm(a), swapaxes(norm(b), -1, -2)), eps)
    return div(dots, den)


def topk(x, k: int, axis: int = -1) -> tuple[Tensor, np.ndarray]:
    """Largest ``k`` entries in descending order; ties go to the lowest index.

    Indices are returned as a plain integer array and carry no gradient.
    """
    x = as_tensor(x)
    n = x.shape[axis]
    if not 1 <= k <= n:
        raise ValueError(f"topk needs 1 <= k <= {n}, got k={k}")
    order = np.argsort(-x.data, axis=axis, kind="stable")
    idx = np.take(order, np.arange(k), axis=axis)
    return take_along_axis(x, idx, axis), idx


def where_const(mask: np.ndarray, a, fill: float = 0.0) -> Tensor:
    """Keep ``a`` where ``mask`` is true, constant ``fill`` elsewhere."""
    a = as_tensor(a)
    m = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    return _make(np.where(m, a.data, fill), (a,), "where", lambda g: (np.where(m, g, 0.0),))


# -- gradient checking ---------------------------------------------------

def numeric_grad(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat, gflat = x.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return out


def grad_of(f: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    leaf = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    with Tape() as tape:
        y = f(leaf)
    return tape.backward(y)[leaf]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a, n = np.asarray(analytic), np.asarray(numeric)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / (np.abs(a) + np.abs(n) + 1e-8)))


def finite_diff_check(f: Callable[[Tensor], Tensor], x: np.ndarray, step: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences."""
    analytic = grad_of(f, x)
    numeric = numeric_grad(lambda v: f(Tensor(v)).item(), x, step)
    return relative_error(analytic, numeric)
