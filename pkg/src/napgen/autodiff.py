"""Reverse-mode autodiff on dense float64 arrays.

A Tensor wraps a numpy array and remembers how it was produced; backward()
walks the tape in reverse topological order. Everything the models need lives
here: the fused layers (gelu, softmax, layer norm), the soft-mask blend, the
two-layer feed-forward block, Adam, checkpoints, and a central-difference
gradient probe used by the tests.
"""

from __future__ import annotations

import json
import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np
from scipy.special import erf

_SQRT2 = math.sqrt(2.0)
_SQRT2PI = math.sqrt(2.0 * math.pi)

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording, e.g. for decoding and benchmarks."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._backward: Callable[[np.ndarray], None] | None = None
        self._parents: tuple[Tensor, ...] = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError("backward() expects a scalar loss")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, scalar):
        return mul(self, 1.0 / float(scalar))

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    if not _grad_enabled or not any(p.requires_grad for p in parents):
        return Tensor(data)
    out = Tensor(data, requires_grad=True)
    out._parents = parents
    out._backward = backward
    return out


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data + b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _node(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data - b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _node(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(data, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            _accumulate(a, _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _accumulate(b, _unbroadcast(gb, b.data.shape))

    return _node(data, (a, b), backward)


def reshape(t: Tensor, shape) -> Tensor:
    t = _wrap(t)
    data = t.data.reshape(shape)

    def backward(g):
        _accumulate(t, g.reshape(t.data.shape))

    return _node(data, (t,), backward)


def swapaxes(t: Tensor, a: int, b: int) -> Tensor:
    t = _wrap(t)
    data = np.swapaxes(t.data, a, b)

    def backward(g):
        _accumulate(t, np.swapaxes(g, a, b))

    return _node(data, (t,), backward)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def backward(g):
        offset = 0
        for t, size in zip(tensors, sizes):
            index = [slice(None)] * g.ndim
            index[axis] = slice(offset, offset + size)
            _accumulate(t, g[tuple(index)])
            offset += size

    return _node(data, tuple(tensors), backward)


def stack(tensors: list[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        for i, t in enumerate(tensors):
            _accumulate(t, np.take(g, i, axis=axis))

    return _node(data, tuple(tensors), backward)


def narrow(t: Tensor, axis: int, start: int, length: int) -> Tensor:
    t = _wrap(t)
    index = [slice(None)] * t.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    data = t.data[index]

    def backward(g):
        full = np.zeros_like(t.data)
        full[index] = g
        _accumulate(t, full)

    return _node(data, (t,), backward)


def gather_rows(t: Tensor, indices: np.ndarray, axis: int = 0) -> Tensor:
    """Select rows along an axis with an integer index array."""
    t = _wrap(t)
    indices = np.asarray(indices, dtype=np.int64)
    data = np.take(t.data, indices, axis=axis)

    def backward(g):
        full = np.zeros_like(t.data)
        np.add.at(full, (slice(None),) * axis + (indices,), g)
        _accumulate(t, full)

    return _node(data, (t,), backward)


def gather_per_row(t: Tensor, indices: np.ndarray) -> Tensor:
    """Row-wise gather: t is (N, T, ...), indices (N, m); result (N, m, ...)."""
    t = _wrap(t)
    indices = np.asarray(indices, dtype=np.int64)
    rows = np.arange(t.data.shape[0])[:, None]
    data = t.data[rows, indices]

    def backward(g):
        full = np.zeros_like(t.data)
        np.add.at(full, (rows, indices), g)
        _accumulate(t, full)

    return _node(data, (t,), backward)


def tsum(t: Tensor, axis=None, keepdims=False) -> Tensor:
    t = _wrap(t)
    data = t.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accumulate(t, np.broadcast_to(g, t.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(t, np.broadcast_to(g, t.data.shape).copy())

    return _node(data, (t,), backward)


def tmean(t: Tensor, axis=None, keepdims=False) -> Tensor:
    t = _wrap(t)
    count = t.data.size if axis is None else t.data.shape[axis]
    return tsum(t, axis=axis, keepdims=keepdims) * (1.0 / count)


def gelu(t: Tensor) -> Tensor:
    """Exact Gaussian-CDF form x * Phi(x), not the tanh approximation."""
    t = _wrap(t)
    x = t.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    data = x * cdf

    def backward(g):
        pdf = np.exp(-0.5 * x * x) / _SQRT2PI
        _accumulate(t, g * (cdf + x * pdf))

    return _node(data, (t,), backward)


def sigmoid(t: Tensor) -> Tensor:
    t = _wrap(t)
    data = 1.0 / (1.0 + np.exp(-t.data))

    def backward(g):
        _accumulate(t, g * data * (1.0 - data))

    return _node(data, (t,), backward)


def tanh(t: Tensor) -> Tensor:
    t = _wrap(t)
    data = np.tanh(t.data)

    def backward(g):
        _accumulate(t, g * (1.0 - data * data))

    return _node(data, (t,), backward)


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max subtraction)."""
    t = _wrap(t)
    shifted = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        _accumulate(t, data * (g - inner))

    return _node(data, (t,), backward)


def log_softmax(t: Tensor, axis: int = -1) -> Tensor:
    t = _wrap(t)
    shifted = t.data - t.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse

    def backward(g):
        probs = np.exp(data)
        _accumulate(t, g - probs * g.sum(axis=axis, keepdims=True))

    return _node(data, (t,), backward)


def nll_loss(log_probs: Tensor, targets, reduction: str = "mean") -> Tensor:
    """Negative log likelihood of integer targets under log probabilities.

    log_probs is (C,) with a scalar target, or (N, C) with an (N,) target
    vector. Mean reduction averages over the batch; sum adds the terms.
    """
    log_probs = _wrap(log_probs)
    lp = log_probs.data
    if lp.ndim == 1:
        targets = np.asarray([int(targets)], dtype=np.int64)
        lp2 = lp[None, :]
    else:
        targets = np.asarray(targets, dtype=np.int64)
        lp2 = lp
    n = lp2.shape[0]
    picked = lp2[np.arange(n), targets]
    scale = 1.0 / n if reduction == "mean" else 1.0
    data = np.asarray(-picked.sum() * scale)

    def backward(g):
        full = np.zeros_like(lp2)
        full[np.arange(n), targets] = -float(g) * scale
        _accumulate(log_probs, full.reshape(lp.shape))

    return _node(data, (log_probs,), backward)


def layer_norm(t: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    t, gamma, beta = _wrap(t), _wrap(gamma), _wrap(beta)
    x = t.data
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    data = xhat * gamma.data + beta.data

    def backward(g):
        if gamma.requires_grad:
            _accumulate(gamma, _unbroadcast(g * xhat, gamma.data.shape))
        if beta.requires_grad:
            _accumulate(beta, _unbroadcast(g, beta.data.shape))
        if t.requires_grad:
            gx = g * gamma.data
            term = gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
            _accumulate(t, term * inv)

    return _node(data, (t, gamma, beta), backward)


def embed_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    table = _wrap(table)
    ids = np.asarray(ids, dtype=np.int64)
    data = table.data[ids]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        _accumulate(table, full)

    return _node(data, (table,), backward)


def soft_mask(h: Tensor, p: Tensor, mask_vec: Tensor | np.ndarray) -> Tensor:
    """Blend token states toward a mask embedding: h * p + mask_vec * (1 - p).

    p broadcasts against h, e.g. (T, 1) against (T, d). With p = 1 the result
    is exactly h; with p = 0 it is exactly the mask embedding.
    """
    return add(mul(h, p), mul(_wrap(mask_vec), sub(1.0, p)))


def mean_pool(tensors: list[Tensor]) -> Tensor:
    """Mean of equally shaped tensors; a single input comes back unchanged."""
    if not tensors:
        raise ValueError("mean_pool needs at least one tensor")
    if len(tensors) == 1:
        return _wrap(tensors[0])
    return tmean(stack(tensors, axis=0), axis=0)


@dataclass
class FfnParams:
    """Two-layer feed-forward block: gelu(x @ w1 + b1) @ w2 + b2.

    Weights may carry a leading stack dimension, in which case the forward is
    a batched matmul with one independent parameter slice per stack entry.
    """

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @staticmethod
    def create(rng: np.random.Generator, in_dim: int, hidden_dim: int, out_dim: int,
               stack: int | None = None) -> "FfnParams":
        def normal(fan_in, fan_out, shape):
            scale = math.sqrt(2.0 / (fan_in + fan_out))
            return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)

        if stack is None:
            return FfnParams(
                w1=normal(in_dim, hidden_dim, (in_dim, hidden_dim)),
                b1=Tensor(np.zeros(hidden_dim), requires_grad=True),
                w2=normal(hidden_dim, out_dim, (hidden_dim, out_dim)),
                b2=Tensor(np.zeros(out_dim), requires_grad=True),
            )
        return FfnParams(
            w1=normal(in_dim, hidden_dim, (stack, in_dim, hidden_dim)),
            b1=Tensor(np.zeros((stack, 1, hidden_dim)), requires_grad=True),
            w2=normal(hidden_dim, out_dim, (stack, hidden_dim, out_dim)),
            b2=Tensor(np.zeros((stack, 1, out_dim)), requires_grad=True),
        )

    def tensors(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


def ffn_forward(x: Tensor, params: FfnParams) -> Tensor:
    return matmul(gelu(matmul(x, params.w1) + params.b1), params.w2) + params.b2


class Adam:
    """Adam with bias correction and decoupled weight decay (AdamW-style).

    Decay is applied directly to the weights, scaled by lr, and skips nothing:
    callers who want decay-free parameters should pass them to a second
    instance with weight_decay=0.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self._v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


class CheckpointError(Exception):
    pass


CHECKPOINT_FORMAT = "napgen-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, kind: str, params: dict[str, Tensor], meta: dict) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "meta": meta,
        "params": {
            name: {"shape": list(p.data.shape), "values": p.data.ravel().tolist()}
            for name, p in params.items()
        },
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path) -> tuple[str, dict[str, np.ndarray], dict]:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as err:
        raise CheckpointError(f"cannot read checkpoint {path}: {err}") from None
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a recognized checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('version')!r}")
    params = {}
    for name, entry in doc["params"].items():
        params[name] = np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
    return doc["kind"], params, doc.get("meta", {})


def finite_difference_gradient(f: Callable[[], Tensor], param: Tensor,
                               indices: Iterable[int] | None = None,
                               h: float = 1e-5) -> tuple[np.ndarray, np.ndarray]:
    """Central-difference gradient of a scalar-valued closure at the given flat indices.

    Returns (indices, gradient estimates). The closure must rebuild its forward
    pass from the live parameter data on every call.
    """
    flat = param.data.ravel()
    if indices is None:
        index_list = np.arange(flat.size)
    else:
        index_list = np.asarray(list(indices), dtype=np.int64)
    grads = np.zeros(index_list.size)
    for k, i in enumerate(index_list):
        original = flat[i]
        flat[i] = original + h
        upper = float(f().data)
        flat[i] = original - h
        lower = float(f().data)
        flat[i] = original
        grads[k] = (upper - lower) / (2.0 * h)
    return index_list, grads
