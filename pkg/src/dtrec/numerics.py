"""Dense tensors with reverse-mode differentiation, backed by numpy.

Parameters and activations are float32. Any op also accepts float64 inputs and
keeps that dtype, which is how the finite-difference checks get a 64-bit shadow
path through exactly the same code.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels

LOG_FLOOR = 1e-12
MASK_VALUE = -1e9

# Raising on non-finite values after every op is the default; benchmarks may
# switch it off.
CHECK_FINITE = True


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if CHECK_FINITE and not kernels.all_finite(data):
        raise NonFiniteError(f"non-finite values produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = _coerce(b, a)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _coerce(a, b)
    b = _coerce(b, a)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = _coerce(b, a)
    out = a.data * b.data

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "mul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = x.data * mask

    def backward(g):
        return (g * mask,)

    return _make(out, (x,), backward, "relu")


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    out = kernels.gelu_forward(x.data)

    def backward(g):
        return (kernels.gelu_backward(g, x.data),)

    return _make(out, (x,), backward, "gelu")


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _make(out, (x,), backward, "sigmoid")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _make(out, (x,), backward, "tanh")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return _make(out, (x,), backward, "exp")


def log(x: Tensor) -> Tensor:
    """Natural log with the probability floor applied."""
    safe = np.maximum(x.data, LOG_FLOOR)
    out = np.log(safe)

    def backward(g):
        return (g * (x.data > LOG_FLOOR) / safe,)

    return _make(out, (x,), backward, "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)

    def backward(g):
        return (g * 0.5 / np.maximum(out, LOG_FLOOR),)

    return _make(out, (x,), backward, "sqrt")


# --------------------------------------------------------------------------
# shape ops


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return _make(out, (x,), backward, "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    out = np.transpose(x.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inv),)

    return _make(out, (x,), backward, "transpose")


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]
    if not out.flags.owndata:
        out = out.copy()

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(out, (x,), backward, "getitem")


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tensors, backward, "concatenate")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(out, tensors, backward, "stack")


# --------------------------------------------------------------------------
# reductions


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), backward, "sum")


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(reduce_sum(x, axis, keepdims), 1.0 / float(count))


# --------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = as_tensor(a)
    b = _coerce(b, a)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = gb = None
        if b.ndim == 2 and a.ndim >= 2:
            if a.requires_grad:
                ga = g @ b.data.T
            if b.requires_grad:
                a2 = a.data.reshape(-1, a.shape[-1])
                gb = a2.T @ g.reshape(-1, g.shape[-1])
            return ga, gb
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError("embedding id out of range")
    out = table.data[ids]

    def backward(g):
        return (kernels.scatter_add_rows(table.shape[0], ids, g),)

    return _make(out, (table,), backward, "embedding")


# --------------------------------------------------------------------------
# distributions


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), backward, "log_softmax")


def cross_entropy(log_probs: Tensor, target, reduction: str = "sum") -> Tensor:
    """Negative log-likelihood of integer targets under ``log_probs[..., n]``."""
    target = np.asarray(target, dtype=np.int64)
    n = log_probs.shape[-1]
    if target.shape != log_probs.shape[:-1]:
        raise ShapeError(f"targets {target.shape} do not match {log_probs.shape[:-1]}")
    if target.size and (target.min() < 0 or target.max() >= n):
        raise IndexError("target index out of range")
    picked = np.take_along_axis(log_probs.data, target[..., None], axis=-1)[..., 0]
    losses = -picked
    if reduction == "none":
        out = losses
    elif reduction == "sum":
        out = np.asarray(losses.sum())
    elif reduction == "mean":
        out = np.asarray(losses.mean())
    else:
        raise ValueError(f"unknown reduction {reduction!r}")

    def backward(g):
        if reduction == "none":
            scale = g
        elif reduction == "sum":
            scale = np.broadcast_to(g, target.shape)
        else:
            scale = np.broadcast_to(g / max(target.size, 1), target.shape)
        full = np.zeros_like(log_probs.data)
        np.put_along_axis(full, target[..., None], -scale[..., None], axis=-1)
        return (full,)

    return _make(out.astype(log_probs.dtype), (log_probs,), backward, "cross_entropy")


def soft_cross_entropy(target_dist, log_probs: Tensor, reduction: str = "sum", atol: float = 1e-6) -> Tensor:
    """-sum(target * log_probs) over the last axis; ``target_dist`` is a constant."""
    if isinstance(target_dist, Tensor):
        target_dist = target_dist.data
    target_dist = np.asarray(target_dist, dtype=log_probs.dtype)
    if target_dist.shape != log_probs.shape:
        raise ShapeError(f"target {target_dist.shape} does not match {log_probs.shape}")
    sums = target_dist.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > max(atol, 8 * np.finfo(target_dist.dtype).eps * target_dist.shape[-1])):
        raise ValueError("soft target is not a normalized distribution")
    losses = -(target_dist * log_probs.data).sum(axis=-1)
    if reduction == "none":
        out = losses
    elif reduction == "sum":
        out = np.asarray(losses.sum())
    elif reduction == "mean":
        out = np.asarray(losses.mean())
    else:
        raise ValueError(f"unknown reduction {reduction!r}")

    def backward(g):
        if reduction == "none":
            scale = g[..., None]
        elif reduction == "sum":
            scale = g
        else:
            scale = g / max(losses.size, 1)
        return (-target_dist * scale,)

    return _make(out, (log_probs,), backward, "soft_cross_entropy")


def entropy(p: Tensor, axis: int = -1) -> Tensor:
    p = as_tensor(p)
    safe = np.maximum(p.data, LOG_FLOOR)
    logp = np.log(safe)
    out = np.asarray(-(p.data * logp).sum(axis=axis))

    def backward(g):
        g = np.expand_dims(g, axis)
        return (-(logp + (p.data > LOG_FLOOR)) * g,)

    return _make(out, (p,), backward, "entropy")


def kl_divergence(p: Tensor, q: Tensor, axis: int = -1) -> Tensor:
    """KL(p || q) with q floored at LOG_FLOOR; 0 * log 0 is taken as 0."""
    p = as_tensor(p)
    q = _coerce(q, p)
    q_safe = np.maximum(q.data, LOG_FLOOR)
    p_safe = np.maximum(p.data, LOG_FLOOR)
    terms = np.where(p.data > 0, p.data * (np.log(p_safe) - np.log(q_safe)), 0.0)
    out = np.asarray(terms.sum(axis=axis)).astype(p.dtype)

    def backward(g):
        g = np.expand_dims(g, axis)
        gp = gq = None
        if p.requires_grad:
            gp = np.where(p.data > 0, np.log(p_safe) - np.log(q_safe) + 1.0, 0.0) * g
        if q.requires_grad:
            gq = -(p.data / q_safe) * (q.data > LOG_FLOOR) * g
        return gp, gq

    return _make(out, (p, q), backward, "kl_divergence")


def l2_norm(x: Tensor, axis=None) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(np.sqrt((x.data * x.data).sum(axis=axis)))

    def backward(g):
        denom = np.maximum(out, LOG_FLOOR)
        if axis is not None:
            return (x.data * np.expand_dims(g / denom, axis),)
        return (x.data * (g / denom),)

    return _make(out, (x,), backward, "l2_norm")


# --------------------------------------------------------------------------
# layers


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    out, xhat, inv = kernels.layer_norm_forward(x.data, gamma.data, beta.data, eps)

    def backward(g):
        gx, ggamma, gbeta = kernels.layer_norm_backward(g, xhat, inv, gamma.data)
        return (gx if x.requires_grad else None,
                ggamma if gamma.requires_grad else None,
                gbeta if beta.requires_grad else None)

    return _make(out, (x, gamma, beta), backward, "layer_norm")


def causal_masked_attention(q: Tensor, k: Tensor, v: Tensor, allowed: np.ndarray) -> Tensor:
    """Scaled dot-product attention over the last two axes.

    ``allowed`` broadcasts to (..., Lq, Lk); False entries get zero weight.
    Every query row must have at least one allowed key.
    """
    allowed = np.asarray(allowed, dtype=bool)
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = np.matmul(q.data, np.swapaxes(k.data, -1, -2)) * scale
    scores = np.where(allowed, scores, MASK_VALUE)
    scores = scores - scores.max(axis=-1, keepdims=True)
    w = np.exp(scores) * allowed
    w /= w.sum(axis=-1, keepdims=True)
    w = w.astype(q.dtype, copy=False)
    out = np.matmul(w, v.data)

    def backward(g):
        gw = np.matmul(g, np.swapaxes(v.data, -1, -2))
        gs = w * (gw - (gw * w).sum(axis=-1, keepdims=True)) * scale
        gq = _unbroadcast(np.matmul(gs, k.data), q.shape) if q.requires_grad else None
        gk = _unbroadcast(np.matmul(np.swapaxes(gs, -1, -2), q.data), k.shape) if k.requires_grad else None
        gv = _unbroadcast(np.matmul(np.swapaxes(w, -1, -2), g), v.shape) if v.requires_grad else None
        return gq, gk, gv

    return _make(out, (q, k, v), backward, "attention")


def attention_weights(q: np.ndarray, k: np.ndarray, allowed: np.ndarray) -> np.ndarray:
    """Forward-only attention weights, for inspection and tests."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = np.where(allowed, np.matmul(q, np.swapaxes(k, -1, -2)) * scale, MASK_VALUE)
    scores = scores - scores.max(axis=-1, keepdims=True)
    w = np.exp(scores) * allowed
    return w / w.sum(axis=-1, keepdims=True)


def dropout_mask(shape, rate: float, key: Sequence[int], dtype=np.float32) -> np.ndarray:
    """Inverted-dropout keep mask drawn from a counter-derived seed."""
    rng = np.random.default_rng(np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in key]))
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) / (1.0 - rate)


def dropout(x: Tensor, rate: float, key: Sequence[int] | None, training: bool = True) -> Tensor:
    if not training or rate <= 0.0 or key is None:
        return x
    mask = dropout_mask(x.shape, rate, key, x.dtype)

    def backward(g):
        return (g * mask,)

    return _make(x.data * mask, (x,), backward, "dropout")


# --------------------------------------------------------------------------
# optimisation


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, dtype=np.float32):
        super().__init__(np.array(data, dtype=dtype), requires_grad=True)
        self.op = "parameter"


def global_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.dot(p.grad.ravel().astype(np.float64), p.grad.ravel().astype(np.float64)))
    return math.sqrt(total)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    norm = global_grad_norm(params)
    if norm > max_norm:
        scale = np.float32(max_norm / (norm + 1e-6))
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


class Adam:
    """Adam with bias correction; moments are keyed by parameter name."""

    def __init__(self, params: dict[str, Parameter], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.data.dtype, copy=False)


def adam_update(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, step: int,
                lr: float = 1e-3, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
    """Functional single Adam update; returns new (param, m, v)."""
    b1, b2 = betas
    m = b1 * m + (1 - b1) * grad
    v = b2 * v + (1 - b2) * grad * grad
    mhat = m / (1 - b1**step)
    vhat = v / (1 - b2**step)
    return param - lr * mhat / (np.sqrt(vhat) + eps), m, v
