"""A small reverse-mode differentiation core, MLP blocks and Adam.

Only what the neural process needs is here: dense layers on ``(..., n, d)``
arrays, elementwise activations, set aggregation and the two Gaussian
density terms of the ELBO. Everything is float64.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


class Tensor:
    """Array value with an optional gradient and the rule that produced it."""

    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "name", "seq")
    _counter = itertools.count()

    def __init__(self, value, parents: Sequence["Tensor"] = (), backward_fn: Optional[Callable] = None,
                 requires_grad: bool = False, name: str = ""):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.name = name
        self.seq = next(Tensor._counter)

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.value.size != 1:
            raise ValueError("backward() needs a scalar output")
        order = _topological(self)
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node.backward_fn is None or node.grad is None:
                continue
            grads = node.backward_fn(node.grad)
            for parent, g in zip(node.parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g
            if node is not self and node.backward_fn is not None:
                node.grad = None

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, other: matmul(self, other)

    def sum(self) -> "Tensor":
        return total(self)


def parameter(value, name: str = "") -> Tensor:
    return Tensor(value, requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _topological(root: Tensor) -> list[Tensor]:
    # creation order is a valid topological order of any graph built from it
    nodes = [root]
    seen = {id(root)}
    stack = [root]
    while stack:
        node = stack.pop()
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                seen.add(id(p))
                nodes.append(p)
                stack.append(p)
    nodes.sort(key=lambda t: t.seq)
    return nodes


def _node(value, parents, backward_fn) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(value, parents, backward_fn, requires_grad=True)
    return Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: np.ndarray, b: np.ndarray):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}") from None


# --------------------------------------------------------------------- primitives

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.value, b.value)
    sa, sb = a.shape, b.shape
    return _node(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.value, b.value)
    sa, sb = a.shape, b.shape
    return _node(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.value, b.value)
    av, bv = a.value, b.value
    return _node(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.value, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _node(a.value * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    """``a @ b`` for ``a`` of shape (..., n, k) and ``b`` of shape (k, m)."""
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    if bv.ndim != 2 or av.shape[-1] != bv.shape[0]:
        raise ValueError(f"shape mismatch: {av.shape} @ {bv.shape}")

    def backward(g):
        ga = g @ bv.T
        gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _node(av @ bv, (a, b), backward)


def linear(x, w: Tensor, b: Tensor) -> Tensor:
    """Fused ``x @ w + b``."""
    x = as_tensor(x)
    xv, wv = x.value, w.value
    if xv.shape[-1] != wv.shape[0]:
        raise ValueError(f"shape mismatch: {xv.shape} @ {wv.shape}")
    lead = xv.shape[:-1]
    x2 = xv.reshape(-1, xv.shape[-1])
    out = np.dot(x2, wv)
    out += b.value
    out_shape = lead + (wv.shape[1],)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = np.dot(g2, wv.T).reshape(xv.shape) if x.requires_grad else None
        gb = np.dot(np.ones(len(g2)), g2)
        return gx, np.dot(x2.T, g2), gb

    return _node(out.reshape(out_shape), (x, w, b), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0
    return _node(a.value * mask, (a,), lambda g: (g * mask,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.value)
    return _node(t, (a,), lambda g: (g * (1.0 - t * t),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.value
    out = np.logaddexp(0.0, x)
    return _node(out, (a,), lambda g: (g / (1.0 + np.exp(-x)),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    e = np.exp(a.value)
    return _node(e, (a,), lambda g: (g * e,))


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.value
    return _node(np.log(x), (a,), lambda g: (g / x,))


def total(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _node(np.sum(a.value), (a,), lambda g: (np.broadcast_to(g, shape),))


def mean_over_set(a, axis: int = -2) -> Tensor:
    """Average the set elements along ``axis`` (the aggregation step)."""
    a = as_tensor(a)
    shape = a.shape
    k = shape[axis]

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / k, shape),)

    return _node(a.value.mean(axis=axis), (a,), backward)


def expand(a, n: int, axis: int = -2) -> Tensor:
    """Insert a new axis of length ``n`` by repetition; inverse of a sum."""
    a = as_tensor(a)
    v = np.expand_dims(a.value, axis)
    shape = list(v.shape)
    shape[axis] = n
    return _node(np.broadcast_to(v, shape), (a,), lambda g: (g.sum(axis=axis),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    values = [t.value for t in tensors]
    try:
        out = np.concatenate(values, axis=axis)
    except ValueError as exc:
        raise ValueError(f"shape mismatch in concat: {exc}") from None
    bounds = np.cumsum([v.shape[axis] for v in values])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(out, tensors, backward)


def split(a, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    a = as_tensor(a)
    if sum(sizes) != a.shape[axis]:
        raise ValueError("split sizes do not cover the axis")
    out = []
    start = 0
    shape = a.shape
    for size in sizes:
        sl = [slice(None)] * a.value.ndim
        sl[axis] = slice(start, start + size)
        sl = tuple(sl)

        def backward(g, sl=sl):
            full = np.zeros(shape)
            full[sl] = g
            return (full,)

        out.append(_node(a.value[sl], (a,), backward))
        start += size
    return out


def gaussian_log_pdf(x, mu, sigma) -> Tensor:
    """Elementwise log N(x | mu, sigma^2)."""
    x, mu, sigma = as_tensor(x), as_tensor(mu), as_tensor(sigma)
    xv, mv, sv = np.broadcast_arrays(x.value, mu.value, sigma.value)
    d = (xv - mv) / sv
    out = -0.5 * LOG_2PI - np.log(sv) - 0.5 * d * d

    def backward(g):
        gm = g * d / sv
        gs = g * (d * d - 1.0) / sv
        return (_unbroadcast(-gm, x.shape), _unbroadcast(gm, mu.shape),
                _unbroadcast(gs, sigma.shape))

    return _node(out, (x, mu, sigma), backward)


def kl_diag_gaussian(mu_q, sigma_q, mu_p, sigma_p) -> Tensor:
    """Elementwise KL(N(mu_q, sigma_q^2) || N(mu_p, sigma_p^2))."""
    tensors = [as_tensor(t) for t in (mu_q, sigma_q, mu_p, sigma_p)]
    mq, sq, mp, sp_ = (t.value for t in tensors)
    diff = mq - mp
    vp = sp_ * sp_
    out = np.log(sp_ / sq) + (sq * sq + diff * diff) / (2.0 * vp) - 0.5

    def backward(g):
        gmq = g * diff / vp
        gsq = g * (-1.0 / sq + sq / vp)
        gsp = g * (1.0 / sp_ - (sq * sq + diff * diff) / (vp * sp_))
        return gmq, gsq, -gmq, gsp

    return _node(out, tensors, backward)


# --------------------------------------------------------------------- layers

ACTIVATIONS = {"relu": relu, "tanh": tanh}


class MLP:
    """Dense network; the activation follows every layer but the last."""

    def __init__(self, widths: Sequence[int], rng: np.random.Generator,
                 activation: str = "relu", name: str = "mlp"):
        if len(widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.widths = list(widths)
        self.activation = activation
        self.name = name
        self.layers: list[tuple[Tensor, Tensor]] = []
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            bound = math.sqrt(6.0 / fan_in)
            w = parameter(rng.uniform(-bound, bound, size=(fan_in, fan_out)), f"{name}.{i}.W")
            b = parameter(np.zeros(fan_out), f"{name}.{i}.b")
            self.layers.append((w, b))

    def __call__(self, x) -> Tensor:
        act = ACTIVATIONS[self.activation]
        h = as_tensor(x)
        last = len(self.layers) - 1
        for i, (w, b) in enumerate(self.layers):
            h = linear(h, w, b)
            if i < last:
                h = act(h)
        return h

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer]


# --------------------------------------------------------------------- optimizer

@dataclass
class OptimizerState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
              state: OptimizerState) -> tuple[Sequence[np.ndarray], OptimizerState]:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError("parameter and gradient shapes differ")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


class ParameterSet:
    """Packs parameter tensors into one flat buffer so updates are vectorised."""

    def __init__(self, tensors: Sequence[Tensor]):
        self.tensors = list(tensors)
        self.flat = np.concatenate([t.value.ravel() for t in self.tensors])
        offset = 0
        self.slices = []
        for t in self.tensors:
            size = t.value.size
            t.value = self.flat[offset:offset + size].reshape(t.value.shape)
            self.slices.append(slice(offset, offset + size))
            offset += size

    def zero_grad(self):
        for t in self.tensors:
            t.grad = None

    def flat_grad(self) -> np.ndarray:
        return np.concatenate([
            np.zeros(t.value.size) if t.grad is None else np.ravel(t.grad) for t in self.tensors
        ])

    def named(self) -> dict[str, Tensor]:
        return {t.name: t for t in self.tensors}
