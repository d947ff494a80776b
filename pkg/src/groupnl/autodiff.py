"""Minimal reverse-mode differentiation over the tensor-core primitives.

A :class:`Var` wraps an ndarray plus the closure that maps its output
gradient to gradients of its parents.  Leaves that should be optimised are
:class:`Parameter` objects with ``trainable=True``; that set is the trainable
registry, and it is the only thing :func:`backward` reports gradients for.
NLF hyperparameters are plain arrays captured by closures and therefore can
never receive a gradient.
"""
from __future__ import annotations

import contextlib
import threading

import numpy as np

from . import tensor as tc
from .errors import NonScalarLoss, ShapeMismatch
from .nlf import nlf_eval, nlf_grad

_mode = threading.local()


def grad_enabled():
    return getattr(_mode, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _mode.enabled = False
    try:
        yield
    finally:
        _mode.enabled = prev


def stats_frozen():
    return getattr(_mode, "frozen", False)


@contextlib.contextmanager
def frozen_stats():
    """Training-mode BN still normalises with batch statistics but leaves running buffers untouched."""
    prev = stats_frozen()
    _mode.frozen = True
    try:
        yield
    finally:
        _mode.frozen = prev


class Var:
    __slots__ = ("value", "parents", "_backward")

    def __init__(self, value, parents=(), backward=None):
        self.value = value
        self.parents = parents
        self._backward = backward

    @property
    def requires_grad(self):
        return self._backward is not None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"{type(self).__name__}(shape={self.value.shape}, dtype={self.value.dtype})"


class Parameter(Var):
    """A leaf tensor.  Only ``trainable`` parameters are part of the registry."""

    __slots__ = ("name", "trainable")

    def __init__(self, value, name="", trainable=True):
        super().__init__(np.asarray(value))
        self.name = name
        self.trainable = trainable

    @property
    def requires_grad(self):
        return self.trainable

    @property
    def size(self):
        return int(self.value.size)


def as_var(x):
    return x if isinstance(x, Var) else Var(np.asarray(x))


def _node(value, parents, backward):
    if grad_enabled() and any(p.requires_grad for p in parents):
        return Var(value, tuple(parents), backward)
    return Var(value)


# -- backward ---------------------------------------------------------------------


def _topo(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Gradients of a scalar ``loss`` for every trainable Parameter it depends on."""
    if loss.value.size != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.value.shape}")
    grads = {id(loss): np.ones_like(loss.value)}
    out = {}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            if node.trainable:
                out[node] = g
            continue
        if node._backward is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return out


# -- primitives -------------------------------------------------------------------


def conv2d(x, w, b, geom):
    x, w = as_var(x), as_var(w)
    parents = [x, w] + ([b] if b is not None else [])
    y = tc.conv2d(x.value, w.value, None if b is None else b.value, geom)
    if not (grad_enabled() and any(p.requires_grad for p in parents)):
        return Var(y)
    in_hw = x.value.shape[2:]

    def bwd(g):
        n = g.shape[0]
        G = geom.groups
        og = geom.c_out // G
        gy = g.reshape(n, G, og, -1)
        cols, _ = tc.im2col(x.value, geom)
        wm = w.value.reshape(G, og, -1)
        gw = np.matmul(gy, cols.transpose(0, 1, 3, 2)).sum(axis=0).reshape(w.value.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wm.transpose(0, 2, 1), gy)
            gx = tc.col2im(gcols, geom, in_hw)
        res = [gx, gw]
        if b is not None:
            res.append(g.sum(axis=(0, 2, 3)))
        return res

    return Var(y, tuple(parents), bwd)


def channel_slice(x, start, stop):
    x = as_var(x)
    shape = x.value.shape

    def bwd(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[:, start:stop] = g
        return (gx,)

    return _node(x.value[:, start:stop], (x,), bwd)


def split(x, g):
    x = as_var(x)
    parts = tc.channel_split(x.value, g)
    w = parts[0].shape[1]
    return [channel_slice(x, i * w, (i + 1) * w) for i in range(g)]


def concat(parts):
    parts = [as_var(p) for p in parts]
    y = tc.channel_concat([p.value for p in parts])
    edges = np.cumsum([0] + [p.value.shape[1] for p in parts])

    def bwd(g):
        return [g[:, edges[i]:edges[i + 1]] for i in range(len(parts))]

    return _node(y, parts, bwd)


def repeat(x, times):
    x = as_var(x)
    c = x.value.shape[1]

    def bwd(g):
        n, _, h, w = g.shape
        return (g.reshape(n, times, c, h, w).sum(axis=1),)

    return _node(tc.channel_repeat(x.value, times), (x,), bwd)


def permute_channels(x, perm):
    x = as_var(x)
    perm = np.asarray(perm)

    def bwd(g):
        gx = np.empty_like(g)
        gx[:, perm] = g
        return (gx,)

    return _node(x.value[:, perm], (x,), bwd)


def reshape(x, shape):
    x = as_var(x)
    old = x.value.shape
    return _node(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def nlf(x, kind, params, laplace_abs=False):
    """Elementwise NLF with fixed ``params`` broadcast over ``x`` (never differentiated)."""
    x = as_var(x)
    y = nlf_eval(kind, params, x.value, laplace_abs)
    return _node(y, (x,), lambda g: (g * nlf_grad(kind, params, x.value, laplace_abs),))


def add(a, b):
    a, b = as_var(a), as_var(b)
    return _node(a.value + b.value, (a, b), lambda g: (g, g))


def scale(x, c):
    x = as_var(x)
    return _node(x.value * c, (x,), lambda g: (g * c,))


def relu(x):
    x = as_var(x)
    mask = x.value > 0
    return _node(np.maximum(x.value, 0), (x,), lambda g: (g * mask,))


def total(x):
    x = as_var(x)
    shape = x.value.shape
    return _node(np.asarray(x.value.sum()), (x,), lambda g: (np.broadcast_to(g, shape).astype(x.value.dtype),))


def weighted_sum(x, weights):
    """sum(x * weights) for a constant ``weights`` array; handy scalar probe for gradient checks."""
    x = as_var(x)
    weights = np.asarray(weights, dtype=x.value.dtype)
    return _node(np.asarray((x.value * weights).sum()), (x,), lambda g: (g * weights,))


def max_pool2d(x, k=2):
    x = as_var(x)
    n, c, h, w = x.value.shape
    if h % k or w % k:
        raise ShapeMismatch(f"max_pool2d({k}) needs spatial dims divisible by {k}, got {h}x{w}")
    blocks = x.value.reshape(n, c, h // k, k, w // k, k)
    y = blocks.max(axis=(3, 5))
    mask = blocks == y[:, :, :, None, :, None]
    # route each window's gradient to a single (first) maximum
    first = np.cumsum(np.cumsum(mask, axis=3), axis=5) == 1
    mask &= first

    def bwd(g):
        return ((mask * g[:, :, :, None, :, None]).reshape(n, c, h, w),)

    return _node(y, (x,), bwd)


def global_avg_pool(x):
    x = as_var(x)
    n, c, h, w = x.value.shape

    def bwd(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), (n, c, h, w)).astype(g.dtype),)

    return _node(x.value.mean(axis=(2, 3)), (x,), bwd)


def linear(x, w, b=None):
    x, w = as_var(x), as_var(w)
    parents = [x, w] + ([b] if b is not None else [])
    y = x.value @ w.value.T
    if b is not None:
        y = y + b.value

    def bwd(g):
        res = [g @ w.value, g.T @ x.value]
        if b is not None:
            res.append(g.sum(axis=0))
        return res

    return _node(y, parents, bwd)


def softmax_cross_entropy(logits, labels):
    logits = as_var(logits)
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = z.shape[0]
    labels = np.asarray(labels)
    loss = -logp[np.arange(n), labels].mean()

    def bwd(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1
        return (g * p / n,)

    return _node(np.asarray(loss, dtype=logits.value.dtype), (logits,), bwd)


class BatchNorm:
    """Per-channel affine batch normalisation with running statistics."""

    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=tc.DTYPE, name="bn"):
        self.gamma = Parameter(np.ones(channels, dtype=dtype), f"{name}.gamma")
        self.beta = Parameter(np.zeros(channels, dtype=dtype), f"{name}.beta")
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def parameters(self):
        return [self.gamma, self.beta]

    def astype(self, dtype):
        bn = BatchNorm.__new__(BatchNorm)
        bn.gamma = Parameter(self.gamma.value.astype(dtype), self.gamma.name, self.gamma.trainable)
        bn.beta = Parameter(self.beta.value.astype(dtype), self.beta.name, self.beta.trainable)
        bn.running_mean = self.running_mean.astype(dtype)
        bn.running_var = self.running_var.astype(dtype)
        bn.momentum, bn.eps = self.momentum, self.eps
        return bn

    def __call__(self, x, training=False):
        return batch_norm(x, self, training)


def batch_norm(x, bn, training=False):
    x = as_var(x)
    xv = x.value
    gamma = bn.gamma.value[None, :, None, None]
    beta = bn.beta.value[None, :, None, None]
    if training:
        m = xv.shape[0] * xv.shape[2] * xv.shape[3]
        mean = xv.mean(axis=(0, 2, 3))
        var = xv.var(axis=(0, 2, 3))
        if not stats_frozen():
            unbiased = var * m / max(m - 1, 1)
            bn.running_mean[...] = (1 - bn.momentum) * bn.running_mean + bn.momentum * mean
            bn.running_var[...] = (1 - bn.momentum) * bn.running_var + bn.momentum * unbiased
    else:
        mean, var = bn.running_mean, bn.running_var
    inv = (1.0 / np.sqrt(var + bn.eps)).astype(xv.dtype)
    xhat = (xv - mean[None, :, None, None]) * inv[None, :, None, None]
    y = xhat * gamma + beta

    def bwd(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gxhat = g * gamma
        if training:
            gx = (
                gxhat
                - gxhat.mean(axis=(0, 2, 3), keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
            ) * inv[None, :, None, None]
        else:
            gx = gxhat * inv[None, :, None, None]
        return gx, ggamma, gbeta

    return _node(y, (x, bn.gamma, bn.beta), bwd)
