"""Trainable building blocks with hand-derived backward passes.

There is deliberately no autodiff graph: each block exposes
``forward(x) -> (y, cache)`` and ``backward(grad_y, cache) -> grad_x``,
where backward accumulates parameter gradients into ``Param.grad``. The
explicit cache lets one block be applied several times inside a single
forward pass (e.g. a projection shared by the four wavelet bands) without
state clobbering; gradients from repeated uses simply add up.
"""

from __future__ import annotations

import numpy as np

from .tensor_core import (
    conv2d_backward,
    conv2d_cached,
    gelu,
    gelu_backward,
    layer_norm_tokens,
)

_F64 = np.float64


class Param:
    """A learnable array with a gradient accumulator."""

    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = np.asarray(value)
        self.grad = np.zeros_like(self.value, dtype=_F64)

    @property
    def shape(self):
        return self.value.shape


class Block:
    """Base class providing recursive parameter discovery by attribute walk."""

    def named_params(self, prefix=""):
        for name, val in vars(self).items():
            if isinstance(val, Param):
                yield prefix + name, val
            elif isinstance(val, Block):
                yield from val.named_params(f"{prefix}{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Param):
                        yield f"{prefix}{name}.{i}", item
                    elif isinstance(item, Block):
                        yield from item.named_params(f"{prefix}{name}.{i}.")
            elif isinstance(val, dict):
                for key, item in val.items():
                    if isinstance(item, Param):
                        yield f"{prefix}{name}.{key}", item
                    elif isinstance(item, Block):
                        yield from item.named_params(f"{prefix}{name}.{key}.")

    def zero_grad(self):
        for _, p in self.named_params():
            p.grad[...] = 0.0

    def state_dict(self):
        return {name: p.value.copy() for name, p in self.named_params()}

    def load_state_dict(self, state):
        mine = dict(self.named_params())
        missing = set(mine) - set(state)
        extra = set(state) - set(mine)
        if missing or extra:
            raise ValueError(f"state mismatch; missing={sorted(missing)[:4]} "
                             f"extra={sorted(extra)[:4]}")
        for name, p in mine.items():
            if state[name].shape != p.value.shape:
                raise ValueError(f"shape mismatch for {name}")
            p.value[...] = state[name].astype(p.value.dtype)


def glorot(rng, shape, fan_in, fan_out, dtype=np.float32):
    scale = np.sqrt(2.0 / (fan_in + fan_out))
    return (rng.standard_normal(shape) * scale).astype(dtype)


class Linear(Block):
    """y = x @ W^T + b over the last axis."""

    def __init__(self, d_in, d_out, rng, bias=True, zero_init=False,
                 dtype=np.float32):
        if zero_init:
            w = np.zeros((d_out, d_in), dtype=dtype)
        else:
            w = glorot(rng, (d_out, d_in), d_in, d_out, dtype)
        self.w = Param(w)
        self.b = Param(np.zeros(d_out, dtype=dtype)) if bias else None

    def forward(self, x):
        x64 = np.asarray(x, dtype=_F64)
        y = x64 @ self.w.value.astype(_F64).T
        if self.b is not None:
            y += self.b.value.astype(_F64)
        return y, x64

    def backward(self, g, cache):
        x64 = cache
        g = np.asarray(g, dtype=_F64)
        gm = g.reshape(-1, g.shape[-1])
        xm = x64.reshape(-1, x64.shape[-1])
        self.w.grad += gm.T @ xm
        if self.b is not None:
            self.b.grad += gm.sum(axis=0)
        return g @ self.w.value.astype(_F64)


class LayerNorm(Block):
    """Normalizes the last axis of an (..., dim) array, then affine."""

    def __init__(self, dim, eps=1e-5, dtype=np.float32):
        self.gain = Param(np.ones(dim, dtype=dtype))
        self.shift = Param(np.zeros(dim, dtype=dtype))
        self.eps = eps

    def forward(self, x):
        x = np.asarray(x, dtype=_F64)
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv
        y = xhat * self.gain.value.astype(_F64) + self.shift.value.astype(_F64)
        return y, (xhat, inv)

    def backward(self, g, cache):
        xhat, inv = cache
        g = np.asarray(g, dtype=_F64)
        gsum_axes = tuple(range(g.ndim - 1))
        self.gain.grad += (g * xhat).sum(axis=gsum_axes)
        self.shift.grad += g.sum(axis=gsum_axes)
        gh = g * self.gain.value.astype(_F64)
        m1 = gh.mean(axis=-1, keepdims=True)
        m2 = (gh * xhat).mean(axis=-1, keepdims=True)
        return inv * (gh - m1 - xhat * m2)

    def forward_check(self, x):
        """Reference against the functional op (used in tests only)."""
        return layer_norm_tokens(x, self.gain.value, self.shift.value, self.eps)


class Conv2d(Block):
    """Standard 2-D cross-correlation layer."""

    def __init__(self, c_in, c_out, k, rng, stride=1, padding=None,
                 zero_init=False, dtype=np.float32):
        padding = k // 2 if padding is None else padding
        fan = c_in * k * k
        if zero_init:
            w = np.zeros((c_out, c_in, k, k), dtype=dtype)
        else:
            w = glorot(rng, (c_out, c_in, k, k), fan, c_out * k * k, dtype)
        self.w = Param(w)
        self.b = Param(np.zeros(c_out, dtype=dtype))
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        y, col = conv2d_cached(x, self.w.value, self.b.value,
                               self.stride, self.padding)
        return y.astype(_F64, copy=False), (col, x.shape)

    def backward(self, g, cache):
        col, x_shape = cache
        gx, gw, gb = conv2d_backward(g, col, self.w.value, x_shape,
                                     self.stride, self.padding)
        self.w.grad += gw
        self.b.grad += gb
        return gx


class DepthwiseConv2d(Block):
    """Per-channel k x k convolution, zero padding, stride 1."""

    def __init__(self, channels, k, rng, zero_init=False, dtype=np.float32):
        if zero_init:
            w = np.zeros((channels, k, k), dtype=dtype)
        else:
            w = glorot(rng, (channels, k, k), k * k, k * k, dtype)
        self.w = Param(w)
        self.b = Param(np.zeros(channels, dtype=dtype))
        self.k = k

    def forward(self, x):
        x64 = np.asarray(x, dtype=_F64)
        b, c, h, w = x64.shape
        p = self.k // 2
        xp = np.pad(x64, [(0, 0), (0, 0), (p, p), (p, p)])
        out = np.zeros_like(x64)
        wv = self.w.value.astype(_F64)
        for u in range(self.k):
            for v in range(self.k):
                out += wv[None, :, u, v, None, None] * xp[:, :, u : u + h, v : v + w]
        out += self.b.value.astype(_F64)[None, :, None, None]
        return out, xp

    def backward(self, g, cache):
        xp = cache
        g = np.asarray(g, dtype=_F64)
        b, c, h, w = g.shape
        p = self.k // 2
        gxp = np.zeros_like(xp)
        wv = self.w.value.astype(_F64)
        for u in range(self.k):
            for v in range(self.k):
                self.w.grad[:, u, v] += np.einsum(
                    "bchw,bchw->c", g, xp[:, :, u : u + h, v : v + w])
                gxp[:, :, u : u + h, v : v + w] += (
                    wv[None, :, u, v, None, None] * g)
        self.b.grad += g.sum(axis=(0, 2, 3))
        if p == 0:
            return gxp
        return gxp[:, :, p : p + h, p : p + w]


class Mlp2(Block):
    """Two-layer perceptron Linear -> GELU -> Linear."""

    def __init__(self, d_in, d_hidden, d_out, rng, zero_init_last=False,
                 dtype=np.float32):
        self.fc1 = Linear(d_in, d_hidden, rng, dtype=dtype)
        self.fc2 = Linear(d_hidden, d_out, rng, zero_init=zero_init_last,
                          dtype=dtype)

    def forward(self, x):
        h, c1 = self.fc1.forward(x)
        a = gelu(h)
        y, c2 = self.fc2.forward(a)
        return y, (c1, h, c2)

    def backward(self, g, cache):
        c1, h, c2 = cache
        ga = self.fc2.backward(g, c2)
        gh = gelu_backward(ga, h)
        return self.fc1.backward(gh, c1)
