"""Dense-tensor substrate: convolutions, linear maps, normalization, activations.

Tensors are plain numpy arrays laid out (batch, channels, height, width),
float32 in the pipeline. Every operation upcasts to float64 internally so
reductions accumulate at 64-bit, then casts back to the input dtype; passing
float64 arrays keeps the whole computation at 64-bit (used by the gradient
checks). All functions are pure.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

__all__ = [
    "LinearMap",
    "conv2d",
    "conv2d_transposed",
    "linear",
    "layer_norm",
    "softmax",
    "gelu",
    "unfold",
    "fold_add",
    "finite_diff_grad",
    "read_rtf",
    "write_rtf",
]

_F32 = np.float32
_F64 = np.float64


def _out_dtype(*arrays):
    """float32 unless any input is float64."""
    for a in arrays:
        if a is not None and np.asarray(a).dtype == _F64:
            return _F64
    return _F32


def _require_finite(x, name):
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains NaN or Inf")


def _require_nchw(x, name="input"):
    x = np.asarray(x)
    if x.ndim != 4:
        raise ValueError(f"{name} must be rank-4 (B,C,H,W), got shape {x.shape}")
    return x


@dataclass
class LinearMap:
    """An affine map y = weight @ x + bias with weight (out, in)."""

    weight: np.ndarray
    bias: np.ndarray | None = None

    def __post_init__(self):
        self.weight = np.asarray(self.weight)
        if self.weight.ndim != 2:
            raise ValueError("LinearMap weight must be 2-D (out, in)")
        if self.bias is not None:
            self.bias = np.asarray(self.bias)
            if self.bias.shape != (self.weight.shape[0],):
                raise ValueError(
                    f"bias length {self.bias.shape} does not match weight rows "
                    f"{self.weight.shape[0]}"
                )


# ---------------------------------------------------------------------------
# Convolution (cross-correlation) via im2col
# ---------------------------------------------------------------------------

def _conv_out_size(size, k, stride, padding):
    out = (size + 2 * padding - k) // stride + 1
    if out <= 0:
        raise ValueError(f"kernel {k} larger than padded input {size + 2 * padding}")
    return out


def im2col(x, kh, kw, stride=1, padding=0):
    """Extract sliding windows: (B,C,H,W) -> (B, Ho*Wo, C*kh*kw), float64.

    Column layout is channel-major: index = c*kh*kw + u*kw + v.
    """
    x = _require_nchw(x)
    b, c, h, w = x.shape
    ho = _conv_out_size(h, kh, stride, padding)
    wo = _conv_out_size(w, kw, stride, padding)
    xp = np.pad(
        x.astype(_F64, copy=False),
        [(0, 0), (0, 0), (padding, padding), (padding, padding)],
    )
    cols = np.empty((b, c, kh, kw, ho, wo), dtype=_F64)
    for u in range(kh):
        for v in range(kw):
            cols[:, :, u, v] = xp[:, :, u : u + stride * ho : stride,
                                  v : v + stride * wo : stride]
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(b, ho * wo, c * kh * kw)


def col2im_add(cols, x_shape, kh, kw, stride=1, padding=0):
    """Adjoint of im2col: scatter-add columns back to (B,C,H,W) float64."""
    b, c, h, w = x_shape
    ho = _conv_out_size(h, kh, stride, padding)
    wo = _conv_out_size(w, kw, stride, padding)
    cols = cols.reshape(b, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    xp = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=_F64)
    for u in range(kh):
        for v in range(kw):
            xp[:, :, u : u + stride * ho : stride,
               v : v + stride * wo : stride] += cols[:, :, u, v]
    if padding == 0:
        return xp
    return xp[:, :, padding : padding + h, padding : padding + w]


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation of x (B,Cin,H,W) with weight (Cout,Cin,kh,kw)."""
    out, _ = conv2d_cached(x, weight, bias, stride, padding)
    return out


def conv2d_cached(x, weight, bias=None, stride=1, padding=0):
    """conv2d that also returns the im2col matrix for the backward pass."""
    x = _require_nchw(x)
    weight = np.asarray(weight)
    if weight.ndim != 4:
        raise ValueError(f"weight must be rank-4 (Cout,Cin,kh,kw), got {weight.shape}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if padding < 0:
        raise ValueError("padding must be >= 0")
    cout, cin, kh, kw = weight.shape
    if cin != x.shape[1]:
        raise ValueError(
            f"weight expects {cin} input channels, tensor has {x.shape[1]}"
        )
    b = x.shape[0]
    ho = _conv_out_size(x.shape[2], kh, stride, padding)
    wo = _conv_out_size(x.shape[3], kw, stride, padding)
    col = im2col(x, kh, kw, stride, padding)
    w2 = weight.reshape(cout, -1).astype(_F64, copy=False)
    out = col @ w2.T
    if bias is not None:
        out += np.asarray(bias, dtype=_F64)
    out = out.reshape(b, ho, wo, cout).transpose(0, 3, 1, 2)
    return out.astype(_out_dtype(x, weight, bias), copy=False), col


def conv2d_backward(grad_out, col, weight, x_shape, stride=1, padding=0,
                    with_bias=True):
    """Gradients of conv2d: returns (grad_x, grad_weight, grad_bias)."""
    cout, cin, kh, kw = weight.shape
    b = grad_out.shape[0]
    g = grad_out.astype(_F64, copy=False).transpose(0, 2, 3, 1).reshape(b, -1, cout)
    w2 = weight.reshape(cout, -1).astype(_F64, copy=False)
    grad_w = np.einsum("bnc,bnk->ck", g, col).reshape(weight.shape)
    grad_b = g.sum(axis=(0, 1)) if with_bias else None
    grad_cols = g @ w2
    grad_x = col2im_add(grad_cols, (b, cin) + tuple(x_shape[2:]), kh, kw,
                        stride, padding)
    return grad_x, grad_w, grad_b


def conv2d_transposed(x, weight, stride=1):
    """Adjoint of conv2d (zero padding): <conv2d(a,w), x> == <a, conv2d_transposed(x,w)>.

    x is (B,Cout,Hi,Wi); output is (B,Cin,(Hi-1)*stride+kh,(Wi-1)*stride+kw).
    """
    x = _require_nchw(x)
    weight = np.asarray(weight)
    if weight.ndim != 4:
        raise ValueError(f"weight must be rank-4 (Cout,Cin,kh,kw), got {weight.shape}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    cout, cin, kh, kw = weight.shape
    if cout != x.shape[1]:
        raise ValueError(
            f"weight expects {cout} channels on the transposed input, tensor has "
            f"{x.shape[1]}"
        )
    b, _, hi, wi = x.shape
    h = (hi - 1) * stride + kh
    w = (wi - 1) * stride + kw
    w2 = weight.reshape(cout, -1).astype(_F64, copy=False)
    cols = x.astype(_F64, copy=False).transpose(0, 2, 3, 1).reshape(b, -1, cout) @ w2
    out = col2im_add(cols, (b, cin, h, w), kh, kw, stride, 0)
    return out.astype(_out_dtype(x, weight), copy=False)


# ---------------------------------------------------------------------------
# Pointwise / token operations
# ---------------------------------------------------------------------------

def linear(x, lmap: LinearMap):
    """Apply a LinearMap to the last axis of x."""
    x = np.asarray(x)
    _require_finite(x, "linear input")
    if x.shape[-1] != lmap.weight.shape[1]:
        raise ValueError(
            f"linear expects {lmap.weight.shape[1]} features, got {x.shape[-1]}"
        )
    y = x.astype(_F64, copy=False) @ lmap.weight.astype(_F64, copy=False).T
    if lmap.bias is not None:
        y += lmap.bias.astype(_F64, copy=False)
    return y.astype(_out_dtype(x, lmap.weight), copy=False)


def layer_norm(x, gain, shift, eps=1e-5):
    """Per-pixel channel normalization of a (B,C,H,W) tensor.

    Each (b,h,w) channel vector is normalized to mean 0 / variance 1 before
    the affine (gain, shift), both of length C.
    """
    if eps <= 0:
        raise ValueError("eps must be > 0")
    x = _require_nchw(x)
    _require_finite(x, "layer_norm input")
    xt = x.astype(_F64, copy=False).transpose(0, 2, 3, 1)
    y = layer_norm_tokens(xt, gain, shift, eps)
    return y.transpose(0, 3, 1, 2).astype(_out_dtype(x, gain), copy=False)


def layer_norm_tokens(x, gain, shift, eps=1e-5):
    """layer_norm over the last axis of an (..., C) array; returns float64."""
    x = np.asarray(x, dtype=_F64)
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    xhat = (x - mu) / np.sqrt(var + eps)
    return xhat * np.asarray(gain, dtype=_F64) + np.asarray(shift, dtype=_F64)


def softmax(v, axis=-1):
    """Numerically stable softmax (max-subtraction); rows sum to 1."""
    v = np.asarray(v)
    _require_finite(v, "softmax input")
    z = v.astype(_F64, copy=False)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return out.astype(_out_dtype(v), copy=False)


def gelu(v):
    """Exact (erf-based) GELU."""
    v = np.asarray(v)
    _require_finite(v, "gelu input")
    z = v.astype(_F64, copy=False)
    out = 0.5 * z * (1.0 + erf(z / np.sqrt(2.0)))
    return out.astype(_out_dtype(v), copy=False)


def gelu_backward(grad_out, v):
    """d gelu(v)/dv * grad_out, evaluated in float64."""
    z = np.asarray(v, dtype=_F64)
    cdf = 0.5 * (1.0 + erf(z / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * z * z) / np.sqrt(2.0 * np.pi)
    return np.asarray(grad_out, dtype=_F64) * (cdf + z * pdf)


def unfold(x, k):
    """Per-pixel k x k patches with zero-padded borders.

    (B,C,H,W) -> (B, H*W, C*k*k); patch layout is channel-major
    (c*k*k + u*k + v), matching the kernel layout used by the region
    convolutions.
    """
    if k % 2 != 1:
        raise ValueError("patch size k must be odd")
    return im2col(x, k, k, stride=1, padding=k // 2)


def fold_add(patches, x_shape, k):
    """Adjoint of unfold: scatter-add patch gradients back onto the image."""
    return col2im_add(patches, x_shape, k, k, stride=1, padding=k // 2)


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------

def finite_diff_grad(f, x, eps=1e-5):
    """Central-difference gradient of a scalar function f at x.

    Returns an array of x's shape with entries (f(x+eps*e)-f(x-eps*e))/(2 eps).
    """
    if not (1e-5 <= eps <= 1e-2):
        raise ValueError("eps must lie in [1e-5, 1e-2]")
    x = np.asarray(x)
    grad = np.zeros(x.shape, dtype=_F64)
    flat = grad.reshape(-1)
    xw = x.copy()
    xf = xw.reshape(-1)
    for i in range(xf.size):
        orig = xf[i]
        xf[i] = orig + eps
        fp = float(f(xw))
        xf[i] = orig - eps
        fm = float(f(xw))
        xf[i] = orig
        flat[i] = (fp - fm) / (2.0 * eps)
    return grad


# ---------------------------------------------------------------------------
# RTF tensor files
# ---------------------------------------------------------------------------

RTF_MAGIC = b"RAFT"
RTF_VERSION = 1


def write_rtf(path, x):
    """Write a rank-4 tensor as an RTF file (magic RAFT, v1, f32 LE payload)."""
    x = _require_nchw(x, "tensor")
    data = np.ascontiguousarray(x, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(RTF_MAGIC)
        fh.write(struct.pack("<II", RTF_VERSION, 4))
        fh.write(struct.pack("<4I", *x.shape))
        fh.write(data.tobytes())


def read_rtf(path):
    """Read an RTF tensor file; rejects wrong magic/version/rank."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != RTF_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {RTF_MAGIC!r}")
        version, rank = struct.unpack("<II", fh.read(8))
        if version != RTF_VERSION:
            raise ValueError(f"{path}: unsupported RTF version {version}")
        if rank != 4:
            raise ValueError(f"{path}: rank must be 4, got {rank}")
        dims = struct.unpack("<4I", fh.read(16))
        payload = fh.read()
    count = int(np.prod(dims))
    expect = count * 4
    if len(payload) != expect:
        raise ValueError(f"{path}: payload is {len(payload)} bytes, expected {expect}")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(_F32)
