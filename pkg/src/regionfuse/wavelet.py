"""Orthonormal 2-D Haar analysis/synthesis and the multi-scale pyramid.

The four 2x2 kernels are orthonormal (factor 1/2), so analysis conserves
energy exactly and the synthesis operator is simultaneously the inverse and
the adjoint of the analysis operator. Both directions are realized as fixed
depthwise stride-2 (transposed) convolutions, written out as strided slice
arithmetic. Source spatial dims must be even; callers pad.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["WaveletBands", "haar_kernels", "dwt2", "idwt2", "build_pyramid",
           "ll_upsample", "BAND_NAMES"]

BAND_NAMES = ("ll", "lh", "hl", "hh")

# Order LL, LH, HL, HH. Orthonormal: Gram matrix of the flattened kernels
# is the identity.
_HAAR = 0.5 * np.array(
    [
        [[1.0, 1.0], [1.0, 1.0]],
        [[1.0, 1.0], [-1.0, -1.0]],
        [[1.0, -1.0], [1.0, -1.0]],
        [[1.0, -1.0], [-1.0, 1.0]],
    ]
)


def haar_kernels():
    """The four fixed 2x2 analysis kernels, stacked (4, 2, 2) as LL,LH,HL,HH."""
    return _HAAR.copy()


@dataclass
class WaveletBands:
    """Quadruple of equal-shaped sub-band tensors at half resolution."""

    ll: np.ndarray
    lh: np.ndarray
    hl: np.ndarray
    hh: np.ndarray

    def __post_init__(self):
        shapes = {b.shape for b in (self.ll, self.lh, self.hl, self.hh)}
        if len(shapes) != 1:
            raise ValueError(f"band shapes differ: {shapes}")

    def __iter__(self):
        return iter((self.ll, self.lh, self.hl, self.hh))

    @property
    def shape(self):
        return self.ll.shape

    def map(self, fn):
        return WaveletBands(*(fn(b) for b in self))

    def energy(self):
        return float(sum(np.sum(np.asarray(b, dtype=np.float64) ** 2)
                         for b in self))


def dwt2(x):
    """Haar analysis of (B,C,H,W): depthwise stride-2 conv with each kernel."""
    x = np.asarray(x)
    if x.ndim != 4:
        raise ValueError(f"dwt2 expects rank-4 input, got {x.shape}")
    h, w = x.shape[2], x.shape[3]
    if h % 2 or w % 2:
        raise ValueError(f"spatial dims must be even, got {h}x{w}")
    k = haar_kernels()
    x64 = x.astype(np.float64, copy=False)
    s = [[x64[..., u::2, v::2] for v in range(2)] for u in range(2)]
    bands = []
    for b in range(4):
        band = (k[b, 0, 0] * s[0][0] + k[b, 0, 1] * s[0][1]
                + k[b, 1, 0] * s[1][0] + k[b, 1, 1] * s[1][1])
        bands.append(band.astype(x.dtype, copy=False))
    return WaveletBands(*bands)


def idwt2(bands):
    """Exact inverse of dwt2 via fixed stride-2 transposed depthwise convs."""
    if not isinstance(bands, WaveletBands):
        raise TypeError("idwt2 expects WaveletBands")
    k = haar_kernels()
    stack = [np.asarray(b, dtype=np.float64) for b in bands]
    bsh = stack[0].shape
    out = np.empty(bsh[:2] + (2 * bsh[2], 2 * bsh[3]), dtype=np.float64)
    for u in range(2):
        for v in range(2):
            out[..., u::2, v::2] = sum(k[b, u, v] * stack[b] for b in range(4))
    return out.astype(bands.ll.dtype, copy=False)


def ll_upsample(x):
    """Zero-detail synthesis: idwt2 of (x, 0, 0, 0); doubles spatial dims."""
    z = np.zeros_like(x)
    return idwt2(WaveletBands(x, z, z, z))


def build_pyramid(p, n_levels):
    """Wavelet pyramid [P_1 .. P_N] with P_N = p and P_k = LL(dwt2(P_{k+1})).

    Resolution decreases toward index 0. Stages derive the four sub-bands of
    a level with dwt2 on demand (the decomposition is deterministic).
    """
    if n_levels < 1:
        raise ValueError("n_levels must be >= 1")
    p = np.asarray(p)
    div = 2 ** (n_levels - 1)
    if p.shape[2] % div or p.shape[3] % div:
        raise ValueError(
            f"spatial dims {p.shape[2]}x{p.shape[3]} not divisible by {div}")
    levels = [p]
    for _ in range(n_levels - 1):
        levels.append(dwt2(levels[-1]).ll)
    levels.reverse()
    return levels
