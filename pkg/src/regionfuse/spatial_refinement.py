"""Spatial adaptive refinement: wavelet decoupling, cluster partition, and
cascaded region-dynamic convolutions.

A refinement pass decomposes the input with dwt2, partitions the LL band
with soft K-means, then runs three cascaded blocks in which every band is
convolved with per-cluster kernels produced by low-rank generator MLPs from
the cluster's mean patch, and finally reconstructs with idwt2. Each block
has a residual connection; generators are identity-initialized (the second
low-rank factor and the bias branch start at zero) so a freshly built
refiner is a pure dwt2/idwt2 roundtrip.

Backward passes are hand-derived. Gradients flow through the convolution
path and through the patch -> centroid -> generator -> kernel path; the
cluster assignment itself is routing and carries no gradient (see
clustering.hard_mask_ste for the straight-through contract).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .clustering import ClusterAssignment, crp
from .layers import Block, Mlp2
from .tensor_core import fold_add, unfold
from .wavelet import BAND_NAMES, WaveletBands, dwt2, idwt2

__all__ = [
    "LowRankKernelSet",
    "KernelGenerators",
    "SacBlock",
    "SpatialRefiner",
    "cluster_centroids",
    "generate_kernels",
    "region_conv",
    "sac_block",
    "sar_forward",
]

_F64 = np.float64


@dataclass
class LowRankKernelSet:
    """Per-cluster low-rank factors and the kernels assembled from them.

    a: (K, C_in*k, rank), b: (K, rank, k*C_out), w: (K, C_in, k*k, C_out)
    with w[i] an exact reshape of a[i] @ b[i]; bias: (K, C_out).
    """

    a: np.ndarray
    b: np.ndarray
    w: np.ndarray
    bias: np.ndarray

    @property
    def n_clusters(self):
        return self.w.shape[0]

    def flat_weights(self):
        """(K, C_in*k*k, C_out) view whose row layout matches unfold patches."""
        k_, cin, kk, cout = self.w.shape
        return self.w.reshape(k_, cin * kk, cout)


class KernelGenerators(Block):
    """The three parallel generator MLPs of one band's dynamic convolution."""

    def __init__(self, c_in, c_out, k, rank, rng, hidden=32,
                 identity_init=True):
        if rank > min(c_in * k, k * c_out):
            raise ValueError(f"rank {rank} exceeds factor dims "
                             f"({c_in * k}, {k * c_out})")
        d_in = k * k * c_in
        self.mlp_a = Mlp2(d_in, hidden, c_in * k * rank, rng)
        self.mlp_b = Mlp2(d_in, hidden, rank * k * c_out, rng,
                          zero_init_last=identity_init)
        self.mlp_bias = Mlp2(d_in, hidden, c_out, rng,
                             zero_init_last=identity_init)
        self.c_in = c_in
        self.c_out = c_out
        self.k = k
        self.rank = rank


def cluster_centroids(patches, mask, n_clusters):
    """Mean patch per cluster; empty hard clusters yield a zero centroid.

    Returns (centroids (K, P), counts (K,)).
    """
    patches = np.asarray(patches, dtype=_F64)
    mask = np.asarray(mask)
    n, p = patches.shape
    sums = np.zeros((n_clusters, p), dtype=_F64)
    np.add.at(sums, mask, patches)
    counts = np.bincount(mask, minlength=n_clusters).astype(_F64)
    centroids = np.divide(sums, counts[:, None],
                          out=np.zeros_like(sums), where=counts[:, None] > 0)
    return centroids, counts


def generate_kernels(centroids, gens: KernelGenerators):
    """Run the three MLP branches and assemble W_i = reshape(A_i @ B_i)."""
    kernels, _ = _generate_kernels_cached(centroids, gens)
    return kernels


def _generate_kernels_cached(centroids, gens):
    centroids = np.asarray(centroids, dtype=_F64)
    kk = centroids.shape[0]
    cin, cout, k, rank = gens.c_in, gens.c_out, gens.k, gens.rank
    if centroids.shape[1] != k * k * cin:
        raise ValueError(f"centroid dim {centroids.shape[1]} != k^2*C_in "
                         f"{k * k * cin}")
    a_flat, ca = gens.mlp_a.forward(centroids)
    b_flat, cb = gens.mlp_b.forward(centroids)
    bias, cbias = gens.mlp_bias.forward(centroids)
    a = a_flat.reshape(kk, cin * k, rank)
    b = b_flat.reshape(kk, rank, k * cout)
    m = a @ b                                     # (K, cin*k, k*cout)
    w = m.reshape(kk, cin, k, k, cout).reshape(kk, cin, k * k, cout)
    kernels = LowRankKernelSet(a=a, b=b, w=w, bias=bias)
    return kernels, (ca, cb, cbias, a, b)


def _generate_kernels_backward(g_w, g_bias, cache, gens):
    """Backward of kernel generation; returns gradient w.r.t. centroids."""
    ca, cb, cbias, a, b = cache
    kk = a.shape[0]
    cin, cout, k = gens.c_in, gens.c_out, gens.k
    gm = np.asarray(g_w, dtype=_F64).reshape(kk, cin, k, k, cout)
    gm = gm.reshape(kk, cin * k, k * cout)
    ga = gm @ b.transpose(0, 2, 1)
    gb = a.transpose(0, 2, 1) @ gm
    gc = gens.mlp_a.backward(ga.reshape(kk, -1), ca)
    gc = gc + gens.mlp_b.backward(gb.reshape(kk, -1), cb)
    gc = gc + gens.mlp_bias.backward(np.asarray(g_bias, dtype=_F64), cbias)
    return gc


def region_conv(band, mask, kernels: LowRankKernelSet):
    """Apply each cluster's kernel strictly inside its mask region.

    band (1,C_in,H,W), mask (H*W,) at band resolution. With a single cluster
    this is exactly conv2d with kernels.w[0] / kernels.bias[0].
    """
    out, _ = _region_conv_cached(band, mask, kernels)
    return out


def _region_conv_cached(band, mask, kernels):
    band = np.asarray(band)
    if band.ndim != 4 or band.shape[0] != 1:
        raise ValueError(f"region_conv expects a (1,C,H,W) band, got {band.shape}")
    _, cin, h, w = band.shape
    mask = np.asarray(mask)
    if mask.shape != (h * w,):
        raise ValueError(f"mask has {mask.shape} entries for a {h}x{w} band")
    if mask.max() >= kernels.n_clusters:
        raise ValueError("mask indexes a cluster with no kernel")
    # kernel spatial size from the stored shape (K, C_in, k*k, C_out)
    k = int(round(np.sqrt(kernels.w.shape[2])))
    cout = kernels.w.shape[3]
    patches = unfold(band, k)[0]                  # (N, cin*k*k)
    wflat = kernels.flat_weights()
    out = np.empty((h * w, cout), dtype=_F64)
    rows_per_cluster = []
    for i in range(kernels.n_clusters):
        rows = np.flatnonzero(mask == i)
        rows_per_cluster.append(rows)
        if rows.size:
            out[rows] = patches[rows] @ wflat[i] + kernels.bias[i]
    result = out.reshape(h, w, cout).transpose(2, 0, 1)[None]
    if band.dtype == np.float32 and kernels.w.dtype == np.float32:
        result = result.astype(np.float32)
    cache = (patches, rows_per_cluster, band.shape, k)
    return result, cache


def _region_conv_backward(g_out, cache, kernels):
    """Returns (g_band_direct, g_patches, g_w, g_bias).

    g_patches is the direct convolution-path patch gradient; the caller adds
    the centroid-path contribution before folding back onto the band.
    """
    patches, rows_per_cluster, band_shape, k = cache
    _, cin, h, w = band_shape
    cout = kernels.w.shape[3]
    g = np.asarray(g_out, dtype=_F64)[0].transpose(1, 2, 0).reshape(h * w, cout)
    wflat = kernels.flat_weights()
    g_patches = np.zeros_like(patches)
    g_w = np.zeros((kernels.n_clusters, cin * k * k, cout), dtype=_F64)
    g_bias = np.zeros((kernels.n_clusters, cout), dtype=_F64)
    for i, rows in enumerate(rows_per_cluster):
        if rows.size == 0:
            continue
        gr = g[rows]
        g_w[i] = patches[rows].T @ gr
        g_bias[i] = gr.sum(axis=0)
        g_patches[rows] = gr @ wflat[i].T
    g_w = g_w.reshape(kernels.w.shape)
    return g_patches, g_w, g_bias


class SacBlock(Block):
    """One spatial adaptive convolution: per-band dynamic kernels + residual."""

    def __init__(self, channels, k, rank, rng, hidden=32, identity_init=True):
        self.gens = {name: KernelGenerators(channels, channels, k, rank, rng,
                                            hidden=hidden,
                                            identity_init=identity_init)
                     for name in BAND_NAMES}
        self.k = k

    def forward(self, bands: WaveletBands, mask, n_clusters=None):
        n_clusters = int(mask.max()) + 1 if n_clusters is None else n_clusters
        outs = {}
        caches = {}
        for name, band in zip(BAND_NAMES, bands):
            gens = self.gens[name]
            patches = unfold(band, self.k)[0]
            centroids, counts = cluster_centroids(patches, mask, n_clusters)
            kernels, gcache = _generate_kernels_cached(centroids, gens)
            conv, ccache = _region_conv_cached(band, mask, kernels)
            outs[name] = band + conv
            caches[name] = (patches, counts, kernels, gcache, ccache,
                            band.shape)
        out_bands = WaveletBands(*(outs[n] for n in BAND_NAMES))
        return out_bands, (caches, mask)

    def backward(self, g_bands: WaveletBands, cache):
        caches, mask = cache
        grads = {}
        for name, g in zip(BAND_NAMES, g_bands):
            patches, counts, kernels, gcache, ccache, band_shape = caches[name]
            g_patches, g_w, g_bias = _region_conv_backward(g, ccache, kernels)
            g_centroids = _generate_kernels_backward(g_w, g_bias, gcache,
                                                     self.gens[name])
            # centroid path: each member patch contributed 1/count
            scale = np.divide(1.0, counts, out=np.zeros_like(counts),
                              where=counts > 0)
            g_patches += g_centroids[mask] * scale[mask, None]
            g_band = fold_add(g_patches[None], band_shape, self.k)
            grads[name] = g_band + np.asarray(g, dtype=_F64)
        return WaveletBands(*(grads[n] for n in BAND_NAMES))


class SpatialRefiner(Block):
    """dwt2 -> cluster partition on LL -> 3 cascaded SacBlocks -> idwt2."""

    def __init__(self, channels, rng, k=3, rank=None, n_blocks=3, hidden=32,
                 cluster_k=16, lam=0.1, tau=0.1, cluster_iters=3, seed=0,
                 identity_init=True):
        rank = max(1, channels // 4) if rank is None else rank
        self.blocks = [SacBlock(channels, k, rank, rng, hidden=hidden,
                                identity_init=identity_init)
                       for _ in range(n_blocks)]
        self.cluster_k = cluster_k
        self.lam = lam
        self.tau = tau
        self.cluster_iters = cluster_iters
        self.seed = seed

    def forward(self, p, assignment=None, cluster_k=None):
        p = np.asarray(p)
        if p.shape[0] != 1:
            raise ValueError("SpatialRefiner.forward takes one sample; "
                             "use sar_forward for batches")
        bands = dwt2(p)
        if assignment is None:
            assignment = crp(bands.ll, cluster_k or self.cluster_k,
                             lam=self.lam, tau=self.tau,
                             iters=self.cluster_iters, seed=self.seed)
        mask = assignment.mask
        caches = []
        for blk in self.blocks:
            bands, c = blk.forward(bands, mask, assignment.n_clusters)
            caches.append(c)
        enhanced = idwt2(bands)
        return enhanced, assignment, caches

    def backward(self, g_enhanced, caches):
        g_bands = dwt2(np.asarray(g_enhanced, dtype=_F64))  # adjoint of idwt2
        for blk, c in zip(reversed(self.blocks), reversed(caches)):
            g_bands = blk.backward(g_bands, c)
        return idwt2(g_bands)                               # adjoint of dwt2


def sac_block(bands, assignment, block: SacBlock):
    """Functional wrapper: one SAC pass under a fixed cluster assignment."""
    if isinstance(assignment, ClusterAssignment):
        mask, n_clusters = assignment.mask, assignment.n_clusters
    else:
        mask = np.asarray(assignment)
        n_clusters = None
    out, _ = block.forward(bands, mask, n_clusters)
    return out


def sar_forward(p, refiner: SpatialRefiner, cluster_k=None):
    """Run the refinement on a (B,C,H,W) tensor.

    Clustering is per sample. Returns (enhanced, assignments) where
    assignments is a list with one ClusterAssignment per batch entry.
    """
    p = np.asarray(p)
    outs = []
    assignments = []
    for b in range(p.shape[0]):
        enhanced, assignment, _ = refiner.forward(p[b:b + 1],
                                                  cluster_k=cluster_k)
        outs.append(enhanced)
        assignments.append(assignment)
    return np.concatenate(outs, axis=0), assignments
