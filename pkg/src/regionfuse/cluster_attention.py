"""Clustered frequency aggregation: sparse attention routed by cluster masks.

The attention score between query pixel i and key pixel j is bifurcated:
an exact dot product when both share a cluster, and a shared score against
the cluster-mean key of j's cluster otherwise. Because every foreign pixel
of one cluster shares a single score, the softmax over all N slots can be
evaluated from |own cluster| exact scores plus one score per foreign
cluster entering the denominator with that cluster's occupancy as its
multiplicity, and contributing exp(score) * (sum of member values) to the
numerator. `crsa_sparse` implements that fast path without ever
materializing the N x N matrix; `crsa_dense_oracle` builds the matrix
literally and is the reference the fast path is tested against.

Also here: the gated depthwise forward network, the masked attention
variants used by the ablation benchmark, FLOP accounting, and the cascaded
stage (CRSA -> GDFN -> fresh partition -> CRSA) that fuses the
multispectral stream with the enhanced frequency features.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .clustering import crp
from .layers import Block, Conv2d, DepthwiseConv2d, LayerNorm, Linear
from .tensor_core import LinearMap, gelu, gelu_backward, linear, softmax
from .wavelet import BAND_NAMES, WaveletBands, dwt2, idwt2, ll_upsample

__all__ = [
    "AttentionTriplet",
    "ClusterKeySummary",
    "FlopReport",
    "TripletMaker",
    "GdfnBlock",
    "CrsaBlock",
    "CfaStage",
    "make_triplet",
    "cluster_summaries",
    "crsa_dense_oracle",
    "crsa_sparse",
    "masked_attention_variant",
    "variant_mask",
    "gdfn",
    "cfa_forward",
]

_F64 = np.float64

VARIANT_MODES = ("dense", "crsa", "local_block", "banded", "global_cross")


@dataclass
class AttentionTriplet:
    """Per-head query/key/value token arrays.

    queries: band name -> (heads, N, d); keys: (heads, N, d);
    values: (heads, N, d_v). Token order is row-major pixel order.
    """

    queries: dict
    keys: np.ndarray
    values: np.ndarray
    heads: int

    def __post_init__(self):
        n = self.keys.shape[1]
        for name, q in self.queries.items():
            if q.shape[1] != n:
                raise ValueError(f"query band {name} has {q.shape[1]} tokens, "
                                 f"keys have {n}")
        if self.values.shape[1] != n:
            raise ValueError("values token count differs from keys")

    @property
    def n_tokens(self):
        return self.keys.shape[1]

    @property
    def head_dim(self):
        return self.keys.shape[2]


@dataclass
class ClusterKeySummary:
    mean_keys: np.ndarray    # (heads, K, d)
    value_sums: np.ndarray   # (heads, K, d_v)
    occupancy: np.ndarray    # (K,)


@dataclass
class FlopReport:
    score_flops: int
    aggregate_flops: int
    total_flops: int
    mode: str


def split_heads(tokens, heads):
    """(N, C) -> (heads, N, C // heads) by channel slicing."""
    n, c = tokens.shape
    if c % heads:
        raise ValueError(f"{c} channels not divisible by {heads} heads")
    return tokens.reshape(n, heads, c // heads).transpose(1, 0, 2)


def merge_heads(x):
    """(heads, N, d) -> (N, heads*d)."""
    h, n, d = x.shape
    return x.transpose(1, 0, 2).reshape(n, h * d)


def to_tokens(img):
    """(1,C,H,W) -> (H*W, C) in row-major pixel order."""
    _, c, h, w = img.shape
    return np.asarray(img, dtype=_F64)[0].transpose(1, 2, 0).reshape(h * w, c)


def from_tokens(tokens, hw):
    h, w = hw
    return tokens.reshape(h, w, -1).transpose(2, 0, 1)[None]


# ---------------------------------------------------------------------------
# Triplet generation
# ---------------------------------------------------------------------------

class TripletMaker(Block):
    """LN + projection triplet: Q_b per band, K from LL, V from the fusion.

    The value source is a 3x3 convolution over the channel concatenation of
    the multispectral feature and the LL band, then LN and a projection.
    One Q projection (and LN) is shared across the four bands.
    """

    def __init__(self, channels, heads, rng):
        if channels % heads:
            raise ValueError("channels must be divisible by heads")
        self.q_ln = LayerNorm(channels)
        self.k_ln = LayerNorm(channels)
        self.v_ln = LayerNorm(channels)
        self.wq = Linear(channels, channels, rng)
        self.wk = Linear(channels, channels, rng)
        self.wv = Linear(channels, channels, rng)
        self.f_v = Conv2d(2 * channels, channels, 3, rng)
        self.heads = heads

    def forward(self, bands: WaveletBands, m_k):
        if m_k.shape[2:] != bands.ll.shape[2:]:
            raise ValueError(f"m_k spatial {m_k.shape[2:]} != band spatial "
                             f"{bands.ll.shape[2:]}")
        hw = bands.ll.shape[2:]
        qs = {}
        qcaches = {}
        for name, band in zip(BAND_NAMES, bands):
            t = to_tokens(band)
            ln_out, c_ln = self.q_ln.forward(t)
            proj, c_w = self.wq.forward(ln_out)
            qs[name] = split_heads(proj, self.heads)
            qcaches[name] = (c_ln, c_w)
        kt = to_tokens(bands.ll)
        k_ln_out, ck_ln = self.k_ln.forward(kt)
        k_proj, ck_w = self.wk.forward(k_ln_out)
        fused_in = np.concatenate([np.asarray(m_k, dtype=_F64),
                                   np.asarray(bands.ll, dtype=_F64)], axis=1)
        fused, c_fv = self.f_v.forward(fused_in)
        vt = to_tokens(fused)
        v_ln_out, cv_ln = self.v_ln.forward(vt)
        v_proj, cv_w = self.wv.forward(v_ln_out)
        triplet = AttentionTriplet(
            queries=qs,
            keys=split_heads(k_proj, self.heads),
            values=split_heads(v_proj, self.heads),
            heads=self.heads,
        )
        cache = (qcaches, ck_ln, ck_w, cv_ln, cv_w, c_fv, hw,
                 m_k.shape, fused_in.shape)
        return triplet, cache

    def backward(self, g_queries, g_keys, g_values, cache):
        """Returns (band gradients as WaveletBands, g_m_k)."""
        qcaches, ck_ln, ck_w, cv_ln, cv_w, c_fv, hw, mk_shape, fi_shape = cache
        band_grads = {}
        for name in BAND_NAMES:
            c_ln, c_w = qcaches[name]
            g = merge_heads(g_queries[name])
            g = self.wq.backward(g, c_w)
            g = self.q_ln.backward(g, c_ln)
            band_grads[name] = from_tokens(g, hw)
        gk = merge_heads(g_keys)
        gk = self.wk.backward(gk, ck_w)
        gk = self.k_ln.backward(gk, ck_ln)
        band_grads["ll"] = band_grads["ll"] + from_tokens(gk, hw)
        gv = merge_heads(g_values)
        gv = self.wv.backward(gv, cv_w)
        gv = self.v_ln.backward(gv, cv_ln)
        g_fused = from_tokens(gv, hw)
        g_fused_in = self.f_v.backward(g_fused, c_fv)
        c = mk_shape[1]
        g_m = g_fused_in[:, :c]
        band_grads["ll"] = band_grads["ll"] + g_fused_in[:, c:]
        return WaveletBands(*(band_grads[n] for n in BAND_NAMES)), g_m


def make_triplet(bands, m_k, maker: TripletMaker):
    """Functional wrapper over TripletMaker.forward."""
    triplet, _ = maker.forward(bands, m_k)
    return triplet


# ---------------------------------------------------------------------------
# Cluster summaries
# ---------------------------------------------------------------------------

def cluster_summaries(keys, values, mask, n_clusters=None):
    """Per-cluster mean keys and value sums; empty clusters are all-zero."""
    keys = np.asarray(keys, dtype=_F64)
    values = np.asarray(values, dtype=_F64)
    mask = np.asarray(mask)
    if mask.max() >= (n_clusters or mask.max() + 1):
        raise ValueError("mask values must be < n_clusters")
    k = int(mask.max()) + 1 if n_clusters is None else n_clusters
    heads = keys.shape[0]
    occ = np.bincount(mask, minlength=k)
    key_sums = np.zeros((heads, k, keys.shape[2]), dtype=_F64)
    val_sums = np.zeros((heads, k, values.shape[2]), dtype=_F64)
    np.add.at(key_sums, (slice(None), mask), keys)
    np.add.at(val_sums, (slice(None), mask), values)
    denom = np.maximum(occ, 1).astype(_F64)
    mean_keys = key_sums / denom[None, :, None]
    mean_keys[:, occ == 0] = 0.0
    return ClusterKeySummary(mean_keys=mean_keys, value_sums=val_sums,
                             occupancy=occ)


# ---------------------------------------------------------------------------
# Attention: dense oracle and the sparse fast path
# ---------------------------------------------------------------------------

def _apply_f_out(concat_tokens, f_out):
    if f_out is None:
        return concat_tokens
    if isinstance(f_out, Linear):
        return f_out.forward(concat_tokens)[0]
    if isinstance(f_out, LinearMap):
        return linear(concat_tokens, f_out)
    raise TypeError("f_out must be a Linear block or a LinearMap")


def crsa_dense_oracle(triplet, summary, mask, band, f_out=None):
    """Reference path: build the full N x N bifurcated score matrix.

    A[i, j] = Q_i . K_j when M(i) == M(j), else Q_i . mean_key[M(j)];
    output = softmax(A / sqrt(d)) V per head, heads concatenated, then
    projected by f_out when given. Small-N use only.
    """
    q = np.asarray(triplet.queries[band], dtype=_F64)
    k = np.asarray(triplet.keys, dtype=_F64)
    v = np.asarray(triplet.values, dtype=_F64)
    mask = np.asarray(mask)
    d = q.shape[2]
    intra = q @ k.transpose(0, 2, 1)
    inter_by_cluster = q @ summary.mean_keys.transpose(0, 2, 1)   # (h,N,K)
    inter = inter_by_cluster[:, :, mask]                          # (h,N,N)
    same = mask[:, None] == mask[None, :]
    scores = np.where(same[None], intra, inter) / math.sqrt(d)
    weights = softmax(scores, axis=2)
    out = merge_heads(weights @ v)
    return _apply_f_out(out, f_out)


def _crsa_score_flops(occ, d, heads):
    k = len(occ)
    return int(heads) * int(2 * d) * int(
        sum(int(n) * (int(n) + k - 1) for n in occ))


def dense_score_flops(n, d, heads):
    return int(heads) * 2 * int(n) * int(n) * int(d)


def _crsa_core_forward(q, k, v, summary, mask):
    """Sparse attention for one band. Returns (out (h,N,dv), cache)."""
    h, n, d = q.shape
    dv = v.shape[2]
    occ = summary.occupancy
    occf = occ.astype(_F64)
    nonempty = occ > 0
    scale = 1.0 / math.sqrt(d)
    out = np.zeros((h, n, dv), dtype=_F64)
    per_cluster = []
    for c in range(len(occ)):
        rows = np.flatnonzero(mask == c)
        if rows.size == 0:
            per_cluster.append(None)
            continue
        qc = q[:, rows, :]
        s_intra = qc @ k[:, rows, :].transpose(0, 2, 1) * scale   # (h,nc,nc)
        t_inter = qc @ summary.mean_keys.transpose(0, 2, 1) * scale  # (h,nc,K)
        foreign = nonempty.copy()
        foreign[c] = False
        row_max = s_intra.max(axis=2)
        if foreign.any():
            row_max = np.maximum(row_max, t_inter[:, :, foreign].max(axis=2))
        e = np.exp(s_intra - row_max[:, :, None])
        f = np.exp(t_inter - row_max[:, :, None])
        f[:, :, ~foreign] = 0.0
        z = e.sum(axis=2) + f @ occf
        oc = (e @ v[:, rows, :] + f @ summary.value_sums) / z[:, :, None]
        out[:, rows, :] = oc
        per_cluster.append((rows, e, f, z, oc))
    return out, per_cluster


def _crsa_core_backward(g_out, q, k, v, summary, mask, per_cluster):
    """Backward of the sparse path.

    Returns (gq, gk_direct, gv_direct, g_mean_keys, g_value_sums); the
    caller folds the summary gradients back onto members (mean_keys is a
    mean, value_sums a sum over each cluster's member rows).
    """
    h, n, d = q.shape
    scale = 1.0 / math.sqrt(d)
    occf = summary.occupancy.astype(_F64)
    gq = np.zeros_like(q)
    gk = np.zeros_like(k)
    gv = np.zeros_like(v)
    gkbar = np.zeros_like(summary.mean_keys)
    gvsum = np.zeros_like(summary.value_sums)
    for c, entry in enumerate(per_cluster):
        if entry is None:
            continue
        rows, e, f, z, oc = entry
        go = g_out[:, rows, :]
        zi = 1.0 / z[:, :, None]
        a = e * zi
        b = f * zi
        beta = np.einsum("hnd,hnd->hn", go, oc)
        ds = a * (go @ v[:, rows, :].transpose(0, 2, 1) - beta[:, :, None])
        dt = b * (go @ summary.value_sums.transpose(0, 2, 1)
                  - occf[None, None, :] * beta[:, :, None])
        gq[:, rows, :] += (ds @ k[:, rows, :] + dt @ summary.mean_keys) * scale
        gk[:, rows, :] += ds.transpose(0, 2, 1) @ q[:, rows, :] * scale
        gkbar += dt.transpose(0, 2, 1) @ q[:, rows, :] * scale
        gv[:, rows, :] += a.transpose(0, 2, 1) @ go
        gvsum += b.transpose(0, 2, 1) @ go
    return gq, gk, gv, gkbar, gvsum


def scatter_summary_grads(gk, gv, gkbar, gvsum, mask, occupancy):
    """Fold summary gradients back to per-token key/value gradients."""
    occf = np.maximum(occupancy, 1).astype(_F64)
    gk += gkbar[:, mask, :] / occf[None, mask, None]
    gv += gvsum[:, mask, :]
    return gk, gv


def crsa_sparse(triplet, summary, mask, band, f_out=None):
    """Cluster-routed sparse attention; equals the dense oracle to 1e-5.

    Never materializes N x N: per query, exact scores against own-cluster
    keys and one shared score per foreign cluster with occupancy
    multiplicity. Returns (output, FlopReport); score_flops is
    heads * sum_c |c| * (|c| + K - 1) * 2d.
    """
    q = np.asarray(triplet.queries[band], dtype=_F64)
    k = np.asarray(triplet.keys, dtype=_F64)
    v = np.asarray(triplet.values, dtype=_F64)
    mask = np.asarray(mask)
    out, _ = _crsa_core_forward(q, k, v, summary, mask)
    heads, _, d = q.shape
    dv = v.shape[2]
    score = _crsa_score_flops(summary.occupancy, d, heads)
    agg = _crsa_score_flops(summary.occupancy, dv, heads)
    report = FlopReport(score_flops=score, aggregate_flops=agg,
                        total_flops=score + agg, mode="crsa")
    return _apply_f_out(merge_heads(out), f_out), report


# ---------------------------------------------------------------------------
# Masked attention variants (ablation/benchmark only)
# ---------------------------------------------------------------------------

def variant_mask(mode, grid_hw, window=4, bandwidth=8, cross_width=32):
    """Boolean (N, N) allowed-pair mask for one ablation mode.

    local_block: non-overlapping window x window spatial windows.
    banded: |i - j| <= bandwidth in the flattened sequence.
    global_cross: 2|row_i - row_j| < cross_width or 2|col_i - col_j| <
    cross_width (a thick horizontal-plus-vertical cross).
    """
    h, w = grid_hw
    n = h * w
    rows, cols = np.divmod(np.arange(n), w)
    if mode == "local_block":
        block = (rows // window) * ((w + window - 1) // window) + cols // window
        return block[:, None] == block[None, :]
    if mode == "banded":
        idx = np.arange(n)
        return np.abs(idx[:, None] - idx[None, :]) <= bandwidth
    if mode == "global_cross":
        dr = np.abs(rows[:, None] - rows[None, :])
        dc = np.abs(cols[:, None] - cols[None, :])
        return (2 * dr < cross_width) | (2 * dc < cross_width)
    raise ValueError(f"unknown attention variant {mode!r}")


def masked_attention_variant(triplet, mode, params):
    """Softmax attention restricted to a boolean mask pattern.

    params: dict with grid_hw and optionally band/window/bandwidth/
    cross_width. Disallowed entries are -inf before the softmax. Returns
    (output (N, heads*d_v), FlopReport) with FLOPs counted over allowed
    pairs only.
    """
    band = params.get("band", "ll")
    q = np.asarray(triplet.queries[band], dtype=_F64)
    k = np.asarray(triplet.keys, dtype=_F64)
    v = np.asarray(triplet.values, dtype=_F64)
    heads, n, d = q.shape
    allowed = variant_mask(
        mode, params["grid_hw"], window=params.get("window", 4),
        bandwidth=params.get("bandwidth", 8),
        cross_width=params.get("cross_width", 32))
    if allowed.shape != (n, n):
        raise ValueError("grid_hw inconsistent with token count")
    scores = q @ k.transpose(0, 2, 1) / math.sqrt(d)
    scores = np.where(allowed[None], scores, -np.inf)
    scores -= scores.max(axis=2, keepdims=True)
    e = np.exp(scores)
    weights = e / e.sum(axis=2, keepdims=True)
    out = merge_heads(weights @ v)
    pairs = int(allowed.sum())
    score = heads * 2 * d * pairs
    agg = heads * 2 * v.shape[2] * pairs
    return out, FlopReport(score_flops=score, aggregate_flops=agg,
                           total_flops=score + agg, mode=mode)


def dense_attention_report(n, d, dv, heads):
    score = dense_score_flops(n, d, heads)
    agg = dense_score_flops(n, dv, heads)
    return FlopReport(score_flops=score, aggregate_flops=agg,
                      total_flops=score + agg, mode="dense")


# ---------------------------------------------------------------------------
# GDFN
# ---------------------------------------------------------------------------

class GdfnBlock(Block):
    """x + Proj(GELU(phi1(LN(x))) * phi2(LN(x))), phi depthwise 3x3.

    Proj is zero-initialized, so a fresh block is the identity.
    """

    def __init__(self, channels, rng):
        self.ln = LayerNorm(channels)
        self.phi1 = DepthwiseConv2d(channels, 3, rng)
        self.phi2 = DepthwiseConv2d(channels, 3, rng)
        self.proj = Conv2d(channels, channels, 1, rng, zero_init=True)

    def forward(self, x):
        x64 = np.asarray(x, dtype=_F64)
        hw = x64.shape[2:]
        t = to_tokens(x64)
        ln_t, c_ln = self.ln.forward(t)
        ln_img = from_tokens(ln_t, hw)
        h1, c1 = self.phi1.forward(ln_img)
        h2, c2 = self.phi2.forward(ln_img)
        g1 = gelu(h1)
        gated = g1 * h2
        y, cp = self.proj.forward(gated)
        out = x64 + y
        cache = (c_ln, c1, c2, cp, h1, h2, g1, hw)
        return out, cache

    def backward(self, g, cache):
        c_ln, c1, c2, cp, h1, h2, g1, hw = cache
        g = np.asarray(g, dtype=_F64)
        g_gated = self.proj.backward(g, cp)
        g_g1 = g_gated * h2
        g_h2 = g_gated * g1
        g_h1 = gelu_backward(g_g1, h1)
        g_ln_img = self.phi1.backward(g_h1, c1) + self.phi2.backward(g_h2, c2)
        g_t = self.ln.backward(to_tokens(g_ln_img), c_ln)
        return g + from_tokens(g_t, hw)


def gdfn(x, block: GdfnBlock):
    """Functional wrapper over GdfnBlock.forward."""
    out, _ = block.forward(x)
    if np.asarray(x).dtype == np.float32:
        out = out.astype(np.float32)
    return out


# ---------------------------------------------------------------------------
# CRSA block and the cascaded CFA stage
# ---------------------------------------------------------------------------

class CrsaBlock(Block):
    """Triplet generation + per-band sparse attention + output projection."""

    def __init__(self, channels, heads, rng):
        self.triplet = TripletMaker(channels, heads, rng)
        self.f_out = Linear(channels, channels, rng, zero_init=True)
        self.heads = heads

    def forward(self, bands: WaveletBands, m_src, mask, n_clusters):
        triplet, tcache = self.triplet.forward(bands, m_src)
        summary = cluster_summaries(triplet.keys, triplet.values, mask,
                                    n_clusters)
        hw = bands.ll.shape[2:]
        outs = {}
        band_caches = {}
        for name in BAND_NAMES:
            core, per_cluster = _crsa_core_forward(
                triplet.queries[name], triplet.keys, triplet.values,
                summary, mask)
            tokens = merge_heads(core)
            proj, cproj = self.f_out.forward(tokens)
            outs[name] = from_tokens(proj, hw)
            band_caches[name] = (per_cluster, cproj)
        out = idwt2(WaveletBands(*(outs[n] for n in BAND_NAMES)))
        cache = (triplet, summary, mask, tcache, band_caches, hw)
        return out, cache

    def backward(self, g_out, cache):
        triplet, summary, mask, tcache, band_caches, hw = cache
        g_bands = dwt2(np.asarray(g_out, dtype=_F64))
        gq = {}
        gk = np.zeros_like(triplet.keys, dtype=_F64)
        gv = np.zeros_like(triplet.values, dtype=_F64)
        gkbar = np.zeros_like(summary.mean_keys)
        gvsum = np.zeros_like(summary.value_sums)
        for name, g_band in zip(BAND_NAMES, g_bands):
            per_cluster, cproj = band_caches[name]
            g_tokens = self.f_out.backward(to_tokens(g_band), cproj)
            g_core = split_heads(g_tokens, self.heads)
            bq, bk, bv, bkbar, bvsum = _crsa_core_backward(
                g_core, np.asarray(triplet.queries[name], dtype=_F64),
                np.asarray(triplet.keys, dtype=_F64),
                np.asarray(triplet.values, dtype=_F64),
                summary, mask, per_cluster)
            gq[name] = bq
            gk += bk
            gv += bv
            gkbar += bkbar
            gvsum += bvsum
        gk, gv = scatter_summary_grads(gk, gv, gkbar, gvsum, mask,
                                       summary.occupancy)
        return self.triplet.backward(gq, gk, gv, tcache)


class CfaStage(Block):
    """CRSA -> GDFN -> fresh cluster partition -> cascaded CRSA.

    Wiring contract: output = crsa2 + gdfn_out, and the first CRSA's
    residual base is the zero-detail wavelet upsample of m_k, so with all
    attention/GDFN projections zero-initialized the stage output is exactly
    ll_upsample(m_k) (the documented identity-at-init trace). The output
    doubles m_k's spatial size.
    """

    def __init__(self, channels, heads, rng, lam=0.1, tau=0.1,
                 cluster_iters=3, seed=0):
        self.crsa1 = CrsaBlock(channels, heads, rng)
        self.gdfn = GdfnBlock(channels, rng)
        self.crsa2 = CrsaBlock(channels, heads, rng)
        self.lam = lam
        self.tau = tau
        self.cluster_iters = cluster_iters
        self.seed = seed

    def forward(self, p_enh, m_k, assignment, cluster_k=None,
                assignment2=None):
        p_enh = np.asarray(p_enh)
        bands_p = dwt2(p_enh)
        if bands_p.ll.shape[2:] != np.asarray(m_k).shape[2:]:
            raise ValueError("m_k must live at band resolution")
        if assignment.mask.size != bands_p.ll.shape[2] * bands_p.ll.shape[3]:
            raise ValueError("inherited mask resolution mismatch")
        a1, c1 = self.crsa1.forward(bands_p, m_k, assignment.mask,
                                    assignment.n_clusters)
        f1 = a1 + ll_upsample(np.asarray(m_k, dtype=_F64))
        x, cg = self.gdfn.forward(f1)
        bands_x = dwt2(x)
        if assignment2 is None:
            k2 = cluster_k or assignment.n_clusters
            assignment2 = crp(bands_x.ll, k2, lam=self.lam, tau=self.tau,
                              iters=self.cluster_iters, seed=self.seed)
        a2, c2 = self.crsa2.forward(bands_x, bands_x.ll, assignment2.mask,
                                    assignment2.n_clusters)
        m_next = a2 + x
        cache = (c1, cg, c2)
        return m_next, assignment2, cache

    def backward(self, g, cache):
        c1, cg, c2 = cache
        g = np.asarray(g, dtype=_F64)
        gb_x, g_src2 = self.crsa2.backward(g, c2)
        gb_x = WaveletBands(gb_x.ll + g_src2, gb_x.lh, gb_x.hl, gb_x.hh)
        g_x = g + idwt2(gb_x)
        g_f1 = self.gdfn.backward(g_x, cg)
        g_mk = dwt2(g_f1).ll
        gb_p, g_src1 = self.crsa1.backward(g_f1, c1)
        g_mk = g_mk + g_src1
        g_p = idwt2(gb_p)
        return g_p, g_mk


def cfa_forward(p_enhanced, m_k, assignment, stage: CfaStage, cluster_k=None):
    """Functional wrapper: one fused-stage pass, returns M_{k+1}."""
    out, _, _ = stage.forward(p_enhanced, m_k, assignment,
                              cluster_k=cluster_k)
    return out
