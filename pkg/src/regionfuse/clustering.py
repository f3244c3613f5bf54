"""Differentiable soft K-means with a spatial penalty and hard-mask routing.

The soft assignment of pixel n to cluster k is a temperature-scaled softmax
over -(||f_n - c_k|| + lambda * ||p_n - s_k||) / tau. Hard masks are argmax
rows with a lowest-index tie-break; the straight-through estimator contract
for the hard mask is exposed by `hard_mask_ste`. Center initialization is a
deterministic spatial grid (farthest-point fallback), so results depend only
on the inputs and the seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["ClusterAssignment", "soft_assign", "kmeans_fit", "hard_mask_ste",
           "crp", "write_pgm"]


@dataclass
class ClusterAssignment:
    soft: np.ndarray        # (N, K) row-stochastic
    mask: np.ndarray        # (N,) int argmax indices
    centers_f: np.ndarray   # (K, D) feature centers
    centers_s: np.ndarray   # (K, 2) spatial centers in [0, 1]
    occupancy: np.ndarray   # (K,) hard-member counts

    @property
    def n_clusters(self):
        return self.soft.shape[1]


def _pairwise_distances(features, positions, centers_f, centers_s, lam):
    f = np.asarray(features, dtype=np.float64)
    p = np.asarray(positions, dtype=np.float64)
    cf = np.asarray(centers_f, dtype=np.float64)
    cs = np.asarray(centers_s, dtype=np.float64)
    df = np.sqrt(np.maximum(
        (f * f).sum(1)[:, None] - 2.0 * f @ cf.T + (cf * cf).sum(1)[None, :],
        0.0))
    ds = np.sqrt(np.maximum(
        (p * p).sum(1)[:, None] - 2.0 * p @ cs.T + (cs * cs).sum(1)[None, :],
        0.0))
    return df + lam * ds


def soft_assign(features, positions, centers_f, centers_s, lam, tau):
    """Row-stochastic soft assignment matrix S (N, K)."""
    if tau <= 0:
        raise ValueError("tau must be > 0")
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    d = _pairwise_distances(features, positions, centers_f, centers_s, lam)
    logits = -d / tau
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def _grid_init(features, positions, k, rng):
    """Deterministic centers: sqrt(K) x sqrt(K) spatial grid when K is a
    perfect square, otherwise farthest-point sampling on features."""
    n = features.shape[0]
    g = int(round(np.sqrt(k)))
    if g * g == k:
        targets = np.stack(np.meshgrid(
            (np.arange(g) + 0.5) / g, (np.arange(g) + 0.5) / g,
            indexing="ij"), axis=-1).reshape(-1, 2)
        idx = np.empty(k, dtype=np.int64)
        for i, t in enumerate(targets):
            idx[i] = int(np.argmin(((positions - t) ** 2).sum(1)))
    else:
        idx = np.empty(k, dtype=np.int64)
        idx[0] = int(rng.integers(n))
        d = ((features - features[idx[0]]) ** 2).sum(1)
        for i in range(1, k):
            idx[i] = int(np.argmax(d))
            d = np.minimum(d, ((features - features[idx[i]]) ** 2).sum(1))
    return features[idx].copy(), positions[idx].copy()


def kmeans_fit(features, positions, k, iters=3, lam=0.1, tau=0.1, seed=0):
    """Soft K-means: alternate soft_assign and soft-weighted center updates.

    Soft weights are never exactly zero so center updates are always
    well-defined; clusters may still be empty under the hard mask.
    """
    features = np.asarray(features, dtype=np.float64)
    positions = np.asarray(positions, dtype=np.float64)
    n = features.shape[0]
    if n < k:
        raise ValueError(f"need at least K={k} points, got {n}")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    rng = np.random.default_rng(seed)
    cf, cs = _grid_init(features, positions, k, rng)
    soft = soft_assign(features, positions, cf, cs, lam, tau)
    for _ in range(iters - 1):
        w = soft.sum(axis=0)
        cf = (soft.T @ features) / w[:, None]
        cs = (soft.T @ positions) / w[:, None]
        soft = soft_assign(features, positions, cf, cs, lam, tau)
    mask = hard_mask_ste(soft)[0]
    occ = np.bincount(mask, minlength=k)
    return ClusterAssignment(soft=soft, mask=mask, centers_f=cf, centers_s=cs,
                             occupancy=occ)


def hard_mask_ste(soft):
    """Argmax mask with the straight-through gradient contract.

    Forward: per-row argmax (ties resolved to the lowest index). Backward
    contract: a downstream gradient taken w.r.t. the one-hot encoding of the
    mask passes through to the soft probabilities *unchanged*; the returned
    callable implements exactly that identity routing. Trainable paths that
    consume the mask must therefore behave, under differentiation, like the
    same path fed with the soft matrix.
    """
    soft = np.asarray(soft)
    mask = np.argmax(soft, axis=1).astype(np.int64)

    def ste_backward(grad_onehot):
        return np.asarray(grad_onehot)

    return mask, ste_backward


def crp(ll, k, lam=0.1, tau=0.1, iters=3, seed=0):
    """Cluster Region Partition of a single-sample low-frequency tensor.

    Features are the per-pixel channel vectors of `ll` (row-major pixel
    order); positions are ((row+0.5)/H, (col+0.5)/W).
    """
    ll = np.asarray(ll)
    if ll.ndim != 4 or ll.shape[0] != 1:
        raise ValueError(f"crp expects a (1,C,H,W) tensor, got {ll.shape}")
    _, c, h, w = ll.shape
    if h * w < k:
        raise ValueError(f"{h}x{w} pixels cannot host K={k} clusters")
    features = ll[0].reshape(c, h * w).T
    rows, cols = np.divmod(np.arange(h * w), w)
    positions = np.stack([(rows + 0.5) / h, (cols + 0.5) / w], axis=1)
    return kmeans_fit(features, positions, k, iters=iters, lam=lam, tau=tau,
                      seed=seed)


def write_pgm(path, values, maxval=255):
    """Write a 2-D array of small non-negative ints as a binary PGM (P5)."""
    values = np.asarray(values)
    if values.ndim != 2:
        raise ValueError("PGM export expects a 2-D array")
    if values.min() < 0 or values.max() > maxval or maxval > 255:
        raise ValueError("values must lie in [0, maxval<=255]")
    h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode())
        fh.write(values.astype(np.uint8).tobytes())
