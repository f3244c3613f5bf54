"""Region-dynamic convolution and SAR cascade tests."""

import numpy as np
import pytest

from regionfuse.clustering import ClusterAssignment, crp
from regionfuse.spatial_refinement import (
    KernelGenerators,
    LowRankKernelSet,
    SacBlock,
    SpatialRefiner,
    cluster_centroids,
    generate_kernels,
    region_conv,
    sac_block,
    sar_forward,
)
from regionfuse.tensor_core import conv2d, finite_diff_grad, unfold
from regionfuse.wavelet import WaveletBands, dwt2, idwt2


def make_assignment(mask, k):
    mask = np.asarray(mask, dtype=np.int64)
    n = mask.size
    soft = np.zeros((n, k))
    soft[np.arange(n), mask] = 1.0
    return ClusterAssignment(soft=soft, mask=mask,
                             centers_f=np.zeros((k, 1)),
                             centers_s=np.zeros((k, 2)),
                             occupancy=np.bincount(mask, minlength=k))


def random_kernels(rng, k_clusters, cin, cout, k, rank=None):
    rank = rank or min(cin * k, k * cout)
    a = rng.standard_normal((k_clusters, cin * k, rank))
    b = rng.standard_normal((k_clusters, rank, k * cout))
    m = a @ b
    w = m.reshape(k_clusters, cin, k, k, cout).reshape(k_clusters, cin, k * k, cout)
    bias = rng.standard_normal((k_clusters, cout))
    return LowRankKernelSet(a=a, b=b, w=w, bias=bias)


def kernel_to_conv_weight(kernels, idx, cin, cout, k):
    """(C_in, k*k, C_out) cluster kernel -> conv2d (C_out, C_in, k, k)."""
    w = kernels.w[idx].reshape(cin, k, k, cout)
    return w.transpose(3, 0, 1, 2)


class TestClusterCentroids:
    def test_single_cluster_is_global_mean(self):
        rng = np.random.default_rng(0)
        patches = rng.standard_normal((16, 9))
        c, counts = cluster_centroids(patches, np.zeros(16, dtype=int), 1)
        np.testing.assert_allclose(c[0], patches.mean(axis=0))
        assert counts[0] == 16

    def test_constant_patch_clusters(self):
        patches = np.vstack([np.full((4, 6), 2.0), np.full((4, 6), -3.0)])
        mask = np.array([0] * 4 + [1] * 4)
        c, _ = cluster_centroids(patches, mask, 2)
        np.testing.assert_allclose(c[0], 2.0)
        np.testing.assert_allclose(c[1], -3.0)

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(1)
        patches = rng.standard_normal((16, 12))
        mask = rng.integers(0, 3, size=16)
        c, counts = cluster_centroids(patches, mask, 3)
        for i in range(3):
            rows = [patches[j] for j in range(16) if mask[j] == i]
            want = np.mean(rows, axis=0) if rows else np.zeros(12)
            assert np.max(np.abs(c[i] - want)) < 1e-6
            assert counts[i] == len(rows)

    def test_empty_cluster_zero(self):
        patches = np.ones((4, 5))
        c, counts = cluster_centroids(patches, np.zeros(4, dtype=int), 3)
        np.testing.assert_allclose(c[1], 0.0)
        np.testing.assert_allclose(c[2], 0.0)
        assert counts[1] == 0


class TestGenerateKernels:
    def test_identical_centroids_identical_kernels(self):
        rng = np.random.default_rng(2)
        gens = KernelGenerators(2, 2, 3, 2, rng, identity_init=False)
        c = rng.standard_normal(18)
        kernels = generate_kernels(np.stack([c, c, c]), gens)
        np.testing.assert_array_equal(kernels.w[0], kernels.w[1])
        np.testing.assert_array_equal(kernels.w[0], kernels.w[2])

    def test_zero_mlps_zero_output(self):
        rng = np.random.default_rng(3)
        gens = KernelGenerators(2, 2, 3, 2, rng, identity_init=False)
        for _, p in gens.named_params():
            p.value[...] = 0.0
        kernels = generate_kernels(rng.standard_normal((2, 18)), gens)
        np.testing.assert_allclose(kernels.w, 0.0)
        np.testing.assert_allclose(kernels.bias, 0.0)
        band = rng.standard_normal((1, 2, 4, 4)).astype(np.float32)
        mask = np.zeros(16, dtype=int)
        np.testing.assert_allclose(region_conv(band, mask, kernels), 0.0)

    def test_rank_bound_holds(self):
        rng = np.random.default_rng(4)
        cin = cout = 4
        k = 3
        gens = KernelGenerators(cin, cout, k, 1, rng, identity_init=False)
        kernels = generate_kernels(rng.standard_normal((3, k * k * cin)), gens)
        for i in range(3):
            m = kernels.a[i] @ kernels.b[i]      # (cin*k, k*cout)
            s = np.linalg.svd(m, compute_uv=False)
            numeric_rank = int(np.sum(s > 1e-9 * s[0]))
            assert numeric_rank <= k  # rank-1 factors give matrix rank <= 1
            assert numeric_rank <= 1

    def test_w_is_exact_reshape_of_factors(self):
        rng = np.random.default_rng(5)
        gens = KernelGenerators(3, 2, 3, 2, rng, identity_init=False)
        kernels = generate_kernels(rng.standard_normal((2, 27)), gens)
        m = kernels.a @ kernels.b
        w2 = m.reshape(2, 3, 3, 3, 2).reshape(2, 3, 9, 2)
        np.testing.assert_array_equal(kernels.w, w2)

    def test_rank_validation(self):
        with pytest.raises(ValueError, match="rank"):
            KernelGenerators(1, 1, 3, 10, np.random.default_rng(0))


class TestRegionConv:
    def test_single_cluster_equals_conv2d(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            cin = int(rng.integers(1, 4))
            cout = int(rng.integers(1, 4))
            h = 2 * int(rng.integers(2, 6))
            band = rng.standard_normal((1, cin, h, h)).astype(np.float32)
            kernels = random_kernels(rng, 1, cin, cout, 3)
            got = region_conv(band, np.zeros(h * h, dtype=int), kernels)
            w = kernel_to_conv_weight(kernels, 0, cin, cout, 3)
            want = conv2d(band, w, kernels.bias[0], padding=1)
            assert np.max(np.abs(got - want)) < 1e-6

    def test_split_image_matches_per_half_conv(self):
        rng = np.random.default_rng(7)
        cin, cout, k = 2, 3, 3
        band = rng.standard_normal((1, cin, 8, 8)).astype(np.float32)
        kernels = random_kernels(rng, 2, cin, cout, k)
        mask = np.zeros((8, 8), dtype=int)
        mask[:, 4:] = 1
        got = region_conv(band, mask.ravel(), kernels)
        for i in range(2):
            w = kernel_to_conv_weight(kernels, i, cin, cout, k)
            want = conv2d(band, w, kernels.bias[i], padding=1)
            cols = slice(0, 3) if i == 0 else slice(5, 8)  # interior only
            np.testing.assert_allclose(got[0, :, :, cols],
                                       want[0, :, :, cols], atol=1e-6)

    def test_zero_input_gives_bias_field(self):
        rng = np.random.default_rng(8)
        kernels = random_kernels(rng, 2, 1, 2, 3)
        band = np.zeros((1, 1, 4, 4), dtype=np.float32)
        mask = np.array([0] * 8 + [1] * 8)
        out = region_conv(band, mask, kernels)
        flat = out[0].transpose(1, 2, 0).reshape(16, 2)
        np.testing.assert_allclose(
            flat[:8], np.broadcast_to(kernels.bias[0], (8, 2)), atol=1e-6)
        np.testing.assert_allclose(
            flat[8:], np.broadcast_to(kernels.bias[1], (8, 2)), atol=1e-6)

    def test_mask_resolution_mismatch(self):
        rng = np.random.default_rng(9)
        kernels = random_kernels(rng, 1, 1, 1, 3)
        with pytest.raises(ValueError, match="mask"):
            region_conv(np.zeros((1, 1, 4, 4), dtype=np.float32),
                        np.zeros(9, dtype=int), kernels)


class TestSacBlock:
    def test_identity_at_init(self):
        rng = np.random.default_rng(10)
        blk = SacBlock(2, 3, 2, rng, identity_init=True)
        bands = dwt2(rng.standard_normal((1, 2, 8, 8)).astype(np.float32))
        asg = make_assignment(np.zeros(16, dtype=int), 1)
        out = sac_block(bands, asg, blk)
        for got, want in zip(out, bands):
            np.testing.assert_allclose(got, want, atol=1e-6)

    def test_constant_bands_single_cluster_constant_output(self):
        rng = np.random.default_rng(11)
        blk = SacBlock(2, 3, 2, rng, identity_init=False)
        const = WaveletBands(*(np.full((1, 2, 6, 6), v, dtype=np.float32)
                               for v in (1.0, 0.5, -0.5, 0.25)))
        asg = make_assignment(np.zeros(36, dtype=int), 1)
        out = sac_block(const, asg, blk)
        # interior pixels see identical patches -> identical outputs
        for band in out:
            inner = np.asarray(band)[0, :, 1:-1, 1:-1]
            want = np.broadcast_to(inner[:, :1, :1], inner.shape)
            np.testing.assert_allclose(inner, want, atol=1e-6)

    def test_generator_gradients_match_finite_differences(self):
        from gradcheck_util import check_param_grads

        rng = np.random.default_rng(12)
        blk = SacBlock(2, 3, 2, rng, hidden=8, identity_init=False)
        x = rng.standard_normal((1, 2, 8, 8))
        mask = (np.arange(16) % 3).astype(np.int64)
        bands = dwt2(x)

        def loss_fn():
            out, _ = blk.forward(bands, mask, 3)
            return float(sum(np.sum(np.asarray(b) ** 2) for b in out))

        out, cache = blk.forward(bands, mask, 3)
        blk.zero_grad()
        g_bands = out.map(lambda b: 2.0 * np.asarray(b, dtype=np.float64))
        blk.backward(g_bands, cache)
        checked = check_param_grads(loss_fn, blk.named_params(), rng,
                                    rel_tol=1e-3, min_checked=20)
        assert checked > 20


class TestSarForward:
    def test_zeroed_generators_roundtrip(self):
        rng = np.random.default_rng(13)
        ref = SpatialRefiner(4, rng, cluster_k=4, identity_init=True)
        for name, p in ref.named_params():
            if "mlp_a" in name or "mlp_b" in name or "mlp_bias" in name:
                p.value[...] = 0.0
        p = rng.standard_normal((1, 4, 16, 16)).astype(np.float32)
        enhanced, _ = sar_forward(p, ref)
        assert np.max(np.abs(enhanced - p)) < 1e-5

    def test_identity_init_is_roundtrip(self):
        rng = np.random.default_rng(14)
        ref = SpatialRefiner(4, rng, cluster_k=4, identity_init=True)
        p = rng.standard_normal((1, 4, 16, 16)).astype(np.float32)
        enhanced, assignments = sar_forward(p, ref)
        assert np.max(np.abs(enhanced - p)) < 1e-5
        assert len(assignments) == 1
        assert assignments[0].mask.shape == (64,)

    def test_output_shape(self):
        rng = np.random.default_rng(15)
        ref = SpatialRefiner(8, rng, cluster_k=4)
        p = rng.standard_normal((1, 8, 16, 16)).astype(np.float32)
        enhanced, _ = sar_forward(p, ref)
        assert enhanced.shape == (1, 8, 16, 16)

    def test_cluster_count_changes_output(self):
        rng = np.random.default_rng(16)
        ref = SpatialRefiner(2, rng, cluster_k=1, identity_init=False)
        # two-texture image: smooth left half, oscillating right half
        p = np.zeros((1, 2, 16, 16), dtype=np.float32)
        p[0, :, :, :8] = 0.2
        p[0, 0, :, 8:] = (np.indices((16, 8)).sum(0) % 2).astype(np.float32)
        p[0, 1, :, 8:] = 0.8
        out1, _ = sar_forward(p, ref, cluster_k=1)
        out4, _ = sar_forward(p, ref, cluster_k=4)
        rel = np.max(np.abs(out1 - out4)) / max(np.max(np.abs(out1)), 1e-9)
        assert rel > 1e-3

    def test_full_refiner_gradcheck_frozen_assignment(self):
        rng = np.random.default_rng(17)
        ref = SpatialRefiner(4, rng, cluster_k=4, hidden=8, rank=2,
                             identity_init=False)
        p = rng.standard_normal((1, 4, 8, 8))
        bands = dwt2(p)
        assignment = crp(bands.ll, 4, iters=3, seed=0)

        def loss_fn():
            enhanced, _, _ = ref.forward(p, assignment=assignment)
            return float(np.sum(np.asarray(enhanced) ** 2))

        enhanced, _, caches = ref.forward(p, assignment=assignment)
        ref.zero_grad()
        ref.backward(2.0 * np.asarray(enhanced, dtype=np.float64), caches)

        from gradcheck_util import check_param_grads

        params = dict(ref.named_params())
        sampled = rng.choice(sorted(params), size=8, replace=False)
        check_param_grads(loss_fn, [(n, params[n]) for n in sampled], rng,
                          n_per_param=1, rel_tol=1e-3)

    def test_input_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(18)
        ref = SpatialRefiner(2, rng, cluster_k=2, hidden=6, rank=1,
                             identity_init=False)
        p = rng.standard_normal((1, 2, 4, 4))
        assignment = crp(dwt2(p).ll, 2, iters=2, seed=0)

        def f(x):
            enhanced, _, _ = ref.forward(x, assignment=assignment)
            return float(np.sum(np.asarray(enhanced) ** 2))

        enhanced, _, caches = ref.forward(p, assignment=assignment)
        ref.zero_grad()
        gx = ref.backward(2.0 * np.asarray(enhanced, dtype=np.float64), caches)
        fd = finite_diff_grad(f, p, eps=1e-4)
        assert np.max(np.abs(gx - fd)) / max(np.max(np.abs(fd)), 1e-9) < 1e-3


class TestPixelLocality:
    def test_paired_perturbation_inside_cluster(self):
        # +d/-d at two interior pixels of the same cluster keeps every
        # centroid exactly unchanged at every block, so the influence of the
        # perturbation is confined to the 3-block receptive field (radius 3).
        rng = np.random.default_rng(19)
        channels = 2
        blocks = [SacBlock(channels, 3, 2, rng, identity_init=False)
                  for _ in range(3)]
        h = w = 16
        mask = np.zeros((h, w), dtype=int)
        mask[:, 8:] = 1  # left/right halves
        mask = mask.ravel()

        def cascade(bands):
            for blk in blocks:
                bands, _ = blk.forward(bands, mask, 2)
            return bands

        base = rng.standard_normal((1, channels, h, w)).astype(np.float32)
        bands = WaveletBands(base.copy(), base * 0.5, base * 0.25, base * 0.1)
        out0 = cascade(bands)

        perturbed = bands.map(lambda b: b.copy())
        d = 0.37
        # two pixels deep inside the right cluster, same row, cols 11 and 13
        perturbed.lh[0, 0, 8, 11] += d
        perturbed.lh[0, 0, 8, 13] -= d
        out1 = cascade(perturbed)

        diff = np.abs(np.asarray(out1.lh) - np.asarray(out0.lh))[0, 0]
        # outside radius 3 of both perturbed pixels: unchanged
        assert np.max(diff[:, :8]) < 1e-6
        assert np.max(diff[:4, :]) < 1e-6
        assert np.max(diff[13:, :]) < 1e-6
        # the perturbation itself is visible
        assert np.max(diff) > 1e-3
        # other bands untouched entirely (no cross-band mixing)
        np.testing.assert_allclose(np.asarray(out1.hh),
                                   np.asarray(out0.hh), atol=1e-6)

    def test_fixed_kernels_single_pixel_locality(self):
        rng = np.random.default_rng(20)
        cin = cout = 2
        kernels = random_kernels(rng, 2, cin, cout, 3)
        h = w = 16
        mask = np.zeros((h, w), dtype=int)
        mask[:, 8:] = 1
        mask = mask.ravel()

        def cascade(x):
            for _ in range(3):
                x = x + region_conv(x, mask, kernels)
            return x

        base = rng.standard_normal((1, cin, h, w)).astype(np.float32)
        out0 = cascade(base)
        bumped = base.copy()
        bumped[0, 0, 8, 12] += 1.0
        out1 = cascade(bumped)
        diff = np.abs(out1 - out0)[0].max(axis=0)
        assert np.max(diff[:, :9]) < 1e-6   # cols <= 8 are > 3 away
        assert np.max(diff[:5, :]) < 1e-6
        assert np.max(diff[12:, :]) < 1e-6
        assert diff[8, 12] > 1e-3
