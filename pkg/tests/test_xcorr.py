"""Correlation head: fusion, kernel extraction, fast/full correlation against
independent oracles, multi-scale aggregation, decode, and the MAC audit."""

import numpy as np
import pytest

from voltrack import autodiff as ad, xcorr
from voltrack.errors import ContractError, ShapeError
from voltrack.model import ModelConfig


def naive_same_corr(kernel, S):
    """Direct-loop zero-padded correlation normalized by the accumulated
    product count, independent of the conv3d implementation."""
    k = np.asarray(kernel)
    s = np.asarray(S)
    _, d, kz, ky, kx = k.shape
    b, _, sz, sy, sx = s.shape
    pz, py, px = kz // 2, ky // 2, kx // 2
    padded = np.pad(s, ((0, 0), (0, 0), (pz, pz), (py, py), (px, px)))
    out = np.zeros((b, 1, sz, sy, sx))
    for z in range(sz):
        for y in range(sy):
            for x in range(sx):
                win = padded[:, :, z:z + kz, y:y + ky, x:x + kx]
                out[:, 0, z, y, x] = np.sum(win * k[0], axis=(1, 2, 3, 4))
    return out / (d * kz * ky * kx)


def middle_slices(glob):
    """(z, y, x) middle-slice sub-kernels of a global kernel array."""
    g = np.asarray(glob)
    _, _, gz, gy, gx = g.shape
    return (g[:, :, gz // 2:gz // 2 + 1],
            g[:, :, :, gy // 2:gy // 2 + 1],
            g[:, :, :, :, gx // 2:gx // 2 + 1])


def make_kernels(rng, d=3, feat=(4, 8, 8), local=(3, 3, 3), glob=(3, 5, 5),
                 learned=True):
    F = ad.tensor(rng.standard_normal((1, d) + feat))
    params = {}
    xcorr.init_flatten_params(params, glob, np.float64)
    center = tuple(rng.integers(0, n) for n in feat)
    ks = xcorr.extract_kernels(F, center, params, local, glob,
                               learned_flatten=learned)
    return F, ks


class TestFuse:
    def test_elementwise_product(self):
        rng = np.random.default_rng(0)
        a = ad.tensor(rng.random((1, 2, 3, 4, 4)))
        b = ad.tensor(rng.random((1, 2, 3, 4, 4)))
        (out,) = xcorr.fuse([a], [b])
        assert np.allclose(out.data, a.data * b.data)

    def test_shape_mismatch_rejected(self):
        a = ad.tensor(np.zeros((1, 2, 3, 4, 4)))
        b = ad.tensor(np.zeros((1, 2, 3, 4, 5)))
        with pytest.raises(ShapeError):
            xcorr.fuse([a], [b])


class TestExtractKernels:
    def test_window_contents_and_center(self):
        rng = np.random.default_rng(1)
        F = ad.tensor(rng.standard_normal((1, 2, 5, 9, 9)))
        params = {}
        xcorr.init_flatten_params(params, (3, 5, 5), np.float64)
        ks = xcorr.extract_kernels(F, (2, 4, 4), params, (3, 3, 3), (3, 5, 5))
        assert ks.local.shape == (1, 2, 3, 3, 3)
        assert ks.global_.shape == (1, 2, 3, 5, 5)
        assert ks.applied_center == (2, 4, 4)
        assert np.array_equal(ks.local.data, F.data[:, :, 1:4, 3:6, 3:6])

    def test_center_clamped_near_boundary(self):
        F = ad.tensor(np.zeros((1, 1, 5, 9, 9)))
        params = {}
        xcorr.init_flatten_params(params, (3, 5, 5), np.float64)
        ks = xcorr.extract_kernels(F, (0, 0, 8), params, (3, 3, 3), (3, 5, 5))
        assert ks.applied_center == (1, 2, 6)

    def test_oversized_global_kernel_rejected(self):
        F = ad.tensor(np.zeros((1, 1, 4, 6, 6)))
        with pytest.raises(ContractError):
            xcorr.extract_kernels(F, (2, 3, 3), {}, (3, 3, 3), (5, 7, 7))

    def test_initial_flattening_selects_middle_slices(self):
        rng = np.random.default_rng(2)
        _, ks = make_kernels(rng, learned=True)
        mz, my, mx = middle_slices(ks.global_.data)
        assert np.allclose(ks.flat_z.data, mz)
        assert np.allclose(ks.flat_x.data, my)
        assert np.allclose(ks.flat_y.data, mx)


class TestCorrelation:
    def test_full_path_matches_direct_loop(self):
        rng = np.random.default_rng(3)
        for _ in range(5):
            d = int(rng.integers(1, 4))
            F, ks = make_kernels(rng, d=d)
            S = ad.tensor(rng.standard_normal((1, d, 4, 8, 8)))
            got = xcorr.correlate_full(ks, S).data
            want = naive_same_corr(ks.local.data, S.data) \
                + naive_same_corr(ks.global_.data, S.data)
            assert np.max(np.abs(got - want)) < 1e-5

    def test_fast_path_matches_slice_oracle(self):
        # middle-slice flattening: the three decomposed correlations equal
        # correlations against the global kernel's three middle slices
        rng = np.random.default_rng(4)
        for _ in range(5):
            d = int(rng.integers(1, 4))
            F, ks = make_kernels(rng, d=d, learned=False)
            S = ad.tensor(rng.standard_normal((1, d, 4, 8, 8)))
            got = xcorr.correlate_fast(ks, S).data
            want = naive_same_corr(ks.local.data, S.data)
            for sl in middle_slices(ks.global_.data):
                want = want + naive_same_corr(sl, S.data)
            assert np.max(np.abs(got - want)) < 1e-5

    def test_local_only_paths_agree(self):
        rng = np.random.default_rng(5)
        F = ad.tensor(rng.standard_normal((1, 2, 4, 8, 8)))
        ks = xcorr.extract_kernels(F, (2, 4, 4), {}, (3, 3, 3), None)
        S = ad.tensor(rng.standard_normal((1, 2, 4, 8, 8)))
        assert np.array_equal(xcorr.correlate_full(ks, S).data,
                              xcorr.correlate_fast(ks, S).data)


class TestHead:
    def test_aggregation_and_sigmoid(self):
        rng = np.random.default_rng(6)
        m1 = ad.tensor(rng.standard_normal((1, 1, 4, 8, 8)))
        m2 = ad.tensor(rng.standard_normal((1, 1, 4, 4, 4)))
        m3 = ad.tensor(rng.standard_normal((1, 1, 4, 2, 2)))
        W = ad.tensor([1.5])
        b = ad.tensor([-0.25])
        z = xcorr.head_logits(m1, m2, m3, W, b)
        y = xcorr.head(m1, m2, m3, W, b)
        up2 = ad.upsample(m2, (1, 2, 2)).data
        up3 = ad.upsample(m3, (1, 4, 4)).data
        assert np.allclose(z.data, 1.5 * (m1.data + up2 + up3) - 0.25)
        assert np.allclose(y.data, 1.0 / (1.0 + np.exp(-z.data)))

    def test_misaligned_scales_rejected(self):
        m1 = ad.tensor(np.zeros((1, 1, 4, 8, 8)))
        m2 = ad.tensor(np.zeros((1, 1, 4, 4, 4)))
        m3 = ad.tensor(np.zeros((1, 1, 4, 3, 3)))
        with pytest.raises(ShapeError):
            xcorr.head_logits(m3, m2, m1, ad.tensor([1.0]), ad.tensor([0.0]))


class TestDecode:
    def test_index_to_mm(self):
        vol = np.zeros((1, 1, 8, 16, 16))
        vol[0, 0, 4, 10, 12] = 0.9
        center, peak, idx = xcorr.decode(vol, (1, 2, 2), (2.0, 0.8, 0.8))
        assert idx == (4, 10, 12)
        assert peak == pytest.approx(0.9)
        assert center == pytest.approx((8.0, 16.0, 19.2))

    def test_tie_breaks_to_lowest_index(self):
        vol = np.full((1, 1, 2, 2, 2), 0.5)
        _, _, idx = xcorr.decode(vol, (1, 1, 1), (1, 1, 1))
        assert idx == (0, 0, 0)


class TestFlopAudit:
    def test_reference_kernel_counts(self):
        audit = xcorr.flop_audit((16, 32, 32), 64,
                                 kernel_local=(3, 3, 3),
                                 kernel_global=(7, 11, 11))
        assert audit.per_voxel_full == 847
        assert audit.per_voxel_fast == 275
        voxels, d = 16 * 32 * 32, 64
        assert audit.full_macs == voxels * d * (27 + 847)
        assert audit.fast_macs == voxels * d * (27 + 275) + 3 * d * 847
        assert audit.flatten_macs == 3 * d * 847
        assert audit.reduction == pytest.approx(1 - audit.fast_macs / audit.full_macs)
        assert audit.fast_macs / audit.full_macs <= 0.35

    def test_local_only_audit(self):
        audit = xcorr.flop_audit((4, 8, 8), 8, kernel_global=None)
        assert audit.full_macs == audit.fast_macs == 4 * 8 * 8 * 8 * 27
        assert audit.reduction == 0.0


class TestModelIntegration:
    def test_default_config_reduction_exceeds_bar(self):
        cfg = ModelConfig()
        audit = xcorr.flop_audit((16, 32, 32), cfg.embed_dim,
                                 cfg.kernel_local, cfg.kernel_global)
        assert audit.reduction >= 0.65
