import math

import numpy as np
import pytest

from dspm import diffcore as dc
from dspm import matcher as mt
from dspm import mixture as mx
from dspm import synthscene as syn
from dspm.geometry import DepthDomain, scale_camera

SQRT2 = math.sqrt(2.0)


def domain():
    return DepthDomain(2.0, 6.0, 16)


def plane_views(seed=0, baseline=1.5, channels=32):
    """Rectified textured plane plus shared random zero-mean conv features,
    unit-normalized per pixel so dot products behave like cosines."""
    spec = syn.SceneSpec(seed=seed, height=48, width=64, n_views=2, n_patches=0,
                         n_cuboids=0, background_slope=0.0, parallel_views=True,
                         baseline=baseline, texture_base_freq=0.9, texture_amp=0.5,
                         texture_octaves=5)
    records = syn.generate_scene(spec)
    rng = np.random.default_rng(seed + 100)
    k = rng.standard_normal((channels, 3, 5, 5)).astype(np.float32)
    k -= k.mean(axis=(2, 3), keepdims=True)  # zero-sum taps ignore flat shading
    feats = []
    for rec in records:
        img = dc.Array(rec.image.transpose(2, 0, 1))
        f = dc.conv2d(img, dc.Array(k)).data
        # cosine-style features at unit per-channel scale (norm sqrt(C)),
        # the magnitude regime batch-normed encoder features live in
        f *= np.sqrt(channels) / (np.linalg.norm(f, axis=0, keepdims=True) + 1e-6)
        feats.append(dc.Array(f))
    return records, feats


def visible_mask(ref_cam, src_cam, dom, shape, m, margin=4):
    """Pixels whose warp stays inside the source frame for every candidate."""
    from dspm.geometry import pixel_grid, warp_terms

    h, w = shape
    A, b = warp_terms(ref_cam, src_cam)
    g = pixel_grid(h, w)
    ones = np.ones(h * w)
    mask = np.zeros(shape, bool)
    mask[margin:-margin, margin:-margin] = True
    for z in ((0.5) / m, (m - 0.5) / m):
        invd = z * (1.0 / dom.d_min - 1.0 / dom.d_max) + 1.0 / dom.d_max
        num = A @ np.stack([g[0].ravel(), g[1].ravel(), ones]) + np.outer(b, ones * invd)
        x = (num[0] / num[2]).reshape(shape)
        y = (num[1] / num[2]).reshape(shape)
        mask &= (x >= 3) & (x <= w - 4) & (y >= 3) & (y <= h - 4)
    return mask


class TestCostVolumes:
    def test_identical_view_cannot_distinguish_candidates(self):
        rng = np.random.default_rng(0)
        feat = dc.Array(rng.standard_normal((8, 6, 8)).astype(np.float32))
        records = syn.generate_scene(syn.SceneSpec(seed=0, height=48, width=64))
        cam = scale_camera(records[0].camera, 1.0 / 8.0)
        cands = dc.Array(rng.random((5, 6, 8)).astype(np.float32))
        vols = mt.build_cost_volumes(feat, [feat], cam, [cam], cands, domain(), groups=4)
        s = vols[0].data
        for j in range(1, 5):
            np.testing.assert_allclose(s[:, j], s[:, 0], atol=1e-5)
        self_corr = (feat.data.reshape(4, 2, 6, 8) ** 2).sum(axis=1) * (4.0 / 8.0)
        np.testing.assert_allclose(s[:, 0], self_corr, atol=1e-4)

    def test_zero_source_features(self):
        rng = np.random.default_rng(1)
        feat = dc.Array(rng.standard_normal((8, 6, 8)).astype(np.float32))
        zero = dc.Array(np.zeros((8, 6, 8), dtype=np.float32))
        records = syn.generate_scene(syn.SceneSpec(seed=0, height=48, width=64))
        ref = scale_camera(records[0].camera, 1.0 / 8.0)
        src = scale_camera(records[1].camera, 1.0 / 8.0)
        cands = dc.Array(rng.random((4, 6, 8)).astype(np.float32))
        vols = mt.build_cost_volumes(feat, [zero], ref, [src], cands, domain(), groups=4)
        np.testing.assert_allclose(vols[0].data, 0.0, atol=0)

    def test_group_count_must_divide_channels(self):
        feat = dc.Array(np.zeros((6, 4, 4), dtype=np.float32))
        records = syn.generate_scene(syn.SceneSpec(seed=0, height=48, width=64))
        cam = scale_camera(records[0].camera, 1.0 / 8.0)
        cands = dc.Array(np.zeros((2, 4, 4), dtype=np.float32))
        with pytest.raises(Exception):
            mt.build_cost_volumes(feat, [feat], cam, [cam], cands, domain(), groups=4)

    def test_textured_plane_argmax_near_true_depth(self):
        records, feats = plane_views(seed=3)
        dom = domain()
        z_true = dom.normalize(records[0].depth_gt.astype(np.float64))
        h, w = records[0].depth_gt.shape
        m = 16
        grid = ((np.arange(m) + 0.5) / m).astype(np.float32)
        cands = dc.Array(np.broadcast_to(grid[:, None, None], (m, h, w)).copy())
        vols = mt.build_cost_volumes(feats[0], [feats[1]], records[0].camera,
                                     [records[1].camera], cands, dom, groups=8)
        total = vols[0].data.sum(axis=0)  # [m,h,w]
        best = total.argmax(axis=0)
        true_bin = np.clip((z_true * m - 0.5).round(), 0, m - 1)
        vis = visible_mask(records[0].camera, records[1].camera, dom, (h, w), m)
        assert vis.sum() > 500
        ok = np.abs(best[vis] - true_bin[vis]) <= 1
        assert ok.mean() > 0.95


class TestMixtureBranch:
    def make(self, seed=0, **kw):
        return mt.Matcher(np.random.default_rng(seed), **kw)

    def zeroed_volume(self, g=8, m=6, h=5, w=7):
        return dc.Array(np.zeros((g, m, h, w), dtype=np.float32))

    def test_equal_logits_give_half_half(self):
        m = self.make()
        m.head.out.weight.data[...] = 0.0
        m.head.out.bias.data[...] = 0.0
        vm = m.infer_view(self.zeroed_volume())
        np.testing.assert_allclose(vm.alpha1.data, 0.5, atol=1e-7)
        np.testing.assert_allclose(vm.alpha2.data, 0.5, atol=1e-7)

    def test_sigma_has_strict_floor(self):
        m = self.make()
        m.head.out.weight.data[...] = 0.0
        m.head.out.bias.data[...] = 0.0
        m.head.out.bias.data[2] = -40.0  # softplus underflows to 0
        vm = m.infer_view(self.zeroed_volume())
        assert (vm.sigma2.data > 1.0).all()
        np.testing.assert_allclose(vm.sigma2.data, 1.0 + 1e-3, atol=1e-6)

    def test_sigma_cap(self):
        m = self.make(sigma_max=16.0)
        m.head.out.weight.data[...] = 0.0
        m.head.out.bias.data[...] = 0.0
        m.head.out.bias.data[2] = 1000.0
        vm = m.infer_view(self.zeroed_volume())
        np.testing.assert_allclose(vm.sigma2.data, 16.0, atol=1e-5)

    def test_uncertainty_matches_closed_form(self):
        m = self.make(r2=1.0, sigma1=1.0)
        rng = np.random.default_rng(5)
        a1 = rng.uniform(0.1, 0.9, (4, 4)).astype(np.float32)
        s2 = rng.uniform(1.1, 9.0, (4, 4)).astype(np.float32)
        u = m.uncertainty(dc.Array(a1), dc.Array(1.0 - a1), dc.Array(s2)).data
        expect = mx.interval_mass(1.0, 0.0, a1.astype(np.float64), 1.0 - a1.astype(np.float64),
                                  1.0, s2.astype(np.float64))
        np.testing.assert_allclose(u, expect, atol=1e-6)
        assert (u > 0).all() and (u < 1).all()

    def test_uncertainty_monotonic(self):
        m = self.make()
        a1 = dc.Array(np.full((3, 3), 0.4, dtype=np.float32))
        a2 = dc.Array(np.full((3, 3), 0.6, dtype=np.float32))
        lo = m.uncertainty(a1, a2, dc.Array(np.full((3, 3), 2.0, dtype=np.float32))).data
        hi = m.uncertainty(a1, a2, dc.Array(np.full((3, 3), 6.0, dtype=np.float32))).data
        assert (hi < lo).all()  # wider tail component -> less mass near mu

    def test_eq5_squared_variant(self):
        m_sq = self.make(eq5_squared=True)
        a1 = dc.Array(np.full((2, 2), 0.5, dtype=np.float32))
        a2 = dc.Array(np.full((2, 2), 0.5, dtype=np.float32))
        s2 = dc.Array(np.full((2, 2), 2.0, dtype=np.float32))
        got = m_sq.uncertainty(a1, a2, s2).data[0, 0]
        b1 = (1 - math.exp(-SQRT2)) ** 2
        b2 = (1 - math.exp(-SQRT2 / 2.0)) ** 2
        assert got == pytest.approx(0.5 * b1 + 0.5 * b2, abs=1e-6)

    def test_branch_gradients_match_finite_differences(self):
        m = self.make(2)
        dom = domain()
        for p in m.named_params().values():
            p.data = p.data.astype(np.float64)
        rng = np.random.default_rng(0)
        vol = dc.Array(rng.standard_normal((8, 5, 4, 4)), dtype=np.float64)
        mu = dc.Array(rng.uniform(0.3, 0.7, (4, 4)), dtype=np.float64)
        y_gt = rng.uniform(4.0, 12.0, (4, 4))

        def fn(*params):
            vm = m.infer_view(vol)
            nll = m.negative_log_likelihood(mu, vm, y_gt, dom)
            return dc.reduce_mean(nll)

        params = [m.head.out.weight, m.head.out.bias, m.head.embed.weight,
                  m.head.mix1.conv.weight]
        err = dc.finite_difference_check(fn, list(m.named_params().values()), wrt=params,
                                         max_entries=8, eps=1e-5, rng=np.random.default_rng(3))
        assert err < 1e-3


class TestNLL:
    def test_worked_value_at_ground_truth(self):
        m = mt.Matcher(np.random.default_rng(0))
        dom = domain()
        h, w = 3, 3
        logits = dc.Array(np.stack([np.full((h, w), 20.0), np.full((h, w), -20.0)]).astype(np.float32))
        vm = mt.ViewMixtureMaps(logits,
                                dc.Array(np.ones((h, w), dtype=np.float32)),
                                dc.Array(np.zeros((h, w), dtype=np.float32)),
                                dc.Array(np.full((h, w), 2.0, dtype=np.float32)),
                                dc.Array(np.full((h, w), 0.5, dtype=np.float32)))
        y_gt = np.full((h, w), 8.0)
        mu = dc.Array(np.full((h, w), 0.5, dtype=np.float32))  # 0.5 * 16 = 8 = y_gt
        nll = m.negative_log_likelihood(mu, vm, y_gt, dom)
        np.testing.assert_allclose(nll.data, 0.346574, atol=1e-5)

    def test_decreases_as_mu_approaches_truth(self):
        m = mt.Matcher(np.random.default_rng(0))
        dom = domain()
        logits = dc.Array(np.zeros((2, 2, 2), dtype=np.float32))
        vm = mt.ViewMixtureMaps(logits, dc.Array(np.full((2, 2), 0.5, np.float32)),
                                dc.Array(np.full((2, 2), 0.5, np.float32)),
                                dc.Array(np.full((2, 2), 3.0, np.float32)),
                                dc.Array(np.full((2, 2), 0.5, np.float32)))
        y_gt = np.full((2, 2), 8.0)
        far = m.negative_log_likelihood(dc.Array(np.full((2, 2), 0.2, np.float32)), vm, y_gt, dom)
        near = m.negative_log_likelihood(dc.Array(np.full((2, 2), 0.45, np.float32)), vm, y_gt, dom)
        assert (near.data < far.data).all()


class TestRegressionMechanics:
    def test_uniform_scores_give_arithmetic_mean(self):
        rng = np.random.default_rng(0)
        cands = dc.Array(rng.random((6, 4, 4)).astype(np.float32))
        weights = dc.softmax(dc.Array(np.zeros((6, 4, 4), dtype=np.float32)), axis=0)
        mu = dc.reduce_sum(dc.mul(weights, cands), axis=0)
        np.testing.assert_allclose(mu.data, cands.data.mean(axis=0), atol=1e-6)

    def test_dominant_candidate_wins(self):
        rng = np.random.default_rng(1)
        cands = dc.Array(rng.random((6, 3, 3)).astype(np.float32))
        scores = np.zeros((6, 3, 3), dtype=np.float32)
        scores[2] = 20.0
        weights = dc.softmax(dc.Array(scores), axis=0)
        mu = dc.reduce_sum(dc.mul(weights, cands), axis=0)
        np.testing.assert_allclose(mu.data, cands.data[2], atol=1e-6)

    def test_mu_is_convex_combination(self):
        records, feats = plane_views(seed=6)
        dom = domain()
        m = mt.Matcher(np.random.default_rng(2))
        m.set_training(False)
        h, w = records[0].depth_gt.shape
        rng = np.random.default_rng(3)
        cands = dc.Array(rng.random((8, h, w)).astype(np.float32))
        res = m.evaluate(feats[0], [feats[1]], records[0].camera, [records[1].camera], cands, dom)
        assert (res.mu.data >= cands.data.min(axis=0) - 1e-6).all()
        assert (res.mu.data <= cands.data.max(axis=0) + 1e-6).all()

    def test_plane_regression_close_to_truth_with_fresh_weights(self):
        records, feats = plane_views(seed=9)
        dom = domain()
        m = mt.Matcher(np.random.default_rng(4))
        m.set_training(False)
        z_true = dom.normalize(records[0].depth_gt.astype(np.float64))
        h, w = records[0].depth_gt.shape
        n = 16
        grid = ((np.arange(n) + 0.5) / n).astype(np.float32)
        cands = dc.Array(np.broadcast_to(grid[:, None, None], (n, h, w)).copy())
        res = m.evaluate(feats[0], [feats[1]], records[0].camera, [records[1].camera], cands, dom)
        vis = visible_mask(records[0].camera, records[1].camera, dom, (h, w), n)
        close = np.abs(res.mu.data[vis] - z_true[vis]) <= 1.0 / n
        assert close.mean() > 0.9


class TestExpectedSigma:
    def test_weighted_mean_worked_example(self):
        us = [dc.Array(np.full((2, 2), 0.75, np.float32)), dc.Array(np.full((2, 2), 0.25, np.float32))]
        sig = [dc.Array(np.full((2, 2), 2.0, np.float32)), dc.Array(np.full((2, 2), 4.0, np.float32))]
        e = mt.expected_sigma(us, sig).data
        np.testing.assert_allclose(e, 2.5, atol=1e-5)

    def test_single_view_returns_its_sigma(self):
        e = mt.expected_sigma([dc.Array(np.full((2, 2), 0.5, np.float32))],
                              [dc.Array(np.full((2, 2), 3.0, np.float32))]).data
        np.testing.assert_allclose(e, 3.0, atol=1e-4)

    def test_equal_sigmas_preserved(self):
        rng = np.random.default_rng(0)
        us = [dc.Array(rng.uniform(0.2, 0.9, (3, 3)).astype(np.float32)) for _ in range(3)]
        sig = [dc.Array(np.full((3, 3), 2.5, np.float32)) for _ in range(3)]
        np.testing.assert_allclose(mt.expected_sigma(us, sig).data, 2.5, atol=1e-4)


class TestPerturb:
    def test_matches_numpy_reference(self):
        dom = domain()
        rng = np.random.default_rng(0)
        mu_z = rng.uniform(0.3, 0.7, (5, 6))
        sig = rng.uniform(0.5, 2.0, (5, 6))
        out = mt.perturb(dc.Array(mu_z.astype(np.float32)), dc.Array(sig.astype(np.float32)),
                         2.0, 8, dom)
        expect = mx.perturb_candidates(mu_z * 16.0, sig, 2.0, 8) / 16.0
        np.testing.assert_allclose(out.data, expect, atol=1e-5)

    def test_symmetric_about_mu_when_unclamped(self):
        dom = domain()
        mu_z = dc.Array(np.full((3, 3), 0.5, np.float32))
        sig = dc.Array(np.full((3, 3), 1.0, np.float32))
        out = mt.perturb(mu_z, sig, 2.0, 8, dom).data
        np.testing.assert_allclose(out + out[::-1], 1.0, atol=1e-6)

    def test_clamped_to_unit_interval(self):
        dom = domain()
        mu_z = dc.Array(np.full((2, 2), 0.02, np.float32))
        sig = dc.Array(np.full((2, 2), 8.0, np.float32))
        out = mt.perturb(mu_z, sig, 2.0, 8, dom).data
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_larger_sigma_wider_span(self):
        dom = domain()
        mu_z = dc.Array(np.full((2, 2), 0.5, np.float32))
        narrow = mt.perturb(mu_z, dc.Array(np.full((2, 2), 0.5, np.float32)), 2.0, 8, dom).data
        wide = mt.perturb(mu_z, dc.Array(np.full((2, 2), 2.0, np.float32)), 2.0, 8, dom).data
        assert np.ptp(wide, axis=0).min() > np.ptp(narrow, axis=0).max()

    def test_uniform_variant_evenly_spaced(self):
        dom = domain()
        mu_z = dc.Array(np.full((2, 2), 0.5, np.float32))
        out = mt.perturb_uniform(mu_z, 2.0, 4, dom).data
        gaps = np.diff(out[:, 0, 0])
        np.testing.assert_allclose(gaps, gaps[0], atol=1e-6)
