import math

import numpy as np
import pytest
import torch

from cc2dv2.rdb import (
    BiasedMatrix,
    InterestMatrix,
    LossConfig,
    analytic_gradient,
    apply_rdb,
    batch_ssl_loss,
    ce_layer_loss,
    crop_interest,
    distance_map,
    layer_loss,
    relative_bias,
    similarity_map,
    ssl_total_loss,
    window_origin,
)

# ln(1 + 360 e^-10), evaluated with mpmath at 50 digits
CLOSED_FORM_LOSS = 0.0162118496483905


def biased(w, target):
    w = np.asarray(w, dtype=np.float64)
    return BiasedMatrix(w, np.zeros_like(w), np.zeros_like(w), target)


def fd_gradient(w, target, tau, h=1e-6):
    g = np.zeros_like(w)
    for idx in np.ndindex(w.shape):
        wp, wm = w.copy(), w.copy()
        wp[idx] += h
        wm[idx] -= h
        g[idx] = (ce_layer_loss(biased(wp, target), tau)[0] - ce_layer_loss(biased(wm, target), tau)[0]) / (2 * h)
    return g


class TestLossConfig:
    def test_published_defaults(self):
        c = LossConfig()
        assert (c.alpha, c.beta, c.tau, c.matrix_size) == (0.1, 0.7, 10.0, (19, 19))

    @pytest.mark.parametrize("kw", [{"alpha": -0.1}, {"beta": 0}, {"tau": 0}, {"matrix_size": (18, 19)},
                                    {"levels": 0}, {"clip_mode": "other"}])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            LossConfig(**kw)


class TestSimilarity:
    def test_self_orthogonal_antipodal(self, rng):
        f = rng.normal(size=(8, 5, 6))
        f[:, 1, 1] = [1, 0, 0, 0, 0, 0, 0, 0]
        f[:, 2, 2] = [0, 1, 0, 0, 0, 0, 0, 0]
        anchor = f[:, 1, 1].copy()
        s = similarity_map(anchor, f)
        assert s[1, 1] == pytest.approx(1.0, abs=1e-12)
        assert s[2, 2] == 0.0
        f[:, 3, 4] = -3.0 * anchor
        assert similarity_map(anchor, f)[3, 4] == pytest.approx(-1.0, abs=1e-12)

    def test_against_torch_cosine(self, rng):
        f = rng.normal(size=(6, 7, 9))
        a = rng.normal(size=6)
        ref = torch.nn.functional.cosine_similarity(torch.tensor(a)[:, None, None], torch.tensor(f), dim=0)
        np.testing.assert_allclose(similarity_map(a, f), ref.numpy(), atol=1e-12)

    def test_zero_vector_guarded(self):
        s = similarity_map(np.zeros(3), np.ones((3, 2, 2)))
        np.testing.assert_array_equal(s, 0)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            similarity_map(np.ones(3), np.ones((4, 2, 2)))


class TestCrop:
    @pytest.mark.parametrize("center,origin,target", [
        ((48, 48), (39, 39), (9, 9)),
        ((1, 1), (0, 0), (1, 1)),
        ((95, 95), (77, 77), (18, 18)),
    ])
    def test_examples(self, center, origin, target):
        s = np.arange(96 * 96, dtype=np.float64).reshape(96, 96)
        im = crop_interest(s, center, (19, 19))
        assert im.window_origin == origin and im.target == target
        assert im.values.shape == (19, 19)
        assert im.values[target[1], target[0]] == s[center[1], center[0]]

    def test_rectangular_window(self):
        s = np.arange(30 * 40, dtype=np.float64).reshape(30, 40)
        im = crop_interest(s, (20, 2), (7, 5))  # M=7 columns, N=5 rows
        assert im.values.shape == (5, 7) and im.size == (7, 5)
        assert im.values[im.target[1], im.target[0]] == s[2, 20]

    def test_grid_too_small(self):
        with pytest.raises(ValueError):
            crop_interest(np.zeros((10, 30)), (5, 5), (19, 19))

    def test_window_never_shrinks(self, rng):
        for _ in range(200):
            h, w = rng.integers(19, 60, size=2)
            c = (int(rng.integers(0, w)), int(rng.integers(0, h)))
            ox, oy = window_origin(c, (h, w), (19, 19))
            assert 0 <= ox <= w - 19 and 0 <= oy <= h - 19
            assert ox <= c[0] < ox + 19 and oy <= c[1] < oy + 19


class TestDistanceAndBias:
    def test_distance_examples(self):
        d = distance_map((9, 9), (19, 19))
        assert d[9, 9] == 0
        assert d[9 + 4, 9 + 3] == 5.0
        r2 = math.sqrt(2)
        np.testing.assert_allclose(distance_map((1, 1), (3, 3)), [[r2, 1, r2], [1, 0, 1], [r2, 1, r2]])

    def test_bias_examples(self):
        b = relative_bias([0.0, 5.0, 10.0], 0.1, 0.7)
        np.testing.assert_allclose(b, [0.0, 0.5, 0.7], atol=1e-15)

    def test_bias_cap_and_slope(self):
        d = np.linspace(0, 20, 2001)
        b = relative_bias(d, 0.1, 0.7)
        cap = d >= 0.7 / 0.1 - 1e-12
        assert np.all(b[cap] == 0.7)
        assert np.all(np.diff(b[~cap]) > 0)

    def test_literal_clip_mode(self):
        # alpha * clip(d, 0, beta): constant 0.07 for every d >= 0.7
        b = relative_bias([0.0, 0.5, 1.0, 9.0], 0.1, 0.7, "literal")
        np.testing.assert_allclose(b, [0.0, 0.05, 0.07, 0.07])

    def test_target_unbiased(self, rng):
        s = rng.uniform(-1, 1, size=(19, 19))
        im = InterestMatrix(s, (4, 11))
        bm = apply_rdb(im, distance_map((4, 11), (19, 19)), 0.1, 0.7)
        assert bm.w[11, 4] == s[11, 4]
        np.testing.assert_allclose(bm.s, s, atol=1e-15)

    def test_alpha_zero_is_unbiased(self, rng):
        s = rng.uniform(-1, 1, size=(19, 19))
        bm = apply_rdb(InterestMatrix(s, (9, 9)), distance_map((9, 9), (19, 19)), 0.0, 0.7)
        np.testing.assert_array_equal(bm.w, s)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            apply_rdb(InterestMatrix(np.zeros((3, 3)), (1, 1)), np.zeros((4, 4)), 0.1, 0.7)


class TestCrossEntropy:
    def test_uniform(self):
        for tau in (0.5, 1.0, 10.0):
            loss, q = ce_layer_loss(biased(np.full((19, 19), 0.3), (9, 9)), tau)
            assert abs(loss - math.log(361)) < 1e-12
            np.testing.assert_allclose(q, 1 / 361, rtol=1e-12)

    def test_two_entries(self):
        loss, q = ce_layer_loss(biased([[0.0, 0.0]], (0, 0)), 1.0)
        np.testing.assert_allclose(q, [[0.5, 0.5]])
        assert loss == pytest.approx(math.log(2), abs=1e-15)

    def test_closed_form(self):
        w = np.zeros((19, 19))
        w[9, 9] = 1.0
        loss, q = ce_layer_loss(biased(w, (9, 9)), 10.0)
        assert loss == pytest.approx(CLOSED_FORM_LOSS, abs=1e-14)
        assert abs(q.sum() - 1) < 1e-12

    def test_large_scores_stable(self):
        w = np.zeros((5, 5))
        w[0, 0] = 1e4
        loss, q = ce_layer_loss(biased(w, (0, 0)), 10.0)
        assert loss == 0.0 and np.isfinite(q).all()

    def test_non_finite(self):
        with pytest.raises(ValueError):
            ce_layer_loss(biased([[np.nan, 0.0]], (0, 0)), 1.0)

    def test_shift_invariance(self, rng):
        w = rng.uniform(-1, 1, size=(19, 19))
        a, qa = ce_layer_loss(biased(w, (3, 7)), 10.0)
        b, qb = ce_layer_loss(biased(w + 0.37, (3, 7)), 10.0)
        assert abs(a - b) < 1e-9
        np.testing.assert_allclose(qa, qb, atol=1e-12)

    def test_total_loss(self, rng):
        assert ssl_total_loss([0.0] * 5) == 0.0
        assert ssl_total_loss([1.25]) == 1.25
        v = rng.random(5)
        assert ssl_total_loss(v) == pytest.approx(v[0] + v[1] + v[2] + v[3] + v[4], abs=1e-15)


class TestGradient:
    def test_two_entries(self):
        g1 = analytic_gradient(biased([[0.0, 0.0]], (0, 0)), 1.0)
        np.testing.assert_allclose(g1, [[-0.5, 0.5]])
        g10 = analytic_gradient(biased([[0.0, 0.0]], (0, 0)), 10.0)
        np.testing.assert_allclose(g10, [[-5.0, 5.0]])

    @pytest.mark.parametrize("tau", [1.0, 10.0])
    def test_finite_differences(self, rng, tau):
        for _ in range(5):
            w = rng.uniform(-1, 1, size=(19, 19))
            t = tuple(rng.integers(0, 19, size=2))
            g = analytic_gradient(biased(w, t), tau)
            fd = fd_gradient(w, t, tau)
            rel = np.abs(g - fd).max() / np.abs(g).max()
            assert rel < 1e-5
            assert abs(g.sum()) < 1e-9

    def test_gradient_w_equals_gradient_s(self, rng):
        # b is a constant offset, so dL/ds = dL/dw
        s = rng.uniform(-1, 1, size=(19, 19))
        bm = apply_rdb(InterestMatrix(s, (9, 9)), distance_map((9, 9), (19, 19)), 0.1, 0.7)
        g = analytic_gradient(bm, 10.0)
        fd = np.zeros_like(s)
        for idx in [(0, 0), (9, 9), (9, 12), (18, 3)]:
            sp, sm = s.copy(), s.copy()
            sp[idx] += 1e-6
            sm[idx] -= 1e-6
            lp = ce_layer_loss(apply_rdb(InterestMatrix(sp, (9, 9)), bm.d, 0.1, 0.7), 10.0)[0]
            lm = ce_layer_loss(apply_rdb(InterestMatrix(sm, (9, 9)), bm.d, 0.1, 0.7), 10.0)[0]
            fd[idx] = (lp - lm) / 2e-6
            assert abs(fd[idx] - g[idx]) < 1e-5 * np.abs(g).max()

    def test_rdb_ordering_e7(self):
        # equal similarity everywhere: a negative at d=7 gets e^(0.7*10) times the
        # gradient of one with zero bias
        s = np.full((19, 19), 0.2)
        d = distance_map((9, 9), (19, 19))
        bm = apply_rdb(InterestMatrix(s, (9, 9)), d, 0.1, 0.7)
        g = analytic_gradient(bm, 10.0)
        far = g[9, 16]  # d = 7
        near = g[9, 10]  # d = 1, b = 0.1
        assert far / near == pytest.approx(math.exp((0.7 - 0.1) * 10), rel=1e-12)
        assert far / near * math.exp(1.0) == pytest.approx(math.exp(7.0), rel=1e-12)
        assert math.exp(7.0) == pytest.approx(1096.6, abs=0.05)


class TestLayerLoss:
    def test_alpha_zero_matches_plain_ce(self, rng):
        s = rng.uniform(-1, 1, size=(40, 40))
        loss, bm = layer_loss(s, (20, 5), LossConfig(alpha=0.0))
        ref, _ = ce_layer_loss(biased(crop_interest(s, (20, 5)).values, (9, 5)), 10.0)
        assert loss == ref

    def test_batch_matches_reference(self, rng):
        torch.manual_seed(0)
        cfg = LossConfig(levels=3, matrix_size=(7, 5))
        img = [torch.randn(2, 4, 32 // 2 ** i, 40 // 2 ** i, dtype=torch.float64) for i in range(3)]
        pat = [torch.randn(2, 4, 16 // 2 ** i, 16 // 2 ** i, dtype=torch.float64) for i in range(3)]
        points = np.array([[3, 30], [39, 12], [20, 16]])
        anchors = np.array([[1.5, 2.0], [15.9, 8.2], [7.0, 7.0]])
        items = [0, 1, 1]
        total, per_level = batch_ssl_loss(img, pat, points, anchors, cfg, items)
        ref = np.zeros(3)
        for j in range(3):
            for i in range(3):
                f = 2 ** i
                a = pat[i][items[j], :, int(anchors[j, 1] // f), int(anchors[j, 0] // f)].numpy()
                s = similarity_map(a, img[i][items[j]].numpy())
                ref[i] += layer_loss(s, (points[j, 0] // f, points[j, 1] // f), cfg, i)[0] / 3
        np.testing.assert_allclose(per_level.numpy(), ref, rtol=1e-12)
        assert float(total) == pytest.approx(ref.sum(), rel=1e-12)
