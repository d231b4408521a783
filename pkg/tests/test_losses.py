import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from panosplat.losses import (
    Embedding,
    LossReport,
    grid_embedding,
    grid_embedding_grad,
    image_metrics,
    l_geo,
    l_geo_grad,
    l_rgb,
    l_rgb_grad,
    l_sem,
    l_sem_grad,
    ssim,
    total_loss,
)


class TestLRgb:
    def test_identical_images(self, rng):
        img = rng.random((8, 8, 3))
        assert l_rgb(img, img) == 0.0

    def test_extremes(self):
        assert l_rgb(np.zeros((4, 4, 3)), np.ones((4, 4, 3))) == 1.0

    def test_half_pixels_off_by_half(self):
        a = np.zeros((2, 4, 3))
        b = np.zeros((2, 4, 3))
        b[:, :2] = 0.5
        assert l_rgb(a, b) == pytest.approx(0.25, abs=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            l_rgb(np.zeros((2, 2, 3)), np.zeros((3, 3, 3)))

    def test_gradient_matches_finite_difference(self, rng):
        a = rng.random((4, 4, 3))
        b = rng.random((4, 4, 3))
        g = l_rgb_grad(a, b)
        eps = 1e-7
        for idx in [(0, 0, 0), (2, 3, 1), (3, 1, 2)]:
            ap = a.copy()
            ap[idx] += eps
            am = a.copy()
            am[idx] -= eps
            fd = (l_rgb(ap, b) - l_rgb(am, b)) / (2 * eps)
            assert g[idx] == pytest.approx(fd, abs=1e-8)


class TestLSem:
    def test_equal_embeddings(self):
        e = Embedding(vector=np.array([1.0, 2.0, 3.0]))
        assert l_sem(e, e) == pytest.approx(0.0, abs=1e-12)

    def test_orthogonal(self):
        a = Embedding(vector=np.array([1.0, 0.0]))
        b = Embedding(vector=np.array([0.0, 2.0]))
        assert l_sem(a, b) == pytest.approx(1.0, abs=1e-12)

    def test_opposite(self):
        a = Embedding(vector=np.array([1.0, -2.0, 0.5]))
        b = Embedding(vector=-3.0 * a.vector)
        assert l_sem(a, b) == pytest.approx(2.0, abs=1e-12)

    def test_zero_vector_rejected(self):
        with pytest.raises(ValueError):
            Embedding(vector=np.zeros(4))

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            l_sem(Embedding(vector=np.ones(3)), Embedding(vector=np.ones(4)))

    @settings(max_examples=30, deadline=None)
    @given(scale=st.floats(1e-3, 1e3), seed=st.integers(0, 1000))
    def test_invariant_to_positive_rescaling(self, scale, seed):
        r = np.random.default_rng(seed)
        va = r.normal(size=8)
        vb = r.normal(size=8)
        base = l_sem(Embedding(vector=va), Embedding(vector=vb))
        scaled = l_sem(Embedding(vector=va * scale), Embedding(vector=vb))
        assert scaled == pytest.approx(base, abs=1e-9)
        assert 0.0 <= base <= 2.0

    def test_gradient_matches_finite_difference(self, rng):
        va = rng.normal(size=6)
        vb = rng.normal(size=6)
        g = l_sem_grad(Embedding(vector=va), Embedding(vector=vb))
        eps = 1e-6
        for k in range(6):
            vp, vm = va.copy(), va.copy()
            vp[k] += eps
            vm[k] -= eps
            fd = (
                l_sem(Embedding(vector=vp), Embedding(vector=vb))
                - l_sem(Embedding(vector=vm), Embedding(vector=vb))
            ) / (2 * eps)
            assert g[k] == pytest.approx(fd, abs=1e-6)


class TestLGeo:
    def test_identical_maps(self, rng):
        d = rng.random((8, 8)) + 0.5
        assert l_geo(d, d) == pytest.approx(0.0, abs=1e-12)

    def test_anticorrelated(self, rng):
        d = rng.random((8, 8))
        assert l_geo(d, -d) == pytest.approx(2.0, abs=1e-12)

    def test_affine_invariance(self, rng):
        d = rng.random((10, 10))
        assert l_geo(3.2 * d - 0.7, d) == pytest.approx(0.0, abs=1e-9)

    def test_constant_map_returns_one(self, rng):
        assert l_geo(np.full((5, 5), 2.0), rng.random((5, 5))) == 1.0

    def test_too_few_valid_pixels(self, rng):
        mask = np.zeros((4, 4), dtype=bool)
        mask[0, 0] = True
        with pytest.raises(ValueError):
            l_geo(rng.random((4, 4)), rng.random((4, 4)), mask=mask)

    def test_mask_restricts_support(self, rng):
        a = rng.random((6, 6))
        b = a.copy()
        b[0] = 99.0  # corrupt one row, then mask it out
        mask = np.ones((6, 6), dtype=bool)
        mask[0] = False
        assert l_geo(a, b, mask=mask) == pytest.approx(0.0, abs=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(a=st.floats(0.1, 10.0), b=st.floats(-5.0, 5.0), seed=st.integers(0, 500))
    def test_affine_invariance_property(self, a, b, seed):
        r = np.random.default_rng(seed)
        d = r.random((7, 7))
        ref = r.random((7, 7))
        assert l_geo(a * d + b, ref) == pytest.approx(l_geo(d, ref), abs=1e-9)

    def test_gradient_matches_finite_difference(self, rng):
        d = rng.random((5, 5)) + 0.1
        ref = rng.random((5, 5)) + 0.1
        g = l_geo_grad(d, ref)
        eps = 1e-6
        for idx in [(0, 0), (2, 3), (4, 4)]:
            dp, dm = d.copy(), d.copy()
            dp[idx] += eps
            dm[idx] -= eps
            fd = (l_geo(dp, ref) - l_geo(dm, ref)) / (2 * eps)
            assert g[idx] == pytest.approx(fd, abs=1e-6)


class TestTotalLoss:
    def test_photometric_only(self):
        rep = total_loss(0.42, 0.0, 0.0)
        assert rep.total == 0.42

    def test_paper_weights_arithmetic(self):
        rep = total_loss(0.5, 0.2, 0.1)
        assert rep.total == pytest.approx(0.523, abs=1e-12)
        assert rep.lambda_sem == 0.1 and rep.lambda_geo == 0.03

    def test_zero_weights(self):
        rep = total_loss(0.3, 5.0, 7.0, lambda_sem=0.0, lambda_geo=0.0)
        assert rep.total == 0.3

    def test_report_recomputes_exactly(self, rng):
        vals = rng.random(3)
        rep = total_loss(*vals, lambda_sem=0.25, lambda_geo=0.75)
        assert rep.total == rep.l_rgb + rep.lambda_sem * rep.l_sem + rep.lambda_geo * rep.l_geo

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            total_loss(float("nan"), 0.0, 0.0)


class TestImageMetrics:
    def test_identical_images_hit_caps(self, rng):
        img = rng.random((16, 16, 3))
        m = image_metrics(img, img)
        assert m["psnr"] == 99.0
        assert m["ssim"] == pytest.approx(1.0, abs=1e-9)

    def test_known_mse_gives_twenty_db(self):
        a = np.zeros((10, 10, 3))
        b = np.full((10, 10, 3), 0.1)  # MSE = 0.01
        assert image_metrics(a, b)["psnr"] == pytest.approx(20.0, abs=1e-9)

    def test_inverted_binary_checkerboard(self):
        y, x = np.mgrid[0:16, 0:16]
        board = ((x + y) % 2).astype(float)
        img = np.stack([board] * 3, axis=2)
        m = image_metrics(img, 1.0 - img)
        assert m["psnr"] == pytest.approx(0.0, abs=1e-12)  # MSE = 1
        assert m["ssim"] < -0.9

    def test_psnr_decreases_with_mse(self, rng):
        target = rng.random((12, 12, 3))
        values = []
        for noise in (0.01, 0.05, 0.2):
            values.append(image_metrics(np.clip(target + noise, 0, 1), target)["psnr"])
        assert values[0] > values[1] > values[2]

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            image_metrics(np.zeros((4, 4, 3)), np.zeros((5, 5, 3)))

    @settings(max_examples=10, deadline=None)
    @given(seed=st.integers(0, 100))
    def test_ssim_self_similarity(self, seed):
        img = np.random.default_rng(seed).random((12, 12, 3))
        assert ssim(img, img) == pytest.approx(1.0, abs=1e-9)


class TestGridEmbedding:
    def test_dimension_and_determinism(self, rng):
        img = rng.random((32, 32, 3))
        e1 = grid_embedding(img)
        e2 = grid_embedding(img)
        assert e1.vector.shape == (96,)
        assert np.array_equal(e1.vector, e2.vector)
        assert e1.source_id == "builtin-grid"

    def test_constant_image_embedding(self):
        e = grid_embedding(np.full((16, 16, 3), 0.25))
        assert np.allclose(e.vector[:48], 0.25, atol=1e-12)  # means
        assert np.allclose(e.vector[48:], 0.0, atol=1e-12)  # variances

    def test_gradient_matches_finite_difference(self, rng):
        img = rng.random((8, 8, 3))
        gvec = rng.normal(size=96)
        g = grid_embedding_grad(img, gvec)
        eps = 1e-6
        for idx in [(0, 0, 0), (3, 5, 1), (7, 7, 2)]:
            ip, im = img.copy(), img.copy()
            ip[idx] += eps
            im[idx] -= eps
            fd = (
                float(np.dot(grid_embedding(ip).vector, gvec))
                - float(np.dot(grid_embedding(im).vector, gvec))
            ) / (2 * eps)
            assert g[idx] == pytest.approx(fd, abs=1e-6)


def test_loss_report_combine_is_linear(rng):
    base = LossReport.combine(0.1, 0.2, 0.3, 0.5, 0.25)
    assert base.total == pytest.approx(0.1 + 0.5 * 0.2 + 0.25 * 0.3, abs=1e-15)
