import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from panosplat.fusion import (
    CanvasWindow,
    CoverageError,
    ViewContribution,
    extract_stitch_center,
    fuse_views,
    run_denoise_round,
    sliding_windows,
)
from panosplat.hooks import HookError, identity_hook


def full_mapping(h, w):
    m = np.empty((h, w, 2), dtype=np.int64)
    m[..., 0] = np.arange(h)[:, None]
    m[..., 1] = np.arange(w)[None, :]
    return m


class TestFuseViews:
    def test_single_contribution_passthrough(self, rng):
        img = rng.random((6, 9, 3))
        c = ViewContribution(image=img, weight=np.ones((6, 9)), mapping=full_mapping(6, 9))
        fused = fuse_views([c], (6, 9, 3))
        assert np.allclose(fused, img, atol=1e-15)

    def test_equal_weights_average(self):
        a = np.full((4, 4), 0.2)
        b = np.full((4, 4), 0.6)
        m = full_mapping(4, 4)
        cs = [
            ViewContribution(image=a, weight=np.ones((4, 4)), mapping=m),
            ViewContribution(image=b, weight=np.ones((4, 4)), mapping=m),
        ]
        assert np.allclose(fuse_views(cs, (4, 4)), 0.4, atol=1e-15)

    def test_weighted_mean_one_three(self):
        a, b = 0.1, 0.9
        m = full_mapping(3, 3)
        cs = [
            ViewContribution(image=np.full((3, 3), a), weight=np.ones((3, 3)), mapping=m),
            ViewContribution(image=np.full((3, 3), b), weight=np.full((3, 3), 3.0), mapping=m),
        ]
        assert np.allclose(fuse_views(cs, (3, 3)), 0.25 * a + 0.75 * b, atol=1e-15)

    def test_uncovered_pixels_raise_with_coordinates(self):
        img = np.ones((2, 2))
        mapping = full_mapping(2, 2)
        c = ViewContribution(image=img, weight=np.ones((2, 2)), mapping=mapping)
        with pytest.raises(CoverageError) as exc:
            fuse_views([c], (3, 3))
        listed = {tuple(p) for p in exc.value.pixels}
        assert listed == {(0, 2), (1, 2), (2, 0), (2, 1), (2, 2)}

    def test_zero_weight_pixel_counts_as_uncovered(self):
        w = np.ones((2, 2))
        w[1, 1] = 0.0
        c = ViewContribution(image=np.ones((2, 2)), weight=w, mapping=full_mapping(2, 2))
        with pytest.raises(CoverageError):
            fuse_views([c], (2, 2))

    def test_order_invariance(self, rng):
        h, w = 5, 7
        contribs = []
        for _ in range(4):
            contribs.append(
                ViewContribution(
                    image=rng.random((h, w, 3)),
                    weight=rng.random((h, w)) + 0.1,
                    mapping=full_mapping(h, w),
                )
            )
        ref = fuse_views(contribs, (h, w, 3))
        for _ in range(5):
            perm = rng.permutation(len(contribs))
            shuffled = [contribs[i] for i in perm]
            assert np.max(np.abs(fuse_views(shuffled, (h, w, 3)) - ref)) < 1e-12

    def test_agreement_is_exact(self, rng):
        img = rng.random((4, 6))
        m = full_mapping(4, 6)
        cs = [
            ViewContribution(image=img, weight=rng.random((4, 6)) + 0.5, mapping=m)
            for _ in range(3)
        ]
        assert np.array_equal(fuse_views(cs, (4, 6)), img) or np.allclose(
            fuse_views(cs, (4, 6)), img, atol=1e-15
        )

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_convex_combination_bounds(self, seed):
        r = np.random.default_rng(seed)
        m = full_mapping(3, 4)
        cs = [
            ViewContribution(image=r.random((3, 4)), weight=r.random((3, 4)) + 0.01, mapping=m)
            for _ in range(3)
        ]
        fused = fuse_views(cs, (3, 4))
        lo = np.min([c.image for c in cs], axis=0)
        hi = np.max([c.image for c in cs], axis=0)
        assert np.all(fused >= lo - 1e-12) and np.all(fused <= hi + 1e-12)


class TestExtractStitchCenter:
    def test_labeled_columns(self):
        img = np.tile(np.arange(16.0), (4, 1))
        out = extract_stitch_center(img)
        assert out.shape == (4, 8)
        assert np.array_equal(out[0], np.arange(4.0, 12.0))

    def test_narrow_input_rejected(self):
        with pytest.raises(ValueError):
            extract_stitch_center(np.zeros((2, 5)))

    def test_exact_double_width_rejected(self):
        with pytest.raises(ValueError):
            extract_stitch_center(np.zeros((4, 8)))

    def test_constant_image(self):
        out = extract_stitch_center(np.full((4, 12, 3), 0.3))
        assert out.shape == (4, 8, 3)
        assert np.all(out == 0.3)


class TestRunDenoiseRound:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.canvas = rng.random((8, 20, 3))
        self.schedule = sliding_windows(self.canvas.shape, window_width=8, step=4)

    def test_windows_cover_canvas(self):
        assert all(w.height == 8 for w in self.schedule)

    def test_identity_hook_is_a_fixed_point(self):
        out = run_denoise_round(self.canvas, ["p"], identity_hook, self.schedule)
        assert np.max(np.abs(out - self.canvas)) < 1e-12

    def test_uniform_shift_propagates(self):
        delta = 0.125

        def shift_hook(img, prompt):
            return img + delta

        out = run_denoise_round(self.canvas, ["p"], shift_hook, self.schedule)
        assert np.max(np.abs(out - (self.canvas + delta))) < 1e-12

    def test_failure_carries_view_index(self):
        calls = []

        def failing_hook(img, prompt):
            calls.append(prompt)
            if len(calls) == 4:  # view index 3
                raise RuntimeError("boom")
            return img

        before = self.canvas.copy()
        with pytest.raises(HookError) as exc:
            run_denoise_round(self.canvas, ["p"], failing_hook, self.schedule)
        assert exc.value.view_index == 3
        assert np.array_equal(self.canvas, before)

    def test_per_view_prompts_forwarded(self):
        seen = []

        def recording_hook(img, prompt):
            seen.append(prompt)
            return img

        prompts = [f"view-{i}" for i in range(len(self.schedule))]
        run_denoise_round(self.canvas, prompts, recording_hook, self.schedule)
        assert seen == prompts

    def test_parallel_matches_serial(self):
        def blurish(img, prompt):
            return 0.5 * img + 0.25

        serial = run_denoise_round(self.canvas, ["p"], blurish, self.schedule, max_workers=1)
        parallel = run_denoise_round(self.canvas, ["p"], blurish, self.schedule, max_workers=4)
        assert np.array_equal(serial, parallel)


class TestCanvasWindow:
    def test_wrapping_window(self):
        canvas = np.arange(24.0).reshape(2, 12)
        win = CanvasWindow(top=0, left=10, height=2, width=4, wrap=True)
        out = win.extract(canvas)
        assert np.array_equal(out[0], [10.0, 11.0, 0.0, 1.0])

    def test_mapping_targets_inside_canvas(self):
        win = CanvasWindow(top=0, left=9, height=3, width=6, wrap=True)
        m = win.mapping((3, 12))
        assert m[..., 1].max() < 12 and m[..., 1].min() >= 0
