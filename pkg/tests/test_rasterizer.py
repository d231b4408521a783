import math

import numpy as np
import pytest

from panosplat.camera import CameraIntrinsics, CameraPose
from panosplat.rasterizer import (
    COV2D_DILATION,
    RenderOptions,
    _ForwardState,
    project_gaussian,
    render,
    render_backward,
)
from panosplat.scene import Gaussian3D, SceneModel
from panosplat.synthetic import random_scene

EXACT = RenderOptions(kernel_cutoff_sigma=None)


def make_gaussian(position, scale=0.2, opacity=1.0, color=(0.8, 0.2, 0.1)):
    return Gaussian3D(
        position=np.asarray(position, dtype=float),
        color=np.asarray(color, dtype=float),
        opacity=opacity,
        scale=np.full(3, scale),
        rotation=np.array([1.0, 0.0, 0.0, 0.0]),
    )


def single_scene(g, background=(0.0, 0.0, 0.0)):
    return SceneModel.from_gaussians([g], background=background)


class TestProjectGaussian:
    def test_on_axis_projects_to_principal_point(self):
        intr = CameraIntrinsics(fov_deg=90.0, width=100, height=100)
        fp = project_gaussian(make_gaussian([0, 0, 2.0]), CameraPose.identity(), intr)
        assert fp is not None
        assert fp.mean2d == pytest.approx([50.0, 50.0], abs=1e-12)
        assert fp.depth == pytest.approx(2.0)

    def test_behind_camera_is_culled(self):
        intr = CameraIntrinsics(fov_deg=90.0, width=64, height=64)
        fp = project_gaussian(make_gaussian([0, 0, -1.0]), CameraPose.identity(), intr)
        assert fp is None

    def test_far_off_screen_is_culled(self):
        intr = CameraIntrinsics(fov_deg=60.0, width=64, height=64)
        fp = project_gaussian(make_gaussian([50.0, 0, 2.0]), CameraPose.identity(), intr)
        assert fp is None

    def test_dilation_floor_dominates_tiny_gaussians(self):
        intr = CameraIntrinsics(fov_deg=90.0, width=64, height=64)
        for eps in (1e-3, 1e-5, 1e-7):
            fp = project_gaussian(
                make_gaussian([0, 0, 2.0], scale=eps), CameraPose.identity(), intr
            )
            off = fp.cov2d - COV2D_DILATION * np.eye(2)
            assert np.max(np.abs(off)) < 3e-3 * (eps / 1e-3) ** 2 + 1e-12
        assert fp.cov2d == pytest.approx(COV2D_DILATION * np.eye(2), abs=1e-9)

    def test_sigma_peak_matches_formula(self):
        intr = CameraIntrinsics(fov_deg=90.0, width=64, height=64)
        g = make_gaussian([0, 0, 3.0], scale=0.3, opacity=1.7)
        fp = project_gaussian(g, CameraPose.identity(), intr)
        det = np.linalg.det(fp.cov2d)
        assert fp.sigma_peak == pytest.approx(1.0 - math.exp(-1.7 / math.sqrt(det)), abs=1e-12)


def center_pixel_setup(depth, speak_target, color, intr):
    """A gaussian whose compositing weight at the center pixel is exactly
    speak_target (the pixel center coincides with the projected mean)."""
    f = intr.focal
    scale = 0.25
    sig_px = f * scale / depth
    det_sqrt = sig_px**2 + COV2D_DILATION
    alpha = -math.log(1.0 - speak_target) * det_sqrt
    return make_gaussian([0, 0, depth], scale=scale, opacity=alpha, color=color)


class TestRender:
    INTR = CameraIntrinsics(fov_deg=90.0, width=65, height=65)

    def test_single_saturated_gaussian_reaches_its_color(self):
        intr = self.INTR
        g = make_gaussian([0, 0, 2.0], scale=0.5, opacity=500.0, color=(0.7, 0.3, 0.9))
        out = render(single_scene(g), CameraPose.identity(), intr, EXACT)
        # the 0.999 clip leaves one part in a thousand of background
        assert out.rgb[32, 32] == pytest.approx([0.7, 0.3, 0.9], abs=2e-3)
        assert out.alpha[32, 32] == pytest.approx(0.999, abs=1e-9)

    def test_two_splats_composite_per_formula(self):
        intr = self.INTR
        bg = np.array([0.2, 0.2, 0.2])
        c1 = np.array([1.0, 0.0, 0.0])
        c2 = np.array([0.0, 1.0, 0.0])
        g1 = center_pixel_setup(2.0, 0.5, c1, intr)
        g2 = center_pixel_setup(3.0, 0.5, c2, intr)
        scene = SceneModel.from_gaussians([g2, g1], background=bg)  # order must not matter
        out = render(scene, CameraPose.identity(), intr, EXACT)
        expected = 0.5 * c1 + 0.25 * c2 + 0.25 * bg
        assert out.rgb[32, 32] == pytest.approx(expected, abs=1e-10)
        expected_depth = (0.5 * 2.0 + 0.25 * 3.0) / 0.75
        assert out.depth[32, 32] == pytest.approx(expected_depth, abs=1e-10)

    def test_empty_scene_is_background(self):
        scene = SceneModel(
            positions=np.zeros((0, 3)),
            colors=np.zeros((0, 3)),
            opacities=np.zeros(0),
            scales=np.ones((0, 3)),
            rotations=np.tile([1.0, 0, 0, 0], (0, 1)),
            background=(0.3, 0.5, 0.7),
        )
        out = render(scene, CameraPose.identity(), self.INTR)
        assert np.allclose(out.rgb, [0.3, 0.5, 0.7], atol=1e-15)
        assert np.all(out.alpha == 0.0)
        assert np.all(out.depth == 0.0)

    def test_zero_opacity_gives_background(self, rng):
        scene = random_scene(rng, 10)
        scene.opacities[:] = 0.0
        out = render(scene, CameraPose.identity(), self.INTR, EXACT)
        assert np.allclose(out.rgb, scene.background, atol=1e-12)

    def test_gaussian_order_invariance(self, rng):
        scene = random_scene(rng, 15)
        pose = CameraPose.identity()
        ref = render(scene, pose, self.INTR, EXACT)
        perm = rng.permutation(15)
        shuffled = SceneModel(
            positions=scene.positions[perm],
            colors=scene.colors[perm],
            opacities=scene.opacities[perm],
            scales=scene.scales[perm],
            rotations=scene.rotations[perm],
            background=scene.background,
        )
        out = render(shuffled, pose, self.INTR, EXACT)
        assert np.max(np.abs(out.rgb - ref.rgb)) < 1e-12
        assert np.max(np.abs(out.depth - ref.depth)) < 1e-12

    def test_weights_plus_transmittance_sum_to_one(self, rng):
        scene = random_scene(rng, 12)
        st = _ForwardState(scene, CameraPose.identity(), self.INTR, EXACT)
        total = st.acc + st.tfinal
        assert np.max(np.abs(total - 1.0)) < 1e-12

    def test_worker_count_does_not_change_output(self, rng):
        scene = random_scene(rng, 25)
        pose = CameraPose.identity()
        ref = render(scene, pose, self.INTR, RenderOptions(workers=1))
        for workers in (2, 3, 5):
            out = render(scene, pose, self.INTR, RenderOptions(workers=workers))
            assert np.max(np.abs(out.rgb - ref.rgb)) <= 1e-10
            assert np.max(np.abs(out.depth - ref.depth)) <= 1e-10
            assert np.max(np.abs(out.alpha - ref.alpha)) <= 1e-10

    def test_alpha_in_unit_range_and_depth_nonnegative(self, rng):
        scene = random_scene(rng, 30, opacity_range=(1.0, 8.0))
        out = render(scene, CameraPose.identity(), self.INTR, EXACT)
        assert out.alpha.min() >= 0.0 and out.alpha.max() <= 1.0
        assert np.all(out.depth[out.alpha > 1e-6] > 0.0)
        assert np.all(np.isfinite(out.rgb))


class TestCompositingOracle:
    def test_render_matches_bruteforce_eval(self, rng):
        """Direct per-pixel evaluation of the compositing sum."""
        intr = CameraIntrinsics(fov_deg=70.0, width=48, height=48)
        scene = random_scene(rng, 8)
        pose = CameraPose.identity()
        out = render(scene, pose, intr, EXACT)

        footprints = []
        for i, g in enumerate(scene.gaussians):
            fp = project_gaussian(g, pose, intr)
            assert fp is not None
            footprints.append((fp.depth, i, fp))
        footprints.sort(key=lambda t: (t[0], t[1]))

        pixels = [(y, x) for y in range(0, 48, 7) for x in range(0, 48, 5)]
        for y, x in pixels:
            p = np.array([x + 0.5, y + 0.5])
            color = np.zeros(3)
            depth_num = 0.0
            trans = 1.0
            for _, i, fp in footprints:
                d = p - fp.mean2d
                q = float(d @ np.linalg.inv(fp.cov2d) @ d)
                sig = min(fp.sigma_peak * math.exp(-0.5 * q), 0.999)
                color += fp.color * sig * trans
                depth_num += fp.depth * sig * trans
                trans *= 1.0 - sig
            color += trans * scene.background
            alpha = 1.0 - trans
            assert out.rgb[y, x] == pytest.approx(color, abs=1e-10)
            if alpha <= 1e-6:
                assert out.depth[y, x] == 0.0
            else:
                # compare pre-normalization: depth = num / alpha amplifies
                # fp noise by 1/alpha on barely covered pixels
                assert out.depth[y, x] * out.alpha[y, x] == pytest.approx(
                    depth_num, abs=1e-12
                )
            if alpha > 1e-2:
                assert out.depth[y, x] == pytest.approx(depth_num / alpha, abs=1e-10)


class TestRenderBackward:
    INTR = CameraIntrinsics(fov_deg=60.0, width=24, height=24)

    def test_zero_grad_in_zero_grad_out(self, rng):
        scene = random_scene(rng, 6)
        g = render_backward(
            scene,
            CameraPose.identity(),
            self.INTR,
            np.zeros((24, 24, 3)),
            np.zeros((24, 24)),
            EXACT,
        )
        for arr in (g.positions, g.colors, g.opacities, g.scales, g.rotations):
            assert np.all(arr == 0.0)
        assert np.all(g.pose_rotation == 0.0) and np.all(g.pose_translation == 0.0)

    def test_red_channel_gradient_matches_finite_difference(self):
        intr = self.INTR
        g0 = make_gaussian([0, 0, 2.5], scale=0.3, opacity=1.2, color=(0.5, 0.5, 0.5))
        scene = single_scene(g0, background=(0.1, 0.1, 0.1))
        pose = CameraPose.identity()
        grad_rgb = np.zeros((24, 24, 3))
        grad_rgb[:, :, 0] = 1.0 / (24 * 24)  # loss = mean red channel
        grads = render_backward(scene, pose, intr, grad_rgb, None, EXACT)
        assert grads.colors[0, 0] > 0.0

        eps = 1e-4
        red = []
        for sign in (+1, -1):
            sc = scene.copy()
            sc.colors[0, 0] += sign * eps
            out = render(sc, pose, intr, EXACT)
            red.append(float(out.rgb[:, :, 0].mean()))
        fd = (red[0] - red[1]) / (2 * eps)
        assert grads.colors[0, 0] == pytest.approx(fd, rel=1e-4)

    def test_shape_contract_errors(self, rng):
        scene = random_scene(rng, 3)
        with pytest.raises(ValueError, match="grad_rgb"):
            render_backward(scene, CameraPose.identity(), self.INTR, np.zeros((5, 5, 3)))
        with pytest.raises(ValueError, match="grad_depth"):
            render_backward(
                scene,
                CameraPose.identity(),
                self.INTR,
                np.zeros((24, 24, 3)),
                np.zeros((3, 3)),
            )

    def test_gradients_agree_across_worker_counts(self, rng):
        scene = random_scene(rng, 12)
        pose = CameraPose.identity()
        grad_rgb = rng.normal(size=(24, 24, 3))
        grad_depth = rng.normal(size=(24, 24)) * 0.1
        ref = render_backward(scene, pose, self.INTR, grad_rgb, grad_depth, RenderOptions(workers=1))
        for workers in (2, 4):
            g = render_backward(
                scene, pose, self.INTR, grad_rgb, grad_depth, RenderOptions(workers=workers)
            )
            for a, b in (
                (ref.positions, g.positions),
                (ref.scales, g.scales),
                (ref.rotations, g.rotations),
                (ref.pose_rotation, g.pose_rotation),
            ):
                assert np.max(np.abs(a - b)) <= 1e-10
