"""Rasterizer oracles: projection closed forms, compositing by hand, FD grads."""

import numpy as np
import pytest

from splatdistill import diffmath as dm
from splatdistill.cameras import look_at, orbit_camera
from splatdistill.gsscene import GaussianScene, build_covariance
from splatdistill.rasterizer import (
    LOW_PASS,
    project_gaussian,
    render,
    render_backward,
)

from fdcheck import numeric_grad, rel_err


def _scene(positions, colors, opac, quats=None, scales=None, scale_max=0.05):
    n = np.asarray(positions).shape[0]
    if quats is None:
        quats = np.tile([1.0, 0, 0, 0], (n, 1))
    if scales is None:
        scales = np.full((n, 3), 0.02)
    return GaussianScene(
        positions=dm.tensor(positions),
        colors=dm.tensor(colors),
        opacities=dm.tensor(opac),
        rotations=dm.tensor(quats),
        scales=dm.tensor(scales),
        scale_max=scale_max,
    )


def _front_cam(w=32, h=32, dist=2.0, fov=30.0):
    return look_at(
        eye=(0, 0, -dist), target=(0, 0, 0),
        fov_y_deg=fov, width=w, height=h, near=0.5, far=8.0,
    )


class TestProjection:
    def test_on_axis_splat_projects_to_image_center(self):
        cam = _front_cam()
        scene = _scene([[0.0, 0.0, 0.0]], [[1, 0, 0]], [0.5])
        out = project_gaussian(0, scene, cam)
        assert out is not None
        np.testing.assert_allclose(out["mean2d"], [16.0, 16.0], atol=1e-4)
        assert out["depth"] == pytest.approx(2.0, abs=1e-6)

    def test_isotropic_onaxis_cov2d_matches_pinhole_formula(self):
        cam = _front_cam()
        s = 0.03
        scene = _scene([[0.0, 0.0, 0.0]], [[1, 0, 0]], [0.5],
                       scales=np.full((1, 3), s))
        out = project_gaussian(0, scene, cam)
        f = cam.focal
        expect = (f * s / 2.0) ** 2 + LOW_PASS
        np.testing.assert_allclose(out["cov2d"], np.eye(2) * expect, rtol=1e-4)

    def test_behind_camera_is_culled(self):
        cam = _front_cam()
        scene = _scene([[0.0, 0.0, -5.0]], [[1, 0, 0]], [0.5])
        assert project_gaussian(0, scene, cam) is None

    def test_far_off_frame_is_culled(self):
        cam = _front_cam()
        scene = _scene([[50.0, 0.0, 0.0]], [[1, 0, 0]], [0.5])
        assert project_gaussian(0, scene, cam) is None


class TestCompositing:
    def test_transparent_scene_is_background(self):
        cam = _front_cam()
        scene = _scene(
            np.zeros((5, 3)), np.random.default_rng(0).random((5, 3)),
            np.zeros(5),
        )
        img, alpha = render(scene, cam, bg=(0.3, 0.6, 0.9))
        np.testing.assert_allclose(img.data[..., 0], 0.3, atol=1e-6)
        np.testing.assert_allclose(img.data[..., 1], 0.6, atol=1e-6)
        np.testing.assert_allclose(alpha.data, 0.0, atol=1e-6)

    def test_single_opaque_splat_center_pixel_closed_form(self):
        # odd image size puts a pixel center exactly on the projected mean
        cam = _front_cam(w=33, h=33)
        # raw opacity 1.0 -> alpha capped at 0.99 at the center
        scene = _scene([[0.0, 0.0, 0.0]], [[0.8, 0.1, 0.2]], [1.0],
                       scales=np.full((1, 3), 0.04))
        bg = np.array([0.0, 0.0, 1.0])
        img, alpha = render(scene, cam, bg=bg)
        center = img.data[16, 16]
        expect = 0.99 * np.array([0.8, 0.1, 0.2]) + 0.01 * bg
        np.testing.assert_allclose(center, expect, atol=1e-3)
        assert alpha.data[16, 16] == pytest.approx(0.99, abs=1e-3)

    def test_two_splats_same_position_two_term_compositing(self):
        cam = _front_cam(w=33, h=33)
        red, blue = [1.0, 0, 0], [0, 0, 1.0]
        # front splat nearer the camera (smaller z); big scales flatten the
        # gaussian so the exact-center alpha is the raw opacity
        scene = _scene(
            [[0, 0, -0.2], [0, 0, 0.2]],
            [red, blue],
            [0.6, 0.6],
            scales=np.full((2, 3), 0.5),
            scale_max=1.0,
        )
        bg = np.array([1.0, 1.0, 1.0])
        img, alpha = render(scene, cam, bg=bg)
        center = img.data[16, 16]
        # hand-derived: 0.6 red + 0.4*0.6 blue + 0.16 bg
        expect = 0.6 * np.array(red) + 0.4 * 0.6 * np.array(blue) + 0.16 * bg
        np.testing.assert_allclose(center, expect, atol=2e-3)
        assert alpha.data[16, 16] == pytest.approx(0.84, abs=2e-3)

    def test_order_invariance_with_distinct_depths(self):
        cam = _front_cam()
        rng = np.random.default_rng(1)
        n = 30
        pos = rng.uniform(-0.3, 0.3, size=(n, 3))
        pos[:, 2] = np.linspace(-0.5, 0.5, n)  # distinct depths
        cols = rng.random((n, 3))
        opc = rng.uniform(0.2, 0.9, n)
        scene = _scene(pos, cols, opc)
        img1, _ = render(scene, cam)
        perm = rng.permutation(n)
        scene2 = _scene(pos[perm], cols[perm], opc[perm])
        img2, _ = render(scene2, cam)
        np.testing.assert_array_equal(img1.data, img2.data)

    def test_deterministic_across_repeats(self):
        cam = _front_cam()
        rng = np.random.default_rng(2)
        scene = _scene(
            rng.uniform(-0.4, 0.4, (50, 3)), rng.random((50, 3)),
            rng.uniform(0.1, 0.9, 50),
        )
        img1, _ = render(scene, cam)
        img2, _ = render(scene, cam)
        np.testing.assert_array_equal(img1.data, img2.data)

    def test_outputs_in_unit_range_and_monotone_opacity(self):
        cam = _front_cam()
        rng = np.random.default_rng(3)
        pos = rng.uniform(-0.4, 0.4, (40, 3))
        cols = rng.random((40, 3))
        opc = rng.uniform(0.05, 0.6, 40)
        scene = _scene(pos, cols, opc)
        img, alpha = render(scene, cam, bg=(1, 1, 1))
        assert img.data.min() >= 0 and img.data.max() <= 1 + 1e-5
        assert alpha.data.min() >= 0 and alpha.data.max() <= 1
        # raising one splat's opacity cannot reduce its own contribution
        probe = 7
        u, v = project_gaussian(probe, scene, cam)["mean2d"].astype(int)
        base = opc.copy()
        lifted = opc.copy()
        lifted[probe] = min(0.95, lifted[probe] + 0.3)
        img_base, a_base = render(_scene(pos, cols, base), cam)
        img_lift, a_lift = render(_scene(pos, cols, lifted), cam)
        assert a_lift.data[v, u] >= a_base.data[v, u] - 1e-6

    def test_diagnostics_counts(self):
        cam = _front_cam()
        pos = np.array([[0, 0, 0], [0, 0, -5.0], [50, 0, 0]])
        scene = _scene(pos, np.full((3, 3), 0.5), [0.5, 0.5, 0.5])
        stats = {}
        render(scene, cam, stats=stats)
        assert stats["rendered"] == 1
        assert stats["culled_behind"] == 1
        assert stats["culled_frame"] == 1


class TestRenderGradients:
    def test_zero_upstream_gives_zero_grads(self):
        cam = _front_cam(16, 16)
        rng = np.random.default_rng(4)
        scene = _scene(
            rng.uniform(-0.3, 0.3, (5, 3)), rng.random((5, 3)),
            rng.uniform(0.3, 0.7, 5),
        )
        grads = render_backward(scene, cam, (1, 1, 1), np.zeros((16, 16, 3)))
        for g in grads.values():
            np.testing.assert_array_equal(g, 0)

    def test_single_splat_color_grad_equals_weight_sum(self):
        cam = _front_cam(16, 16)
        scene = _scene([[0.0, 0.0, 0.0]], [[0.5, 0.5, 0.5]], [0.55],
                       scales=np.full((1, 3), 0.05))
        gup = np.ones((16, 16, 3), dtype=np.float32)
        grads = render_backward(scene, cam, (0, 0, 0), gup)
        # dL/dc = sum_pixels T*alpha with T=1 (single splat): equals the
        # rendered alpha map summed
        _, alpha = render(scene, cam, bg=(0, 0, 0))
        expect = alpha.data.sum()
        np.testing.assert_allclose(grads["colors"][0], expect, rtol=1e-4)

    @pytest.mark.parametrize("attr", ["positions", "colors", "opacities",
                                      "rotations", "scales"])
    def test_five_splat_full_gradient_check(self, attr):
        # splats sized so tail contributions die below the 1/255 alpha skip
        # before the 3-sigma rectangle cuts them; the compositing function
        # is then smooth at the probe points and FD is meaningful
        cam = _front_cam(16, 16, dist=2.0)
        rng = np.random.default_rng(5)
        n = 5
        pos = rng.uniform(-0.25, 0.25, (n, 3))
        cols = rng.uniform(0.2, 0.8, (n, 3))
        opc = rng.uniform(0.2, 0.34, n)
        q = rng.normal(size=(n, 4))
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        scl = rng.uniform(0.35, 0.55, (n, 3))
        scene = _scene(pos, cols, opc, quats=q, scales=scl, scale_max=1.0)
        wt = rng.normal(size=(16, 16, 3)).astype(np.float32)

        target = getattr(scene, attr)
        target.requires_grad = True
        target.grad = None
        with dm.Tape() as tape:
            img, _ = render(scene, cam, bg=(0.2, 0.3, 0.4))
            loss = dm.mean_all(dm.mul(img, dm.tensor(wt)))
        tape.backward(loss)
        analytic = target.grad.copy()

        def f():
            img2, _ = render(scene, cam, bg=(0.2, 0.3, 0.4))
            return (img2.data.astype(np.float64) * wt).mean()

        numeric = numeric_grad(f, target, h=1e-3)
        assert rel_err(analytic, numeric) < 1e-2


def test_build_covariance_consistency_with_projection_scale():
    # eigenvalues of Sigma equal squared scales after any rotation
    rng = np.random.default_rng(6)
    for _ in range(20):
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        s = rng.uniform(0.1, 2.0, 3)
        cov = build_covariance(q, s)
        ev = np.sort(np.linalg.eigvalsh(cov))
        np.testing.assert_allclose(ev, np.sort(s**2), rtol=1e-5, atol=1e-7)
