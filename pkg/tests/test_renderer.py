import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from crowdsplat.body_model import Mesh
from crowdsplat.cameras import Camera
from crowdsplat.renderer import (
    DEFAULT_CONFIG,
    RenderConfig,
    render,
    render_backward_packed,
    render_normal_map,
    render_packed,
)
from crowdsplat.scene import CrowdScene, Gaussian, PersonGaussians, assemble_scene, pack_scene

from conftest import frontal_camera
from oracles import brute_force_render, random_packed_scene, sigmoid


def _single_gaussian_scene(logit=40.0, color=(0.9, 0.1, 0.1), bg=(0.0, 0.2, 0.4), sigma=0.1, z=4.0):
    g = Gaussian(
        position=np.array([0.0, 0.0, z]),
        log_scale=np.full(3, np.log(sigma)),
        rotation=np.array([1.0, 0.0, 0.0, 0.0]),
        opacity_logit=logit,
        color=np.asarray(color, dtype=np.float64),
    )
    return assemble_scene([PersonGaussians("solo", (g,), np.zeros(3))], background=bg)


class TestForward:
    def test_empty_scene_is_background(self):
        scene = CrowdScene((), np.array([0.1, 0.6, 0.9]))
        out = render(scene, frontal_camera())
        np.testing.assert_allclose(out.rgb.data, np.broadcast_to([0.1, 0.6, 0.9], (32, 32, 3)))
        np.testing.assert_array_equal(out.alpha.data, 0.0)
        np.testing.assert_array_equal(out.contributing_count, 0)

    def test_single_gaussian_closed_form(self):
        sigma, z = 0.1, 4.0
        cam = frontal_camera(size=33, fx=40.0)
        scene = _single_gaussian_scene(sigma=sigma, z=z)
        out = render(scene, cam)

        sigma_px_sq = (40.0 * sigma / z) ** 2 + DEFAULT_CONFIG.lowpass
        us = np.arange(33)[None, :] - cam.cx
        vs = np.arange(33)[:, None] - cam.cy
        weight = np.exp(-0.5 * (us**2 + vs**2) / sigma_px_sq)
        alpha = np.minimum(weight, 0.999)  # logit 40 saturates the sigmoid
        expected = alpha[:, :, None] * np.array([0.9, 0.1, 0.1]) + (1 - alpha)[:, :, None] * np.array(
            [0.0, 0.2, 0.4]
        )
        np.testing.assert_allclose(out.rgb.data, expected, atol=1e-9)
        # center pixel is exactly the clamp-composited color
        center = out.rgb.data[16, 16]
        np.testing.assert_allclose(
            center, 0.999 * np.array([0.9, 0.1, 0.1]) + 0.001 * np.array([0.0, 0.2, 0.4]), atol=1e-9
        )

    def test_occluder_suppresses_far_gaussian(self):
        near = Gaussian(np.array([0.0, 0.0, 3.0]), np.full(3, np.log(0.3)), np.array([1.0, 0, 0, 0]), 40.0, np.array([1.0, 0.0, 0.0]))
        far = Gaussian(np.array([0.0, 0.0, 5.0]), np.full(3, np.log(0.3)), np.array([1.0, 0, 0, 0]), 40.0, np.array([0.0, 1.0, 0.0]))
        scene = assemble_scene(
            [PersonGaussians("n", (near,), np.zeros(3)), PersonGaussians("f", (far,), np.zeros(3))],
            background=(0, 0, 0),
        )
        out = render(scene, frontal_camera(size=17, fx=20.0))
        center = out.rgb.data[8, 8]
        assert center[1] <= 0.001  # far green passes through at most 1 - 0.999
        assert center[0] >= 0.998

    def test_behind_camera_is_culled(self):
        scene = _single_gaussian_scene(z=-2.0)
        out = render(scene, frontal_camera())
        np.testing.assert_array_equal(out.alpha.data, 0.0)

    def test_non_finite_parameter_reported_with_person(self):
        scene = _single_gaussian_scene()
        packed = pack_scene(scene)
        packed.positions[0, 1] = np.nan
        with pytest.raises(ValueError, match="person 'solo'"):
            render_packed(packed, frontal_camera())

    def test_outputs_in_range_and_consistent(self):
        rng = np.random.default_rng(0)
        packed = random_packed_scene(rng, 40, (0.2, 0.4, 0.8))
        out = render_packed(packed, frontal_camera(size=48, fx=40.0))
        assert out.rgb.data.min() >= 0.0 and out.rgb.data.max() <= 1.0
        assert out.alpha.data.min() >= 0.0 and out.alpha.data.max() <= 1.0
        assert out.contributing_count.max() <= 40

    def test_matches_brute_force_on_random_scenes(self):
        rng = np.random.default_rng(42)
        for trial in range(5):
            packed = random_packed_scene(rng, 60, rng.random(3))
            cam = frontal_camera(size=40, fx=34.0)
            out = render_packed(packed, cam)
            ref_rgb, ref_alpha = brute_force_render(packed, cam)
            assert np.abs(out.rgb.data - ref_rgb).max() <= 1e-5
            assert np.abs(out.alpha.data[:, :, 0] - ref_alpha).max() <= 1e-5

    def test_depth_ties_break_by_index(self):
        # two coincident gaussians: the first in pack order must win
        def scene_with_order(c1, c2):
            g1 = Gaussian(np.array([0.0, 0.0, 4.0]), np.full(3, np.log(0.2)), np.array([1.0, 0, 0, 0]), 40.0, c1)
            g2 = Gaussian(np.array([0.0, 0.0, 4.0]), np.full(3, np.log(0.2)), np.array([1.0, 0, 0, 0]), 40.0, c2)
            return assemble_scene([PersonGaussians("p", (g1, g2), np.zeros(3))], background=(0, 0, 0))

        cam = frontal_camera(size=33)  # odd size puts pixel (16, 16) on the axis
        red_first = render(scene_with_order(np.array([1.0, 0, 0]), np.array([0.0, 1.0, 0])), cam)
        green_first = render(scene_with_order(np.array([0.0, 1.0, 0]), np.array([1.0, 0, 0])), cam)
        assert red_first.rgb.data[16, 16, 0] > 0.99
        assert green_first.rgb.data[16, 16, 1] > 0.99

    def test_render_is_deterministic(self):
        rng = np.random.default_rng(5)
        packed = random_packed_scene(rng, 30, (1.0, 1.0, 1.0))
        cam = frontal_camera()
        a = render_packed(packed, cam)
        b = render_packed(packed, cam)
        np.testing.assert_array_equal(a.rgb.data, b.rgb.data)

    def test_rigid_equivariance(self):
        rng = np.random.default_rng(31)
        packed = random_packed_scene(rng, 25, (0.3, 0.3, 0.3))
        cam = frontal_camera(size=40, fx=34.0)
        base = render_packed(packed, cam)

        rot = Rotation.from_rotvec([0.3, -0.5, 0.9])
        r_mat = rot.as_matrix()
        shift = np.array([0.4, -0.2, 0.7])

        moved = random_packed_scene(np.random.default_rng(31), 25, (0.3, 0.3, 0.3))
        moved.positions = packed.positions @ r_mat.T + shift
        quat_xyzw = rot.as_quat()
        r_quat = np.array([quat_xyzw[3], *quat_xyzw[:3]])

        def quat_mul(q, p):
            w1, x1, y1, z1 = q
            w2, x2, y2, z2 = p
            return np.array(
                [
                    w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
                    w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
                    w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
                    w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
                ]
            )

        moved.rotations = np.stack([quat_mul(r_quat, q) for q in packed.rotations])
        cam2 = Camera(
            fx=cam.fx, fy=cam.fy, cx=cam.cx, cy=cam.cy,
            rotation=cam.rotation @ r_mat.T,
            translation=cam.translation - cam.rotation @ r_mat.T @ shift,
            width=cam.width, height=cam.height,
        )
        out = render_packed(moved, cam2)
        assert np.abs(out.rgb.data - base.rgb.data).max() <= 1e-5

    def test_tile_size_is_a_pure_performance_knob(self):
        rng = np.random.default_rng(3)
        packed = random_packed_scene(rng, 50, (0.9, 0.9, 0.2))
        cam = frontal_camera(size=50, fx=40.0)
        a = render_packed(packed, cam, RenderConfig(tile_size=8))
        b = render_packed(packed, cam, RenderConfig(tile_size=64))
        np.testing.assert_allclose(a.rgb.data, b.rgb.data, atol=1e-9)


class TestBackwardShapes:
    def test_zero_loss_grad_gives_zero_gradients(self):
        rng = np.random.default_rng(1)
        packed = random_packed_scene(rng, 12, (0.5, 0.5, 0.5))
        cam = frontal_camera()
        grads = render_backward_packed(packed, cam, np.zeros((32, 32, 3)))
        for arr in (grads.d_position, grads.d_log_scale, grads.d_rotation, grads.d_opacity_logit, grads.d_color):
            np.testing.assert_array_equal(arr, 0.0)

    def test_color_gradient_matches_forward_weights(self):
        # loss = sum of rgb: d/d color_c = sum over pixels of alpha * visibility
        scene = _single_gaussian_scene(logit=0.5, sigma=0.08)
        packed = pack_scene(scene)
        cam = frontal_camera(size=24, fx=24.0)
        grads = render_backward_packed(packed, cam, np.ones((24, 24, 3)))
        out = render_packed(packed, cam)
        # single gaussian: per-pixel weight = alpha, visibility 1
        total_alpha = out.alpha.data.sum()
        np.testing.assert_allclose(grads.d_color[0], total_alpha, rtol=1e-8)

    def test_rotation_gradient_is_tangent(self):
        rng = np.random.default_rng(2)
        packed = random_packed_scene(rng, 10, (0.1, 0.5, 0.9))
        cam = frontal_camera()
        grads = render_backward_packed(packed, cam, rng.random((32, 32, 3)))
        radial = np.abs(np.einsum("nq,nq->n", grads.d_rotation, packed.rotations))
        assert radial.max() <= 1e-12

    def test_loss_grad_shape_mismatch(self):
        scene = _single_gaussian_scene()
        with pytest.raises(ValueError, match="loss_grad"):
            render_backward_packed(pack_scene(scene), frontal_camera(), np.zeros((8, 8, 3)))


class TestNormalMap:
    def _camera(self):
        return frontal_camera(size=32, fx=30.0)

    def test_facing_triangle_encodes_blue(self):
        # triangle at z=2 facing the camera (normal toward -z in camera space)
        vertices = np.array([[-1.0, -1.0, 2.0], [1.0, -1.0, 2.0], [0.0, 1.5, 2.0]])
        faces = np.array([[0, 1, 2]])
        normals = np.tile([0.0, 0.0, -1.0], (3, 1))
        mesh = Mesh(vertices, faces, normals)
        out = render_normal_map(mesh, self._camera())
        covered = np.abs(out.data - 0.5).sum(axis=2) > 1e-6
        assert covered.sum() > 50
        np.testing.assert_allclose(
            out.data[covered], np.broadcast_to([0.5, 0.5, 1.0], (covered.sum(), 3)), atol=1e-9
        )

    def test_empty_mesh_is_gray(self):
        mesh = Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), np.zeros((0, 3)))
        out = render_normal_map(mesh, self._camera())
        np.testing.assert_array_equal(out.data, 0.5)

    def test_nearer_triangle_wins(self):
        vertices = np.array(
            [
                [-1.0, -1.0, 2.0], [1.0, -1.0, 2.0], [0.0, 1.5, 2.0],  # near, facing
                [-1.0, -1.0, 4.0], [1.0, -1.0, 4.0], [0.0, 1.5, 4.0],  # far, tilted
            ]
        )
        faces = np.array([[0, 1, 2], [3, 4, 5]])
        tilted = np.array([1.0, 0.0, -1.0]) / np.sqrt(2)
        normals = np.vstack([np.tile([0.0, 0.0, -1.0], (3, 1)), np.tile(tilted, (3, 1))])
        mesh = Mesh(vertices, faces, normals)
        out = render_normal_map(mesh, self._camera())
        # overlap region shows the near triangle's encoding
        np.testing.assert_allclose(out.data[16, 15], [0.5, 0.5, 1.0], atol=1e-9)

    def test_degenerate_triangle_skipped(self):
        vertices = np.array([[0.0, 0.0, 2.0], [0.0, 0.0, 2.0], [0.0, 1.0, 2.0]])
        faces = np.array([[0, 1, 2]])
        normals = np.tile([0.0, 0.0, -1.0], (3, 1))
        out = render_normal_map(Mesh(vertices, faces, normals), self._camera())
        np.testing.assert_array_equal(out.data, 0.5)

    def test_interpolated_normals_are_renormalized(self):
        vertices = np.array([[-1.0, -1.0, 2.0], [1.0, -1.0, 2.0], [0.0, 1.5, 2.0]])
        faces = np.array([[0, 1, 2]])
        n0 = np.array([1.0, 0.0, -1.0]) / np.sqrt(2)
        n1 = np.array([-1.0, 0.0, -1.0]) / np.sqrt(2)
        n2 = np.array([0.0, 0.0, -1.0])
        mesh = Mesh(vertices, faces, np.stack([n0, n1, n2]))
        out = render_normal_map(mesh, self._camera())
        covered = np.abs(out.data - 0.5).sum(axis=2) > 1e-6
        decoded = out.data[covered] * 2.0 - 1.0
        np.testing.assert_allclose(np.linalg.norm(decoded, axis=1), 1.0, atol=1e-9)
