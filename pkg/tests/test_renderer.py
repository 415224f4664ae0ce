import numpy as np
import pytest
from scipy.special import sph_harm_y

from metasplat.errors import BadDirection, StaleAux
from metasplat.gradcheck import check_camera, random_scene, renderer_check
from metasplat.renderer import (
    eval_sh,
    project,
    render_backward,
    render_forward,
    sh_basis,
    write_ppm,
)
from metasplat.scene import (
    GaussianScene,
    inverse_softplus,
    look_at_camera,
    SCALE_GAIN,
)

BLACK = np.zeros(3)


def raw_scale_for(physical):
    """Raw value whose activation is the given physical scale."""
    return inverse_softplus(np.asarray(physical) / SCALE_GAIN)


def dc_coeff_for(color_channel):
    """DC coefficient that evaluates to the given channel value exactly."""
    return (color_channel - 0.5) / 0.28209479177387814


def logit(p):
    return np.log(p / (1.0 - p))


def on_axis_scene(depth, physical_scale, opacity, color, camera, sh_degree=0):
    """One isotropic Gaussian on the camera's optical axis at the given depth."""
    center = camera.center
    axis = camera.rotation[2]  # camera z row = forward in world coords
    mean = center + depth * axis
    basis = (sh_degree + 1) ** 2
    sh = np.zeros((1, basis, 3))
    sh[0, 0] = [dc_coeff_for(c) for c in color]
    return GaussianScene(mean[None, :], np.full((1, 3), raw_scale_for(physical_scale)),
                         [[1, 0, 0, 0]], [logit(opacity)], sh)


class TestEvalSh:
    def test_dc_zero_coeffs_gives_gray(self):
        color = eval_sh(np.zeros((1, 3)), [0.0, 0.0, 1.0])
        assert np.allclose(color, 0.5, atol=0)

    def test_degree0_view_independent(self, rng):
        coeffs = rng.normal(0, 1, (1, 3))
        d1 = rng.normal(0, 1, 3)
        d1 /= np.linalg.norm(d1)
        d2 = rng.normal(0, 1, 3)
        d2 /= np.linalg.norm(d2)
        assert np.array_equal(eval_sh(coeffs, d1), eval_sh(coeffs, d2))

    def test_bad_direction(self):
        with pytest.raises(BadDirection):
            eval_sh(np.zeros((1, 3)), [0.0, 0.0, 1.1])

    def test_basis_matches_scipy_reference(self, rng):
        # real spherical harmonics via scipy, with the renderer's sign layout
        dirs = rng.normal(0, 1, (40, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
        theta = np.arccos(np.clip(z, -1, 1))
        phi = np.arctan2(y, x)

        def reference(ell, m):
            harm = sph_harm_y(ell, abs(m), theta, phi)
            if m > 0:
                return np.sqrt(2.0) * (-1) ** m * harm.real
            if m < 0:
                return np.sqrt(2.0) * (-1) ** m * harm.imag
            return harm.real

        basis = sh_basis(dirs, 16)
        slot = 0
        for ell in range(4):
            for m in range(-ell, ell + 1):
                want = (-1) ** m * reference(ell, m)
                assert np.abs(basis[:, slot] - want).max() < 1e-12, (ell, m)
                slot += 1

    def test_degree1_color_matches_reference(self, rng):
        coeffs = rng.uniform(-0.5, 0.5, (4, 3))
        d = rng.normal(0, 1, 3)
        d /= np.linalg.norm(d)
        got = eval_sh(coeffs, d)
        c1 = 0.4886025119029199
        basis = np.array([0.28209479177387814, -c1 * d[1], c1 * d[2], -c1 * d[0]])
        want = np.maximum(basis @ coeffs + 0.5, 0.0)
        assert np.abs(got - want).max() < 1e-15


class TestProject:
    def test_behind_camera_culled(self, tiny_camera, rng):
        scene = random_scene(rng, 1)
        scene.means[0] = tiny_camera.center
        assert project(scene, tiny_camera) == []

    def test_on_axis_isotropic_cov(self):
        cam = look_at_camera((3.0, 0.0, 0.0), (0, 0, 0), fx=20.0, fy=20.0,
                             width=16, height=16)
        depth, s = 3.0, 0.05
        scene = on_axis_scene(depth, s, 0.7, (1, 0, 0), cam)
        (pg,) = project(scene, cam)
        expected = (20.0 * s / depth) ** 2
        assert pg.cov2d[0, 0] == pytest.approx(expected + 0.3, rel=1e-9)
        assert pg.cov2d[1, 1] == pytest.approx(expected + 0.3, rel=1e-9)
        assert abs(pg.cov2d[0, 1]) < 1e-12
        assert np.allclose(pg.mean2d, [8.0, 8.0], atol=1e-9)

    def test_depth_sorted(self, tiny_camera, rng):
        scene = random_scene(rng, 2)
        axis = tiny_camera.rotation[2]
        scene.means[0] = tiny_camera.center + 2.0 * axis
        scene.means[1] = tiny_camera.center + 1.0 * axis
        order = [pg.index for pg in project(scene, tiny_camera)]
        assert order == [1, 0]

    def test_ties_broken_by_index(self, tiny_camera):
        scene = GaussianScene(np.zeros((3, 3)), np.full((3, 3), 30.0),
                              [[1, 0, 0, 0]] * 3, np.zeros(3), np.zeros((3, 4, 3)))
        order = [pg.index for pg in project(scene, tiny_camera)]
        assert order == [0, 1, 2]


class TestRenderForward:
    def test_empty_scene_black(self, tiny_camera):
        out = render_forward(GaussianScene.empty(1), tiny_camera, BLACK)
        assert np.all(out.image.pixels == 0.0)

    def test_background_fills_empty(self, tiny_camera):
        bg = np.array([0.2, 0.4, 0.6])
        out = render_forward(GaussianScene.empty(1), tiny_camera, bg)
        assert np.allclose(out.image.pixels, bg[None, None, :], atol=0)

    def test_wide_centered_gaussian_center_pixel(self):
        # wide splat centered on a pixel ray: alpha there is the opacity
        cam = look_at_camera((3.0, 0.0, 0.0), (0, 0, 0), fx=16.0, fy=16.0,
                             width=16, height=16)
        scene = on_axis_scene(3.0, 0.25, 0.9, (1.0, 0.0, 0.0), cam)
        scene.means[0] = cam.unproject(np.array([[8.5, 8.5]]), np.array([3.0]))[0]
        out = render_forward(scene, cam, BLACK)
        (pg,) = project(scene, cam)
        # independent scalar compositing oracle at the center pixel
        d = np.array([8.0 + 0.5 - pg.mean2d[0], 8.0 + 0.5 - pg.mean2d[1]])
        conic = np.linalg.inv(pg.cov2d)
        alpha = min(0.99, pg.opacity * np.exp(-0.5 * d @ conic @ d))
        want = np.array([alpha * 1.0, 0.0, 0.0])
        got = out.image.pixels[8, 8]
        assert np.abs(got - want).max() < 1e-12
        assert got[0] == pytest.approx(0.9, abs=1e-9)

    def test_two_splat_compositing(self):
        cam = look_at_camera((3.0, 0.0, 0.0), (0, 0, 0), fx=16.0, fy=16.0,
                             width=16, height=16)
        center = cam.center
        axis = cam.rotation[2]
        # both splats exactly on the axis; pixel centers land on (8.5, 8.5)px,
        # so place the means at the pixel center ray instead of the axis
        def mean_at(depth):
            return cam.unproject(np.array([[8.5, 8.5]]), np.array([depth]))[0]

        sh = np.zeros((2, 1, 3))
        sh[0, 0, 0] = dc_coeff_for(1.0)   # front: red
        sh[0, 0, 1] = dc_coeff_for(0.0)
        sh[0, 0, 2] = dc_coeff_for(0.0)
        sh[1, 0, 2] = dc_coeff_for(1.0)   # back: blue
        sh[1, 0, 0] = dc_coeff_for(0.0)
        sh[1, 0, 1] = dc_coeff_for(0.0)
        scene = GaussianScene(
            np.stack([mean_at(2.0), mean_at(4.0)]),
            np.full((2, 3), raw_scale_for(0.3)),
            [[1, 0, 0, 0]] * 2, [logit(0.5)] * 2, sh)
        out = render_forward(scene, cam, BLACK)
        got = out.image.pixels[8, 8]
        # exact at the shared pixel center: alpha = opacity = 0.5 for both
        assert np.abs(got - [0.5, 0.0, 0.25]).max() < 1e-9

    def test_deterministic_bit_identical(self, tiny_camera, rng):
        scene = random_scene(rng, 12)
        a = render_forward(scene, tiny_camera, BLACK).image.pixels
        b = render_forward(scene, tiny_camera, BLACK).image.pixels
        assert np.array_equal(a, b)

    def test_compositing_bound(self, rng):
        cam = check_camera(16, 16)
        for _ in range(10):
            scene = random_scene(rng, int(rng.integers(1, 10)))
            out = render_forward(scene, cam, BLACK)
            peak = max(pg.color.max() for pg in project(scene, cam))
            assert out.image.pixels.max() <= peak + 1e-12

    def test_single_splat_alpha_clamp(self):
        cam = look_at_camera((3.0, 0.0, 0.0), (0, 0, 0), fx=16.0, fy=16.0,
                             width=16, height=16)
        scene = on_axis_scene(3.0, 0.25, 0.9999, (1.0, 0.0, 0.0), cam)
        out = render_forward(scene, cam, BLACK)
        assert out.image.pixels.max() <= 0.99 + 1e-12

    def test_transmittance_in_unit_range(self, tiny_camera, rng):
        scene = random_scene(rng, 10)
        aux = render_forward(scene, tiny_camera, BLACK).aux
        assert aux.final_trans.min() >= 0.0
        assert aux.final_trans.max() <= 1.0

    def test_ppm_dump(self, tmp_path, tiny_camera, rng):
        scene = random_scene(rng, 4)
        out = render_forward(scene, tiny_camera, BLACK)
        path = tmp_path / "img.ppm"
        write_ppm(path, out.image)
        data = path.read_bytes()
        assert data.startswith(b"P6\n16 16\n255\n")
        assert len(data) == len(b"P6\n16 16\n255\n") + 16 * 16 * 3


class TestRenderBackward:
    def test_zero_upstream_zero_grads(self, tiny_camera, rng):
        scene = random_scene(rng, 5)
        out = render_forward(scene, tiny_camera, BLACK)
        grad = render_backward(scene, tiny_camera, BLACK, out.aux,
                               np.zeros((16, 16, 3)))
        assert np.all(grad == 0.0)

    def test_culled_gaussian_zero_grad(self, tiny_camera, rng):
        scene = random_scene(rng, 4)
        scene.means[2] = tiny_camera.center  # depth <= near
        out = render_forward(scene, tiny_camera, BLACK)
        grad = render_backward(scene, tiny_camera, BLACK, out.aux,
                               rng.normal(0, 1, (16, 16, 3)))
        layout = scene.layout()
        for name in ("means", "raw_scales", "raw_rotations", "raw_opacities",
                     "sh_coeffs"):
            block = grad[layout.block_slice(name)].reshape(4, -1)
            assert np.all(block[2] == 0.0)

    def test_culling_consistency(self, tiny_camera, rng):
        base = random_scene(rng, 4)
        up = rng.normal(0, 1, (16, 16, 3))
        out1 = render_forward(base, tiny_camera, BLACK)
        g1 = render_backward(base, tiny_camera, BLACK, out1.aux, up)
        behind = tiny_camera.center - 0.2 * tiny_camera.rotation[2]
        aug = GaussianScene(
            np.vstack([base.means, behind[None, :]]),
            np.vstack([base.raw_scales, [[30.0, 30.0, 30.0]]]),
            np.vstack([base.raw_rotations, [[1, 0, 0, 0]]]),
            np.concatenate([base.raw_opacities, [2.0]]),
            np.vstack([base.sh_coeffs, np.zeros((1, 4, 3))]))
        out2 = render_forward(aug, tiny_camera, BLACK)
        assert np.array_equal(out1.image.pixels, out2.image.pixels)
        g2 = render_backward(aug, tiny_camera, BLACK, out2.aux, up)
        la, lb = base.layout(), aug.layout()
        for name in ("means", "raw_scales", "raw_rotations", "raw_opacities",
                     "sh_coeffs"):
            blk_a = g1[la.block_slice(name)].reshape(4, -1)
            blk_b = g2[lb.block_slice(name)].reshape(5, -1)
            assert np.array_equal(blk_a, blk_b[:4])
            assert np.all(blk_b[4] == 0.0)

    def test_stale_aux_detected(self, tiny_camera, rng):
        scene = random_scene(rng, 5)
        out = render_forward(scene, tiny_camera, BLACK)
        moved = scene.copy()
        moved.means[0, 0] += 1e-9
        with pytest.raises(StaleAux):
            render_backward(moved, tiny_camera, BLACK, out.aux,
                            np.zeros((16, 16, 3)))

    def test_finite_difference_suite_small(self, rng):
        for _ in range(5):
            res = renderer_check(rng, count=int(rng.integers(2, 9)),
                                 sh_degree=int(rng.integers(0, 4)))
            assert res.passed, (res.name, res.failures)

    def test_gradients_deterministic(self, tiny_camera, rng):
        scene = random_scene(rng, 8)
        up = rng.normal(0, 1, (16, 16, 3))
        out1 = render_forward(scene, tiny_camera, BLACK)
        out2 = render_forward(scene, tiny_camera, BLACK)
        g1 = render_backward(scene, tiny_camera, BLACK, out1.aux, up)
        g2 = render_backward(scene, tiny_camera, BLACK, out2.aux, up)
        assert np.array_equal(g1, g2)
