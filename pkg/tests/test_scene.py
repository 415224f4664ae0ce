import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metasplat.errors import (
    CorruptHeader,
    DegenerateQuaternion,
    FormatVersionMismatch,
    LayoutMismatch,
    ShapeMismatch,
)
from metasplat.gradcheck import activation_check, random_scene
from metasplat.scene import (
    ATTRIBUTE_BLOCKS,
    FlatParams,
    GaussianScene,
    SceneLayout,
    activate,
    activate_backward,
    flatten,
    load_scene,
    look_at_camera,
    save_scene,
    unflatten,
)


def scenes_equal(a, b):
    return all(np.array_equal(getattr(a, f), getattr(b, f)) for f in ATTRIBUTE_BLOCKS)


class TestActivate:
    def test_zero_opacity_logit_gives_half(self):
        s = GaussianScene(np.zeros((1, 3)), np.zeros((1, 3)), [[1, 0, 0, 0]],
                          np.zeros(1), np.zeros((1, 4, 3)))
        assert activate(s).opacities[0] == pytest.approx(0.5, abs=0)

    def test_unit_quaternion_passthrough(self):
        s = GaussianScene(np.zeros((1, 3)), np.zeros((1, 3)), [[1, 0, 0, 0]],
                          np.zeros(1), np.zeros((1, 4, 3)))
        assert np.allclose(activate(s).rotations[0], [1, 0, 0, 0], atol=0)

    def test_zero_raw_scale(self):
        s = GaussianScene(np.zeros((1, 3)), np.zeros((1, 3)), [[1, 0, 0, 0]],
                          np.zeros(1), np.zeros((1, 4, 3)))
        assert activate(s).scales[0, 0] == pytest.approx(1e-3 * np.log(2.0), rel=1e-12)

    def test_degenerate_quaternion_raises(self):
        s = GaussianScene(np.zeros((1, 3)), np.zeros((1, 3)), [[1e-9, 0, 0, 0]],
                          np.zeros(1), np.zeros((1, 4, 3)))
        with pytest.raises(DegenerateQuaternion):
            activate(s)

    def test_invariants_on_random_scenes(self, rng):
        for _ in range(20):
            scene = random_scene(rng, int(rng.integers(1, 20)))
            scene.raw_scales[:] = rng.uniform(-5, 400, scene.raw_scales.shape)
            phys = activate(scene)
            assert phys.scales.min() > 0.0
            assert phys.scales.max() <= 0.3
            assert np.all(phys.opacities > 0) and np.all(phys.opacities < 1)
            assert np.abs(np.linalg.norm(phys.rotations, axis=1) - 1).max() < 1e-6


class TestActivateBackward:
    def test_opacity_derivative_at_zero(self):
        s = GaussianScene(np.zeros((1, 3)), np.zeros((1, 3)), [[1, 0, 0, 0]],
                          np.zeros(1), np.zeros((1, 4, 3)))
        _, _, d_op = activate_backward(s, np.zeros((1, 3)), np.zeros((1, 4)),
                                       np.ones(1))
        assert d_op[0] == pytest.approx(0.25, rel=1e-15)

    def test_clamped_scale_gets_zero_gradient(self):
        s = GaussianScene(np.zeros((1, 3)), np.full((1, 3), 400.0), [[1, 0, 0, 0]],
                          np.zeros(1), np.zeros((1, 4, 3)))
        assert activate(s).scales[0, 0] == 0.3
        d_s, _, _ = activate_backward(s, np.ones((1, 3)), np.zeros((1, 4)),
                                      np.zeros(1))
        assert np.all(d_s == 0.0)

    def test_shape_mismatch(self, tiny_scene):
        with pytest.raises(ShapeMismatch):
            activate_backward(tiny_scene, np.zeros((2, 3)), np.zeros((6, 4)),
                              np.zeros(6))

    def test_matches_finite_differences(self, rng):
        res = activation_check(rng, count=20)
        assert res.passed, res.failures


class TestFlatten:
    def test_empty_scene(self):
        s = GaussianScene.empty(1)
        flat = flatten(s)
        assert flat.data.size == 0
        assert scenes_equal(unflatten(flat), s)

    def test_single_gaussian_degree0_length(self):
        s = GaussianScene(np.zeros((1, 3)), np.zeros((1, 3)), [[1, 0, 0, 0]],
                          np.zeros(1), np.zeros((1, 1, 3)))
        assert flatten(s).data.shape == (14,)

    def test_roundtrip_exact_n17_l2(self, rng):
        s = random_scene(rng, 17, sh_degree=2)
        back = unflatten(flatten(s))
        assert scenes_equal(s, back)

    def test_layout_mismatch(self):
        layout = SceneLayout(2, 1)
        with pytest.raises(LayoutMismatch):
            FlatParams(np.zeros(layout.total + 1), layout)
        with pytest.raises(LayoutMismatch):
            unflatten(FlatParams(np.zeros(SceneLayout(1, 1).total), SceneLayout(1, 1)),
                      SceneLayout(2, 1))

    @settings(max_examples=25, deadline=None)
    @given(count=st.integers(0, 12), degree=st.integers(0, 3),
           seed=st.integers(0, 2 ** 31))
    def test_roundtrip_property(self, count, degree, seed):
        gen = np.random.default_rng(seed)
        scene = random_scene(gen, count, sh_degree=degree)
        assert scenes_equal(scene, unflatten(flatten(scene)))


class TestSceneIo:
    def test_empty_scene_header_only(self, tmp_path):
        path = tmp_path / "empty.fspl"
        save_scene(path, GaussianScene.empty(2))
        assert path.stat().st_size == 32
        assert scenes_equal(load_scene(path), GaussianScene.empty(2))

    def test_roundtrip_bytes_and_fields(self, tmp_path, rng):
        scene = random_scene(rng, 9, sh_degree=3)
        p1, p2 = tmp_path / "a.fspl", tmp_path / "b.fspl"
        save_scene(p1, scene)
        back = load_scene(p1)
        assert scenes_equal(scene, back)
        save_scene(p2, back)
        assert p1.read_bytes() == p2.read_bytes()

    def test_truncated_file(self, tmp_path, rng):
        path = tmp_path / "t.fspl"
        save_scene(path, random_scene(rng, 3))
        data = path.read_bytes()
        path.write_bytes(data[:20])
        with pytest.raises(CorruptHeader):
            load_scene(path)
        path.write_bytes(data[:-8])
        with pytest.raises(CorruptHeader):
            load_scene(path)

    def test_bad_magic_and_version(self, tmp_path, rng):
        path = tmp_path / "m.fspl"
        save_scene(path, random_scene(rng, 3))
        data = bytearray(path.read_bytes())
        bad = tmp_path / "bad.fspl"
        bad.write_bytes(b"NOPE" + bytes(data[4:]))
        with pytest.raises(CorruptHeader):
            load_scene(bad)
        data[4] = 99
        bad.write_bytes(bytes(data))
        with pytest.raises(FormatVersionMismatch):
            load_scene(bad)


class TestCamera:
    def test_look_at_orthonormal_and_aimed(self):
        cam = look_at_camera((2.5, 0.3, 0.4), (0, 0, 0), fx=32, fy=32,
                             width=32, height=32)
        assert np.abs(cam.rotation @ cam.rotation.T - np.eye(3)).max() < 1e-12
        # the target projects to the principal point
        t = cam.to_camera(np.zeros((1, 3)))[0]
        assert t[2] > 0
        assert abs(t[0]) < 1e-12 and abs(t[1]) < 1e-12

    def test_rejects_non_orthonormal(self):
        from metasplat.scene import Camera
        with pytest.raises(ValueError):
            Camera(rotation=np.eye(3) * 1.1, translation=np.zeros(3), fx=10,
                   fy=10, cx=8, cy=8, width=16, height=16)

    def test_unproject_inverts_projection(self, rng):
        cam = look_at_camera((2.0, -1.0, 0.8), (0, 0, 0), fx=24, fy=24,
                             width=24, height=24)
        pts = rng.uniform(-0.5, 0.5, (10, 3))
        t = cam.to_camera(pts)
        px = np.stack([cam.fx * t[:, 0] / t[:, 2] + cam.cx,
                       cam.fy * t[:, 1] / t[:, 2] + cam.cy], axis=1)
        back = cam.unproject(px, t[:, 2])
        assert np.abs(back - pts).max() < 1e-12
