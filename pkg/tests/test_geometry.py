import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from flowmvs.geometry import (
    CameraView,
    camera_direction,
    level_factor,
    look_at_view,
    pixel_grid,
    project,
    quantize_view,
    read_cam,
    scale_intrinsics,
    unproject,
    write_cam,
)

from conftest import random_view


def _simple_view(R=np.eye(3), t=(0.0, 0.0, 0.0)):
    K = np.array([[800.0, 0.0, 80.0], [0.0, 800.0, 64.0], [0.0, 0.0, 1.0]])
    return CameraView(K, R, np.asarray(t), (160, 128))


class TestCameraView:
    def test_rejects_lower_triangular_intrinsics(self):
        K = np.array([[800.0, 0, 80], [1.0, 800, 64], [0, 0, 1]])
        with pytest.raises(ValueError):
            CameraView(K, np.eye(3), np.zeros(3), (160, 128))

    def test_rejects_non_positive_focal(self):
        K = np.array([[-800.0, 0, 80], [0, 800, 64], [0, 0, 1]])
        with pytest.raises(ValueError):
            CameraView(K, np.eye(3), np.zeros(3), (160, 128))

    def test_rejects_reflection(self):
        with pytest.raises(ValueError):
            _simple_view(R=np.diag([1.0, 1.0, -1.0]))

    def test_rejects_non_orthonormal(self):
        with pytest.raises(ValueError):
            _simple_view(R=np.eye(3) * 1.01)

    def test_rejects_bad_size(self):
        K = np.array([[800.0, 0, 80], [0, 800, 64], [0, 0, 1]])
        with pytest.raises(ValueError):
            CameraView(K, np.eye(3), np.zeros(3), (0, 128))

    def test_center(self):
        rng = np.random.default_rng(0)
        v = random_view(rng)
        c = v.center
        np.testing.assert_allclose(v.rotation @ c + v.translation, 0.0, atol=1e-9)


class TestProject:
    def test_principal_axis_hits_principal_point(self):
        rng = np.random.default_rng(1)
        v = random_view(rng)
        for level in range(4):
            p = v.center + 700.0 * camera_direction(v)
            pix, d, ok = project(p, v, level)
            f = level_factor(level)
            np.testing.assert_allclose(pix.numpy(), v.intrinsics[:2, 2] * f, atol=1e-9)
            assert float(d) == pytest.approx(700.0, rel=1e-12)
            assert bool(ok)

    def test_behind_camera_is_flagged(self):
        v = _simple_view()
        pix, d, ok = project(torch.tensor([[0.0, 0.0, -5.0], [0.0, 0.0, 0.0], [1.0, 2.0, 10.0]],
                                          dtype=torch.float64), v)
        assert ok.tolist() == [False, False, True]
        assert torch.isfinite(pix).all()

    def test_level_halves_pixels(self):
        rng = np.random.default_rng(2)
        v = random_view(rng)
        pts = torch.as_tensor(rng.uniform(-50, 50, (100, 3)))
        p0, _, _ = project(pts, v, 0)
        for level in (1, 2, 3):
            pl, _, _ = project(pts, v, level)
            # oracle: explicitly scaled intrinsics
            K = v.intrinsics.copy()
            K[:2] *= 0.5**level
            cam = pts.numpy() @ v.rotation.T + v.translation
            uv = (cam @ K.T)[:, :2] / cam[:, 2:]
            np.testing.assert_allclose(pl.numpy(), uv, rtol=1e-12, atol=1e-9)
            np.testing.assert_allclose(pl.numpy(), p0.numpy() / 2**level, rtol=1e-12, atol=1e-9)

    def test_invalid_level(self):
        with pytest.raises(ValueError):
            project(torch.zeros(1, 3), _simple_view(), level=4)


class TestUnproject:
    def test_principal_point_on_axis(self):
        rng = np.random.default_rng(3)
        v = random_view(rng)
        p = unproject(v.intrinsics[:2, 2], 600.0, v).numpy()
        np.testing.assert_allclose(p, v.center + 600.0 * camera_direction(v), atol=1e-9)

    def test_rejects_non_positive_depth(self):
        with pytest.raises(ValueError):
            unproject(np.zeros(2), 0.0, _simple_view())
        with pytest.raises(ValueError):
            unproject(np.zeros((2, 2)), np.array([1.0, -1.0]), _simple_view())

    def test_full_map_cardinality(self):
        v = _simple_view()
        grid = pixel_grid(128, 160, torch.float64).reshape(-1, 2)
        pts = unproject(grid, torch.full((len(grid),), 500.0, dtype=torch.float64), v)
        assert pts.shape == (128 * 160, 3)

    def test_round_trip_bulk(self):
        rng = np.random.default_rng(4)
        v = random_view(rng)
        pix = torch.as_tensor(rng.uniform(0, [160, 128], (10_000, 2)))
        d = torch.as_tensor(rng.uniform(400, 950, 10_000))
        back, z, ok = project(unproject(pix, d, v), v)
        assert ok.all()
        assert float((back - pix).abs().max()) < 1e-6
        assert float(((z - d) / d).abs().max()) < 1e-6

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), level=st.integers(0, 3))
    def test_round_trip_property(self, seed, level):
        rng = np.random.default_rng(seed)
        v = random_view(rng)
        pts = torch.as_tensor(rng.uniform(-40, 40, (50, 3)))
        pix, z, ok = project(pts, v, level)
        assert ok.all()
        back = unproject(pix, z, v, level)
        assert float((back - pts).abs().max()) < 1e-6 * 700

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), delta=st.floats(-100, 100))
    def test_axis_displacement_changes_depth_exactly(self, seed, delta):
        rng = np.random.default_rng(seed)
        v = random_view(rng)
        p = rng.uniform(-40, 40, 3)
        _, z0, _ = project(p, v)
        _, z1, _ = project(p + delta * camera_direction(v), v)
        assert float(z1 - z0) == pytest.approx(delta, abs=1e-9)


class TestScaleIntrinsics:
    def test_identity(self):
        v = random_view(np.random.default_rng(5))
        np.testing.assert_array_equal(scale_intrinsics(v, 1.0).intrinsics, v.intrinsics)

    def test_composition(self):
        v = random_view(np.random.default_rng(6))
        a = scale_intrinsics(scale_intrinsics(v, 0.5), 0.5)
        np.testing.assert_allclose(a.intrinsics, scale_intrinsics(v, 0.25).intrinsics, rtol=1e-15)

    @settings(max_examples=40, deadline=None)
    @given(a=st.floats(0.05, 4), b=st.floats(0.05, 4))
    def test_multiplicative(self, a, b):
        v = random_view(np.random.default_rng(7))
        np.testing.assert_allclose(scale_intrinsics(scale_intrinsics(v, a), b).intrinsics,
                                   scale_intrinsics(v, a * b).intrinsics, rtol=1e-12)

    def test_arithmetic(self):
        v = _simple_view()
        s = scale_intrinsics(v, 1 / 8)
        assert s.intrinsics[0, 0] == 100.0
        np.testing.assert_array_equal(s.rotation, v.rotation)
        np.testing.assert_array_equal(s.translation, v.translation)
        assert s.image_size == (20, 16)

    def test_rejects_non_positive(self):
        with pytest.raises(ValueError):
            scale_intrinsics(_simple_view(), 0.0)


class TestCameraDirection:
    def test_identity(self):
        np.testing.assert_array_equal(camera_direction(_simple_view()), [0.0, 0.0, 1.0])

    def test_half_turn_about_y(self):
        R = np.array([[-1.0, 0, 0], [0, 1, 0], [0, 0, -1]])
        np.testing.assert_allclose(camera_direction(_simple_view(R=R)), [0.0, 0.0, -1.0])

    def test_third_row(self):
        v = random_view(np.random.default_rng(8))
        t = camera_direction(v)
        np.testing.assert_allclose(t, v.rotation[2], atol=1e-12)
        assert abs(np.linalg.norm(t) - 1.0) < 1e-9


class TestCameraFiles:
    def test_round_trip_is_bit_exact(self, tmp_path):
        v = quantize_view(random_view(np.random.default_rng(9)))
        write_cam(tmp_path / "c.txt", v, 425.0, 10.553191489, 48, 921.0)
        back, rng = read_cam(tmp_path / "c.txt", v.image_size)
        np.testing.assert_array_equal(back.intrinsics, v.intrinsics)
        np.testing.assert_array_equal(back.rotation, v.rotation)
        np.testing.assert_array_equal(back.translation, v.translation)
        assert (rng.depth_min, rng.depth_num, rng.depth_max) == (425.0, 48, 921.0)

    def test_two_value_depth_line(self, tmp_path):
        v = quantize_view(_simple_view())
        write_cam(tmp_path / "c.txt", v, 425.0, 2.0)
        _, rng = read_cam(tmp_path / "c.txt", v.image_size)
        assert rng.depth_num is None
        assert rng.resolved_max(5) == 433.0

    def test_malformed(self, tmp_path):
        (tmp_path / "bad.txt").write_text("extrinsic\n1 0 0\n")
        with pytest.raises(ValueError):
            read_cam(tmp_path / "bad.txt", (160, 128))


class TestLookAt:
    def test_target_projects_to_centre(self):
        v = look_at_view([100.0, 0.0, -600.0], [0.0, 0.0, 0.0], 600.0, (160, 128))
        pix, d, _ = project(np.zeros(3), v)
        np.testing.assert_allclose(pix.numpy(), [79.5, 63.5], atol=1e-9)
        assert float(d) == pytest.approx(np.hypot(100.0, 600.0))
