"""Camera model and rigid-transform tests."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sfmdepth.errors import InvalidDepth, PointBehindCamera
from sfmdepth.geometry import (
    CameraIntrinsics,
    Pixel,
    RigidTransform,
    matrix_to_quat,
    pixel_direction_grid,
    project,
    project_array,
    quat_to_matrix,
    relative_pose,
    round_half_away,
    unproject,
    unproject_grid,
)

INTR = CameraIntrinsics(fx=100.0, fy=110.0, cx=16.0, cy=12.0, width=32, height=24)


def unit_vectors():
    return (
        st.lists(st.floats(-1, 1, allow_nan=False), min_size=3, max_size=3)
        .map(np.array)
        .filter(lambda v: np.linalg.norm(v) > 1e-3)
    )


def transforms():
    return st.builds(
        RigidTransform.from_axis_angle,
        axis=unit_vectors(),
        angle=st.floats(-3.1, 3.1),
        translation=st.lists(st.floats(-5, 5), min_size=3, max_size=3).map(np.array),
    )


def points3d():
    return st.lists(st.floats(-10, 10), min_size=3, max_size=3).map(np.array)


class TestQuaternions:
    def test_identity_matrix(self):
        assert np.allclose(quat_to_matrix(np.array([1.0, 0, 0, 0])), np.eye(3))
        assert np.allclose(matrix_to_quat(np.eye(3)), [1.0, 0, 0, 0])

    def test_quarter_turn_about_z(self):
        t = RigidTransform.from_axis_angle([0, 0, 1], np.pi / 2)
        assert np.allclose(t.apply([1.0, 0.0, 0.0]), [0.0, 1.0, 0.0], atol=1e-12)

    @settings(max_examples=60)
    @given(t=transforms())
    def test_rotation_is_orthonormal(self, t):
        R = t.rotation_matrix()
        assert np.allclose(R.T @ R, np.eye(3), atol=1e-10)
        assert np.isclose(np.linalg.det(R), 1.0, atol=1e-10)

    @settings(max_examples=60)
    @given(axis=unit_vectors(), angle=st.floats(-3.14, 3.14))
    def test_matrix_quaternion_round_trip(self, axis, angle):
        q = RigidTransform.from_axis_angle(axis, angle).rotation
        R = quat_to_matrix(q)
        q2 = matrix_to_quat(R)
        # q and -q encode the same rotation
        assert np.allclose(q, q2, atol=1e-9) or np.allclose(q, -q2, atol=1e-9)

    def test_near_half_turn_round_trip(self):
        for axis in ([1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 1]):
            q = RigidTransform.from_axis_angle(axis, np.pi - 1e-7).rotation
            R2 = quat_to_matrix(matrix_to_quat(quat_to_matrix(q)))
            assert np.allclose(quat_to_matrix(q), R2, atol=1e-9)


class TestRigidTransform:
    def test_rotation_normalized_on_construction(self):
        t = RigidTransform(rotation=np.array([2.0, 0.0, 0.0, 0.0]))
        assert np.allclose(t.rotation, [1.0, 0, 0, 0])

    def test_zero_quaternion_rejected(self):
        with pytest.raises(ValueError):
            RigidTransform(rotation=np.zeros(4))

    @settings(max_examples=60)
    @given(a=transforms(), b=transforms(), x=points3d())
    def test_compose_applies_right_to_left(self, a, b, x):
        assert np.allclose(a.compose(b).apply(x), a.apply(b.apply(x)), atol=1e-8)

    @settings(max_examples=60)
    @given(t=transforms(), x=points3d())
    def test_inverse_round_trip(self, t, x):
        assert np.allclose(t.inverse().apply(t.apply(x)), x, atol=1e-8)

    @settings(max_examples=40)
    @given(tj=transforms(), tk=transforms(), x=points3d())
    def test_relative_pose_bridges_frames(self, tj, tk, x):
        rel = relative_pose(tj, tk)
        assert np.allclose(rel.apply(tj.apply(x)), tk.apply(x), atol=1e-7)

    def test_apply_array_matches_apply(self):
        rng = np.random.default_rng(0)
        t = RigidTransform.from_axis_angle([1, 2, 3], 0.7, translation=[0.1, -0.2, 0.3])
        pts = rng.standard_normal((10, 3))
        rows = np.stack([t.apply(p) for p in pts])
        assert np.allclose(t.apply_array(pts), rows, atol=1e-12)

    def test_almost_equal_accepts_negated_quaternion(self):
        t = RigidTransform.from_axis_angle([0, 1, 0], 1.0)
        flipped = RigidTransform(rotation=-t.rotation, translation=t.translation)
        assert t.almost_equal(flipped)


class TestIntrinsics:
    def test_rejects_nonpositive_focal(self):
        with pytest.raises(ValueError):
            CameraIntrinsics(fx=0.0, fy=1.0, cx=1, cy=1, width=4, height=4)

    def test_rejects_principal_point_outside_image(self):
        with pytest.raises(ValueError):
            CameraIntrinsics(fx=1.0, fy=1.0, cx=9.0, cy=1.0, width=4, height=4)


class TestProjection:
    def test_principal_axis_hits_principal_point(self):
        pix = project(INTR, [0.0, 0.0, 2.0])
        assert pix == Pixel(INTR.cx, INTR.cy)

    def test_project_unproject_round_trip(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            p = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0.5, 5)])
            pix = project(INTR, p)
            assert np.allclose(unproject(INTR, pix, p[2]), p, atol=1e-12)

    def test_project_rejects_points_behind_camera(self):
        with pytest.raises(PointBehindCamera):
            project(INTR, [0.0, 0.0, 0.0])
        with pytest.raises(PointBehindCamera):
            project(INTR, [0.0, 0.0, -1.0])

    def test_unproject_rejects_nonpositive_depth(self):
        with pytest.raises(InvalidDepth):
            unproject(INTR, Pixel(1.0, 1.0), 0.0)

    def test_project_array_matches_scalar_project(self):
        rng = np.random.default_rng(2)
        pts = np.column_stack(
            [rng.uniform(-1, 1, 20), rng.uniform(-1, 1, 20), rng.uniform(0.5, 5, 20)]
        )
        uv, z = project_array(INTR, pts)
        assert np.allclose(z, pts[:, 2])
        for i in range(20):
            pix = project(INTR, pts[i])
            assert np.allclose(uv[i], [pix.u, pix.v], atol=1e-12)

    def test_project_array_masks_nonpositive_depth_with_nan(self):
        pts = np.array([[0.0, 0.0, 1.0], [1.0, 1.0, -2.0], [0.5, 0.5, 0.0]])
        uv, z = project_array(INTR, pts)
        assert np.isfinite(uv[0]).all()
        assert np.isnan(uv[1]).all() and np.isnan(uv[2]).all()


class TestGrids:
    def test_direction_grid_is_zero_at_principal_point(self):
        dir_x, dir_y = pixel_direction_grid(INTR)
        assert dir_x.shape == (INTR.height, INTR.width)
        assert dir_x[int(INTR.cy), int(INTR.cx)] == 0.0
        assert dir_y[int(INTR.cy), int(INTR.cx)] == 0.0

    def test_direction_grid_reprojects_to_pixel_centers(self):
        dir_x, dir_y = pixel_direction_grid(INTR)
        u = INTR.fx * dir_x + INTR.cx
        v = INTR.fy * dir_y + INTR.cy
        uu, vv = np.meshgrid(np.arange(INTR.width), np.arange(INTR.height))
        assert np.allclose(u, uu, atol=1e-9)
        assert np.allclose(v, vv, atol=1e-9)

    def test_unproject_grid_z_channel_is_depth(self):
        rng = np.random.default_rng(3)
        depth = rng.uniform(1.0, 3.0, size=(INTR.height, INTR.width))
        cloud = unproject_grid(INTR, depth)
        assert cloud.shape == (INTR.height, INTR.width, 3)
        assert np.array_equal(cloud[..., 2], depth)

    def test_unproject_grid_reprojects_onto_pixel_grid(self):
        rng = np.random.default_rng(4)
        depth = rng.uniform(1.0, 3.0, size=(INTR.height, INTR.width))
        cloud = unproject_grid(INTR, depth).reshape(-1, 3)
        uv, _ = project_array(INTR, cloud)
        uu, vv = np.meshgrid(np.arange(INTR.width), np.arange(INTR.height))
        assert np.allclose(uv[:, 0], uu.reshape(-1), atol=1e-9)
        assert np.allclose(uv[:, 1], vv.reshape(-1), atol=1e-9)

    def test_zero_depth_maps_to_origin(self):
        depth = np.zeros((INTR.height, INTR.width))
        assert np.array_equal(unproject_grid(INTR, depth), np.zeros((INTR.height, INTR.width, 3)))


class TestRounding:
    def test_ties_round_away_from_zero(self):
        vals = np.array([0.5, -0.5, 1.5, 2.5, -2.5, 0.49, -0.49, 2.0])
        expect = np.array([1.0, -1.0, 2.0, 3.0, -3.0, 0.0, -0.0, 2.0])
        assert np.array_equal(round_half_away(vals), expect)

    @settings(max_examples=100)
    @given(x=st.floats(-1e6, 1e6))
    def test_result_within_half_of_input(self, x):
        r = float(round_half_away(np.array(x)))
        assert r == int(r)
        assert abs(r - x) <= 0.5 + 1e-9
