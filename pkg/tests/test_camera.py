from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from defa.camera import (
    Pose,
    angle_error,
    complete_third_row,
    compose_m,
    decompose_pose,
    pose_residual,
    project,
    project_points,
    rotation_matrix,
    transform,
)
from defa.energy import residual_lfc
from defa.errors import DegenerateCameraError
from defa.model import assemble_shape

angles = st.floats(-1.5, 1.5)


def _rot_x(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _rot_y(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def _rot_z(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def _pose_close(a: Pose, b: Pose, tol: float):
    for f in ("scale", "tx", "ty"):
        assert abs(getattr(a, f) - getattr(b, f)) <= tol * max(1.0, abs(getattr(b, f)))
    for f in ("pitch", "yaw", "roll"):
        assert angle_error(getattr(a, f), getattr(b, f)) <= tol


class TestThirdRow:
    def test_canonical_frame(self):
        assert np.array_equal(complete_third_row([1, 0, 0, 7, 0, 1, 0, -3]), [0, 0, 1])

    def test_scaled_frame(self):
        assert np.allclose(complete_third_row([2, 0, 0, 0, 0, 2, 0, 0]), [0, 0, 1], atol=1e-15)

    def test_random_rotation(self, rng):
        for _ in range(20):
            R = rotation_matrix(*rng.uniform(-1.5, 1.5, 3))
            s = rng.uniform(0.1, 10)
            m = np.concatenate([s * R[0], [1.0], s * R[1], [2.0]])
            assert np.max(np.abs(complete_third_row(m) - R[2])) < 1e-12

    @given(st.floats(0.01, 100), st.integers(0, 2**32 - 1))
    def test_scale_invariant(self, c, seed):
        rng = np.random.default_rng(seed)
        m = rng.normal(0, 1, 8)
        scaled = m.copy()
        scaled[[0, 1, 2, 4, 5, 6]] *= c
        assert np.max(np.abs(complete_third_row(scaled) - complete_third_row(m))) <= 1e-12

    def test_zero_row_is_degenerate(self):
        with pytest.raises(DegenerateCameraError):
            complete_third_row([0, 0, 0, 0, 0, 1, 0, 0])


class TestTransform:
    S = np.array([[1.0, -2.0, 0.5], [3.0, 0.0, -1.0], [9.0, -4.0, 2.0]])

    def test_identity(self):
        A = transform([1, 0, 0, 0, 0, 1, 0, 0], self.S)
        assert np.array_equal(A, self.S)

    def test_translation(self):
        A = transform([1, 0, 0, 5, 0, 1, 0, -2], self.S)
        assert np.array_equal(A[0], self.S[0] + 5)
        assert np.array_equal(A[1], self.S[1] - 2)
        assert np.array_equal(A[2], self.S[2])

    def test_scaled_yaw_against_rotation_oracle(self):
        pose = Pose(scale=2.0, yaw=math.pi / 6)
        A = transform(compose_m(pose), self.S)
        expected = 2.0 * _rot_y(math.pi / 6) @ self.S
        for k in range(self.S.shape[1]):
            assert np.allclose(A[:, k], expected[:, k], atol=1e-12)

    def test_projection_drops_depth(self):
        assert np.array_equal(project(np.array([[3.0], [4.0], [9.0]])), [[3.0], [4.0]])
        assert np.array_equal(project(self.S), self.S[:2])

    def test_project_matches_landmark_term(self, face_model, rng):
        m = compose_m(Pose(90, 0.1, -0.4, 0.05, 120, 130))
        p = rng.normal(0, 1, face_model.n_params)
        idx = face_model.markup("pts68").indices
        via_camera = project(transform(m, assemble_shape(face_model, p)))[:, idx]
        assert np.array_equal(via_camera, project_points(m, assemble_shape(face_model, p))[:, idx])
        # A block whose targets are these projections has zero residual.
        assert residual_lfc(m, p, face_model, "pts68", via_camera).energy == 0.0

    @given(st.floats(-2, 3), st.integers(0, 2**32 - 1))
    def test_affine_in_shape(self, a, seed):
        rng = np.random.default_rng(seed)
        m = rng.normal(0, 2, 8)
        S1, S2 = rng.normal(0, 5, (2, 3, 10))
        b = 1 - a
        lhs = project_points(m, a * S1 + b * S2)
        rhs = a * project_points(m, S1) + b * project_points(m, S2)
        assert np.max(np.abs(lhs - rhs)) <= 1e-10 * max(1.0, np.abs(lhs).max())


class TestPose:
    def test_identity_pose(self):
        assert np.array_equal(compose_m(Pose()), [1, 0, 0, 0, 0, 1, 0, 0])

    def test_quarter_roll(self):
        assert np.allclose(compose_m(Pose(roll=math.pi / 2)), [0, -1, 0, 0, 1, 0, 0, 0], atol=1e-15)

    def test_euler_order(self, rng):
        for _ in range(10):
            a, b, c = rng.uniform(-1, 1, 3)
            assert np.allclose(rotation_matrix(a, b, c), _rot_z(c) @ _rot_y(b) @ _rot_x(a), atol=1e-15)

    def test_identity_m_decomposes_to_identity(self):
        _pose_close(decompose_pose([1, 0, 0, 0, 0, 1, 0, 0]), Pose(), 1e-15)

    def test_scale_and_pitch_roundtrip(self):
        pose = Pose(scale=3.0, pitch=0.2)
        _pose_close(decompose_pose(compose_m(pose)), pose, 1e-9)

    @given(
        st.floats(0.1, 10),
        angles,
        angles,
        angles,
        st.floats(-500, 500),
        st.floats(-500, 500),
    )
    def test_roundtrip(self, scale, pitch, yaw, roll, tx, ty):
        pose = Pose(scale, pitch, yaw, roll, tx, ty)
        _pose_close(decompose_pose(compose_m(pose)), pose, 1e-9)

    def test_unequal_row_norms(self):
        pose = Pose(scale=50.0, pitch=0.1, yaw=0.3, roll=-0.2, tx=4, ty=5)
        m = compose_m(pose)
        m[4:7] *= 1.01
        got = decompose_pose(m)
        assert abs(got.scale - 50.0 * (1 + 1.01) / 2) < 1e-12
        assert pose_residual(m) > 0.1
        assert pose_residual(compose_m(pose)) < 1e-12

    def test_parallel_rows_rejected(self):
        with pytest.raises(DegenerateCameraError):
            decompose_pose([1, 1, 0, 0, 2, 2, 0, 0])

    def test_json_in_degrees(self):
        js = Pose(2.0, 0.0, math.pi / 4, 0.0, 1.0, 2.0).to_json()
        assert js["yaw_deg"] == pytest.approx(45.0)
        assert js["scale"] == 2.0

    def test_angle_error_wraps(self):
        assert angle_error(math.pi - 0.01, -math.pi + 0.01) == pytest.approx(0.02)
        assert angle_error(0.3, 0.1) == pytest.approx(0.2)
