"""Weak-perspective camera: the 8-vector ``m`` holding the top two rows of a 3x4 matrix.

``m = [m1, m2, m3, m4, m5, m6, m7, m8]``; ``(m1, m2, m3)`` and ``(m5, m6, m7)`` are
scaled rotation rows and ``m4``, ``m8`` the image translation in pixels. The depth
row is never stored; it is completed from the first two as needed.

Rotation convention (used everywhere through :func:`compose_m` /
:func:`decompose_pose`): ``R = Rz(roll) @ Ry(yaw) @ Rx(pitch)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from defa.errors import DegenerateCameraError

ROW_EPS = 1e-12

# Orthographic projection; applied as A[:2] but kept for readers of the math.
PR = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])


@dataclass(frozen=True)
class Pose:
    """Scale, Euler angles in radians and pixel translation."""

    scale: float = 1.0
    pitch: float = 0.0
    yaw: float = 0.0
    roll: float = 0.0
    tx: float = 0.0
    ty: float = 0.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    @property
    def angles(self) -> np.ndarray:
        return np.array([self.pitch, self.yaw, self.roll])

    def to_json(self) -> dict[str, float]:
        return {
            "scale": self.scale,
            "pitch_deg": math.degrees(self.pitch),
            "yaw_deg": math.degrees(self.yaw),
            "roll_deg": math.degrees(self.roll),
            "tx": self.tx,
            "ty": self.ty,
        }


def as_m(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64).reshape(-1)
    if m.shape != (8,):
        raise ValueError(f"projection parameters must have 8 entries, got {m.shape}")
    return m


def rotation_matrix(pitch: float, yaw: float, roll: float) -> np.ndarray:
    ca, sa = math.cos(pitch), math.sin(pitch)
    cb, sb = math.cos(yaw), math.sin(yaw)
    cg, sg = math.cos(roll), math.sin(roll)
    rx = np.array([[1, 0, 0], [0, ca, -sa], [0, sa, ca]])
    ry = np.array([[cb, 0, sb], [0, 1, 0], [-sb, 0, cb]])
    rz = np.array([[cg, -sg, 0], [sg, cg, 0], [0, 0, 1]])
    return rz @ ry @ rx


def complete_third_row(m) -> np.ndarray:
    """Unit depth row: cross product of the normalized first two rows."""
    m = as_m(m)
    r1, r2 = m[0:3], m[4:7]
    n1, n2 = np.linalg.norm(r1), np.linalg.norm(r2)
    if n1 <= ROW_EPS or n2 <= ROW_EPS:
        raise DegenerateCameraError(f"camera row norm too small ({n1:.3g}, {n2:.3g})")
    return np.cross(r1 / n1, r2 / n2)


def project_points(m, S: np.ndarray) -> np.ndarray:
    """Image positions ``(2, N)`` of 3D points ``S`` ``(3, N)``; skips the depth row."""
    m = as_m(m)
    return m.reshape(2, 4)[:, :3] @ S + m.reshape(2, 4)[:, 3:]


def transform(m, S: np.ndarray) -> np.ndarray:
    """Apply the weak-perspective camera to a dense shape.

    Rows 1-2 are ``m`` applied to ``[S; 1]``. Row 3 is the completed unit depth row
    scaled by the mean of the two row norms (so depth shares the x/y scale) with
    zero translation.
    """
    m = as_m(m)
    r3 = complete_third_row(m)
    depth_scale = 0.5 * (np.linalg.norm(m[0:3]) + np.linalg.norm(m[4:7]))
    A = np.empty((3, S.shape[1]))
    A[:2] = project_points(m, S)
    A[2] = (depth_scale * r3) @ S
    return A


def project(A: np.ndarray) -> np.ndarray:
    return PR @ A


def compose_m(pose: Pose) -> np.ndarray:
    R = rotation_matrix(pose.pitch, pose.yaw, pose.roll)
    return np.concatenate([pose.scale * R[0], [pose.tx], pose.scale * R[1], [pose.ty]])


def _wrap(angle: float) -> float:
    # atan2 can return -pi exactly; the pose range is (-pi, pi].
    return math.pi if angle <= -math.pi else angle


def orthonormal_rotation(m) -> np.ndarray:
    """Nearest rotation to the camera rows by Gram-Schmidt (row 1 kept, row 2 orthogonalized)."""
    m = as_m(m)
    r1, r2 = m[0:3], m[4:7]
    n1, n2 = np.linalg.norm(r1), np.linalg.norm(r2)
    if n1 <= ROW_EPS or n2 <= ROW_EPS:
        raise DegenerateCameraError(f"camera row norm too small ({n1:.3g}, {n2:.3g})")
    u1 = r1 / n1
    v2 = r2 - (u1 @ r2) * u1
    nv = np.linalg.norm(v2)
    if nv <= 1e-9 * n2:
        raise DegenerateCameraError("camera rows are parallel")
    u2 = v2 / nv
    return np.vstack([u1, u2, np.cross(u1, u2)])


def decompose_pose(m) -> Pose:
    """Recover scale, Euler angles and translation from a (possibly non-rigid) ``m``.

    Scale is the mean of the two row norms. When the rows are not an exact scaled
    rotation, the rotation is their Gram-Schmidt orthonormalization; the mismatch
    is available from :func:`pose_residual`.
    """
    m = as_m(m)
    R = orthonormal_rotation(m)
    scale = 0.5 * (np.linalg.norm(m[0:3]) + np.linalg.norm(m[4:7]))
    yaw = -math.asin(max(-1.0, min(1.0, R[2, 0])))
    pitch = math.atan2(R[2, 1], R[2, 2])
    roll = math.atan2(R[1, 0], R[0, 0])
    return Pose(float(scale), _wrap(pitch), _wrap(yaw), _wrap(roll), float(m[3]), float(m[7]))


def pose_residual(m) -> float:
    """Max absolute difference between ``m`` and the rigid camera it decomposes to."""
    m = as_m(m)
    return float(np.max(np.abs(m - compose_m(decompose_pose(m)))))


def angle_error(a: float, b: float) -> float:
    """Absolute angular difference wrapped to [0, pi]."""
    d = (a - b + math.pi) % (2 * math.pi) - math.pi
    return abs(d)
