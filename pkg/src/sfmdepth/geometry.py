"""Pinhole camera model and rigid-body transforms.

Conventions used throughout the package:

* Pixel coordinates are continuous ``(u, v) = (column, row)``; integer
  coordinates sit at pixel centers.
* A :class:`RigidTransform` maps points from its source frame into its
  target frame: ``x_target = R @ x_source + t``.  Rotations are stored as
  unit quaternions ``(w, x, y, z)`` and renormalized after composition.
* All arithmetic is float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import InvalidDepth, PointBehindCamera


class Pixel(NamedTuple):
    """Continuous pixel location, u along width, v along height."""

    u: float
    v: float


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole parameters mapping camera-frame 3D points to pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside image "
                f"{self.width}x{self.height}"
            )


# --- quaternion helpers (w, x, y, z) ---------------------------------------

def _quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def _quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion (w, x, y, z)."""
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) of a rotation matrix.

    Uses the largest-pivot variant to stay stable near 180-degree
    rotations.
    """
    R = np.asarray(R, dtype=np.float64)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        )
    elif R[0, 0] >= R[1, 1] and R[0, 0] >= R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = np.array(
            [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
        )
    elif R[1, 1] >= R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = np.array(
            [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
        )
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = np.array(
            [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
        )
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) pose: ``x_target = R @ x_source + t``.

    ``rotation`` is a unit quaternion (w, x, y, z); ``translation`` a
    3-vector in scene length units.
    """

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n < 1e-12:
            raise ValueError("quaternion norm too small to normalize")
        object.__setattr__(self, "rotation", q / n)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform()

    @staticmethod
    def from_axis_angle(axis, angle: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        axis = np.asarray(axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        half = 0.5 * angle
        q = np.concatenate([[math.cos(half)], math.sin(half) * axis])
        return RigidTransform(q, np.asarray(translation, dtype=np.float64))

    @staticmethod
    def from_matrix(R: np.ndarray, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return RigidTransform(matrix_to_quat(R), np.asarray(translation, dtype=np.float64))

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Transform applying ``other`` first, then ``self``."""
        q = _quat_multiply(self.rotation, other.rotation)
        t = self.rotation_matrix() @ other.translation + self.translation
        return RigidTransform(q, t)

    def inverse(self) -> "RigidTransform":
        q_inv = _quat_conjugate(self.rotation)
        t_inv = -(quat_to_matrix(q_inv) @ self.translation)
        return RigidTransform(q_inv, t_inv)

    def apply(self, p) -> np.ndarray:
        """Map a single 3-vector from the source frame to the target frame."""
        p = np.asarray(p, dtype=np.float64).reshape(3)
        return self.rotation_matrix() @ p + self.translation

    def apply_array(self, points: np.ndarray) -> np.ndarray:
        """Map an (N, 3) array of points."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation_matrix().T + self.translation

    def almost_equal(self, other: "RigidTransform", tol: float = 1e-9) -> bool:
        dq = min(
            np.abs(self.rotation - other.rotation).max(),
            np.abs(self.rotation + other.rotation).max(),
        )
        return dq <= tol and np.abs(self.translation - other.translation).max() <= tol


def relative_pose(t_world_to_j: RigidTransform, t_world_to_k: RigidTransform) -> RigidTransform:
    """Pose mapping camera-j coordinates into camera-k coordinates."""
    return t_world_to_k.compose(t_world_to_j.inverse())


def project(intrinsics: CameraIntrinsics, point) -> Pixel:
    """Project a camera-frame 3D point onto the image plane.

    Raises :class:`PointBehindCamera` if the point has non-positive depth.
    """
    x, y, z = np.asarray(point, dtype=np.float64).reshape(3)
    if not z > 0:
        raise PointBehindCamera(f"cannot project point with z={z}")
    return Pixel(intrinsics.fx * x / z + intrinsics.cx, intrinsics.fy * y / z + intrinsics.cy)


def unproject(intrinsics: CameraIntrinsics, pixel, depth: float) -> np.ndarray:
    """Back-project a pixel at the given depth into the camera frame."""
    if not depth > 0:
        raise InvalidDepth(f"cannot unproject depth {depth}")
    u, v = pixel
    return np.array(
        [
            depth * (u - intrinsics.cx) / intrinsics.fx,
            depth * (v - intrinsics.cy) / intrinsics.fy,
            depth,
        ]
    )


def project_array(intrinsics: CameraIntrinsics, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection of (N, 3) camera-frame points.

    Returns ``(uv, z)`` without bounds or sign filtering; rows with
    ``z <= 0`` hold non-finite pixel coordinates and must be masked by the
    caller.
    """
    points = np.asarray(points, dtype=np.float64)
    z = points[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intrinsics.fx * points[:, 0] / z + intrinsics.cx
        v = intrinsics.fy * points[:, 1] / z + intrinsics.cy
    uv = np.stack([u, v], axis=1)
    uv[z <= 0] = np.nan
    return uv, z


def pixel_direction_grid(intrinsics: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel ray directions with unit z-component.

    Returns ``(dir_x, dir_y)`` of shape (height, width); the camera-frame
    ray through pixel (u, v) is ``(dir_x, dir_y, 1)``, so the ray parameter
    equals camera depth.
    """
    u = np.arange(intrinsics.width, dtype=np.float64)
    v = np.arange(intrinsics.height, dtype=np.float64)
    dir_x = (u[None, :] - intrinsics.cx) / intrinsics.fx
    dir_y = (v[:, None] - intrinsics.cy) / intrinsics.fy
    return np.broadcast_to(dir_x, (intrinsics.height, intrinsics.width)).copy(), np.broadcast_to(
        dir_y, (intrinsics.height, intrinsics.width)
    ).copy()


def unproject_grid(intrinsics: CameraIntrinsics, depth: np.ndarray) -> np.ndarray:
    """Back-project a full depth raster to (H, W, 3) camera-frame points.

    Zero-depth (invalid) pixels map to the origin; filter on ``depth > 0``.
    """
    dir_x, dir_y = pixel_direction_grid(intrinsics)
    return np.stack([depth * dir_x, depth * dir_y, depth], axis=-1)


def round_half_away(values: np.ndarray) -> np.ndarray:
    """Round to nearest integer with ties away from zero (not banker's)."""
    values = np.asarray(values)
    return np.sign(values) * np.floor(np.abs(values) + 0.5)
