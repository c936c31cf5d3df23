"""Rigid-body primitives: unit quaternions, camera poses and body-frame twists.

Conventions
-----------
* Quaternions are stored scalar-first, ``(w, x, y, z)``.
* A :class:`Pose` is camera-in-world: ``p_world = R @ p_cam + t``.
* Twists are expressed in the camera body frame and are applied by
  right-multiplication, ``P_next = P @ exp(dt * twist)``.
* Camera frame: +x right, +y down, +z along the optical axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

_SMALL_ANGLE = 1e-8


def _frozen(a, shape: tuple[int, ...]) -> np.ndarray:
    arr = np.array(a, dtype=np.float64).reshape(shape)
    arr.setflags(write=False)
    return arr


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0.0 or not np.isfinite(n):
        raise ValueError("cannot normalize a zero or non-finite quaternion")
    return q / n


def quat_multiply(a, b) -> np.ndarray:
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


def quat_conjugate(q) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]], dtype=np.float64)


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = quat_normalize(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R) -> np.ndarray:
    """Shepperd's method; returns the representative with w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = quat_normalize(q)
    return q if q[0] >= 0 else -q


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n == 0.0:
        return np.array([1.0, 0.0, 0.0, 0.0])
    axis = axis / n
    h = 0.5 * angle
    return np.concatenate([[math.cos(h)], math.sin(h) * axis])


def quat_from_rotvec(rv) -> np.ndarray:
    rv = np.asarray(rv, dtype=np.float64)
    theta = float(np.linalg.norm(rv))
    if theta < _SMALL_ANGLE:
        # second-order expansion keeps the result unit-norm to machine precision
        return quat_normalize(np.concatenate([[1.0 - theta * theta / 8.0], 0.5 * rv]))
    return quat_from_axis_angle(rv / theta, theta)


def quat_to_rotvec(q) -> np.ndarray:
    q = quat_normalize(q)
    if q[0] < 0:
        q = -q
    s = np.linalg.norm(q[1:])
    if s < _SMALL_ANGLE:
        return 2.0 * q[1:]
    angle = 2.0 * math.atan2(s, q[0])
    return q[1:] / s * angle


def quat_angle(a, b) -> float:
    """Geodesic rotation angle between two orientations, radians in [0, pi]."""
    d = abs(float(np.dot(quat_normalize(a), quat_normalize(b))))
    return 2.0 * math.acos(min(1.0, d))


def slerp(a, b, u: float) -> np.ndarray:
    a = quat_normalize(a)
    b = quat_normalize(b)
    d = float(np.dot(a, b))
    if d < 0:
        b, d = -b, -d
    if d > 1.0 - 1e-12:
        return quat_normalize(a + u * (b - a))
    theta = math.acos(d)
    s = math.sin(theta)
    return quat_normalize((math.sin((1 - u) * theta) * a + math.sin(u * theta) * b) / s)


def skew(w) -> np.ndarray:
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


@dataclass(frozen=True)
class Pose:
    """Camera-in-world rigid transform."""

    rotation: np.ndarray  # unit quaternion (w, x, y, z)
    translation: np.ndarray  # meters

    def __post_init__(self):
        object.__setattr__(self, "rotation", _frozen(quat_normalize(self.rotation), (4,)))
        object.__setattr__(self, "translation", _frozen(self.translation, (3,)))
        if not np.all(np.isfinite(self.translation)):
            raise ValueError("pose translation must be finite")

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @classmethod
    def from_translation(cls, x: float, y: float, z: float) -> Pose:
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.array([x, y, z], dtype=np.float64))

    @classmethod
    def from_matrix(cls, T) -> Pose:
        T = np.asarray(T, dtype=np.float64)
        return cls(matrix_to_quat(T[:3, :3]), T[:3, 3])

    @classmethod
    def from_tuple(cls, values: Sequence[float]) -> Pose:
        """Build from ``[qw, qx, qy, qz, tx, ty, tz]``."""
        if len(values) != 7:
            raise ValueError(f"pose tuple needs 7 values, got {len(values)}")
        return cls(np.asarray(values[:4], dtype=np.float64), np.asarray(values[4:], dtype=np.float64))

    def to_tuple(self) -> list[float]:
        return [float(v) for v in self.rotation] + [float(v) for v in self.translation]

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T

    def transform_points(self, pts) -> np.ndarray:
        """Map camera-frame points (..., 3) into the world frame."""
        return np.asarray(pts) @ self.R.T + self.translation

    def inverse_transform_points(self, pts) -> np.ndarray:
        """Map world-frame points (..., 3) into the camera frame."""
        return (np.asarray(pts) - self.translation) @ self.R


def compose(a: Pose, b: Pose) -> Pose:
    q = quat_normalize(quat_multiply(a.rotation, b.rotation))
    t = a.translation + quat_to_matrix(a.rotation) @ b.translation
    return Pose(q, t)


def inverse(p: Pose) -> Pose:
    qi = quat_conjugate(p.rotation)
    return Pose(qi, -(quat_to_matrix(qi) @ p.translation))


@dataclass(frozen=True)
class Twist:
    """Body-frame camera velocity: linear m/s and angular rad/s."""

    linear: np.ndarray
    angular: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "linear", _frozen(self.linear, (3,)))
        object.__setattr__(self, "angular", _frozen(self.angular, (3,)))
        if not (np.all(np.isfinite(self.linear)) and np.all(np.isfinite(self.angular))):
            raise ValueError("twist components must be finite")

    @classmethod
    def zero(cls) -> Twist:
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def from_vector(cls, v) -> Twist:
        v = np.asarray(v, dtype=np.float64).reshape(6)
        return cls(v[:3], v[3:])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.linear, self.angular])

    @property
    def linear_speed(self) -> float:
        return float(np.linalg.norm(self.linear))

    @property
    def angular_speed(self) -> float:
        return float(np.linalg.norm(self.angular))

    def scaled(self, s: float) -> Twist:
        return Twist(self.linear * s, self.angular * s)


def se3_exp(xi) -> Pose:
    """Exponential map of a body twist ``[v; w]`` (already multiplied by time)."""
    xi = np.asarray(xi, dtype=np.float64).reshape(6)
    v, w = xi[:3], xi[3:]
    theta = float(np.linalg.norm(w))
    W = skew(w)
    if theta < 1e-6:
        # Taylor terms of (1-cos)/th^2 and (th-sin)/th^3
        B = 0.5 - theta * theta / 24.0
        C = 1.0 / 6.0 - theta * theta / 120.0
    else:
        B = (1.0 - math.cos(theta)) / theta**2
        C = (theta - math.sin(theta)) / theta**3
    V = np.eye(3) + B * W + C * (W @ W)
    return Pose(quat_from_rotvec(w), V @ v)


def integrate_twist(p: Pose, t: Twist, dt: float) -> Pose:
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    return compose(p, se3_exp(dt * t.as_vector()))


def pose_error(a: Pose, b: Pose) -> tuple[float, float]:
    """Translation error in meters and quaternion-difference norm.

    The rotation term is ``min(|qa - qb|, |qa + qb|)`` so that ``q`` and ``-q``
    describe the same orientation.
    """
    trans = float(np.linalg.norm(a.translation - b.translation))
    qa, qb = a.rotation, b.rotation
    rot = float(min(np.linalg.norm(qa - qb), np.linalg.norm(qa + qb)))
    return trans, rot


def weighted_pose_distance(a: Pose, b: Pose, beta: float = 1.0) -> float:
    """Translation distance plus ``beta`` (m/rad) times the geodesic angle."""
    return float(np.linalg.norm(a.translation - b.translation)) + beta * quat_angle(a.rotation, b.rotation)


def interpolate_pose(a: Pose, b: Pose, u: float) -> Pose:
    return Pose(slerp(a.rotation, b.rotation, u), (1 - u) * a.translation + u * b.translation)


def look_rotation(forward, down_hint=(0.0, 1.0, 0.0)) -> np.ndarray:
    """Quaternion of a camera whose +z axis points along ``forward``.

    The camera +y axis is chosen as close as possible to ``down_hint``.
    """
    z = np.asarray(forward, dtype=np.float64)
    z = z / np.linalg.norm(z)
    y = np.asarray(down_hint, dtype=np.float64)
    y = y - np.dot(y, z) * z
    if np.linalg.norm(y) < 1e-9:
        y = np.array([0.0, 0.0, 1.0]) - z[2] * z
    y = y / np.linalg.norm(y)
    x = np.cross(y, z)
    return matrix_to_quat(np.column_stack([x, y, z]))
