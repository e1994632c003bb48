"""Workspace boxes, rigid transforms and quaternion helpers.

Quaternions are stored as (w, x, y, z).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Workspace:
    """Axis-aligned box in world coordinates (meters).

    The default dips below the table plane so ground tokens at z = 0 survive clipping.
    """

    lo: tuple[float, float, float] = (-0.5, -0.5, -0.1)
    hi: tuple[float, float, float] = (0.5, 0.5, 0.9)

    def __post_init__(self):
        if len(self.lo) != 3 or len(self.hi) != 3:
            raise ValueError("workspace corners must be 3D")
        if any(h <= l for l, h in zip(self.lo, self.hi)):
            raise ValueError(f"workspace box is empty: lo={self.lo} hi={self.hi}")

    @property
    def lo_arr(self) -> np.ndarray:
        return np.asarray(self.lo, dtype=np.float64)

    @property
    def hi_arr(self) -> np.ndarray:
        return np.asarray(self.hi, dtype=np.float64)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo_arr + self.hi_arr)

    @property
    def extent(self) -> np.ndarray:
        return self.hi_arr - self.lo_arr

    @property
    def volume(self) -> float:
        return float(np.prod(self.extent))

    def contains(self, points: np.ndarray, tol: float = 0.0) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return np.all((p >= self.lo_arr - tol) & (p <= self.hi_arr + tol), axis=-1)


def rigid(rotation: np.ndarray, translation) -> np.ndarray:
    T = np.eye(4)
    T[:3, :3] = rotation
    T[:3, 3] = translation
    return T


def transform_points(T: np.ndarray, points: np.ndarray) -> np.ndarray:
    return points @ T[:3, :3].T + T[:3, 3]


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world transform for an OpenCV camera (x right, y down, z forward)."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward], axis=1)
    return rigid(R, eye)


def pinhole(fx: float, fy: float, cx: float, cy: float) -> np.ndarray:
    return np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])


def quat_canonical(q: np.ndarray) -> np.ndarray:
    """Flip sign so that w >= 0."""
    q = np.asarray(q, dtype=np.float64)
    sign = np.where(q[..., :1] < 0, -1.0, 1.0)
    return q * sign


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_from_yaw(yaw: float) -> np.ndarray:
    return np.array([np.cos(yaw / 2), 0.0, 0.0, np.sin(yaw / 2)])


def quat_angle(q1: np.ndarray, q2: np.ndarray) -> float:
    """Geodesic angle (radians) between the rotations of two unit quaternions."""
    d = abs(float(np.dot(quat_normalize(q1), quat_normalize(q2))))
    return 2.0 * float(np.arccos(min(1.0, d)))


def random_quaternion(rng: np.random.Generator) -> np.ndarray:
    return quat_canonical(quat_normalize(rng.normal(size=4)))
