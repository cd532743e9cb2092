"""Rigid poses and small rotation helpers shared by the model, generator and metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CameraPose:
    """Camera-to-world transform: ``x_world = R @ x_cam + t``."""

    R: np.ndarray
    t: np.ndarray

    @staticmethod
    def identity() -> "CameraPose":
        return CameraPose(np.eye(3), np.zeros(3))

    def inverse(self) -> "CameraPose":
        return CameraPose(self.R.T, -self.R.T @ self.t)

    def compose(self, other: "CameraPose") -> "CameraPose":
        """``self ∘ other`` (apply ``other`` first)."""
        return CameraPose(self.R @ other.R, self.R @ other.t + self.t)

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return pts @ self.R.T + self.t

    def is_valid(self, tol: float = 1e-9) -> bool:
        return (np.allclose(self.R.T @ self.R, np.eye(3), atol=tol)
                and abs(np.linalg.det(self.R) - 1.0) <= tol)


def relative_pose(a: CameraPose, b: CameraPose) -> CameraPose:
    """Pose of ``b`` expressed in the frame of ``a``."""
    return a.inverse().compose(b)


def look_at(eye: np.ndarray, target: np.ndarray, up=(0.0, 1.0, 0.0)) -> CameraPose:
    f = np.asarray(target, float) - np.asarray(eye, float)
    f /= np.linalg.norm(f)
    right = np.cross(f, up)
    right /= np.linalg.norm(right)
    down = np.cross(f, right)
    return CameraPose(np.stack([right, down, f], axis=1), np.asarray(eye, float).copy())


def rotation_angle(R: np.ndarray) -> np.ndarray:
    """Geodesic angle (radians) of rotation matrices (..., 3, 3)."""
    R = np.asarray(R)
    c = (np.trace(R, axis1=-2, axis2=-1) - 1.0) / 2.0
    v = np.stack([R[..., 2, 1] - R[..., 1, 2], R[..., 0, 2] - R[..., 2, 0],
                  R[..., 1, 0] - R[..., 0, 1]], axis=-1) / 2.0
    return np.arctan2(np.linalg.norm(v, axis=-1), c)


def rotation_error_deg(Ra: np.ndarray, Rb: np.ndarray) -> np.ndarray:
    return np.degrees(rotation_angle(np.swapaxes(Ra, -1, -2) @ Rb))


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], -2)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    return quat_to_rotmat(rng.normal(size=4))


def axis_angle(axis, angle: float) -> np.ndarray:
    a = np.asarray(axis, float)
    a = a / np.linalg.norm(a)
    K = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * K @ K
