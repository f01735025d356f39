"""Rigid poses, pinhole projection and pose-error metrics.

Convention: a pose maps world to camera, ``y_cam = R @ y_world + t``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import NonPositiveDepth

DEPTH_EPS = 1e-6


@dataclass(frozen=True)
class CameraPose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T):
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0)):
        """Camera at ``eye`` looking at ``target`` (camera z forward, y down)."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(forward, np.array([1.0, 0.0, 0.0]))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        return cls(R, -R @ eye)

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    @property
    def center(self):
        return -self.rotation.T @ self.translation

    def inverse(self):
        Rt = self.rotation.T
        return CameraPose(Rt, -Rt @ self.translation)

    def compose(self, other):
        """``self ∘ other``: apply ``other`` first."""
        return CameraPose(self.rotation @ other.rotation,
                          self.rotation @ other.translation + self.translation)

    def to_array(self):
        """12 values: row-major rotation then translation."""
        return np.concatenate([self.rotation.reshape(-1), self.translation])

    @classmethod
    def from_array(cls, values):
        values = np.asarray(values, dtype=np.float64)
        return cls(values[:9].reshape(3, 3), values[9:12])

    def is_valid(self, tol=1e-9):
        R = self.rotation
        return (np.allclose(R.T @ R, np.eye(3), atol=tol)
                and abs(np.linalg.det(R) - 1.0) <= tol)


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    def matrix(self):
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def to_array(self):
        return np.array([self.fx, self.fy, self.cx, self.cy], dtype=np.float64)

    @classmethod
    def from_array(cls, values):
        return cls(*(float(v) for v in values))


@dataclass(frozen=True)
class PoseError:
    translation_error: float
    rotation_error: float

    @property
    def max_error(self):
        return max(self.translation_error, self.rotation_error)


def transform_to_camera(pose, world_point):
    """``R @ y + t``; accepts a single point or an (n, 3) array."""
    y = np.asarray(world_point, dtype=np.float64)
    return y @ pose.rotation.T + pose.translation


def project_camera(k, cam):
    cam = np.asarray(cam, dtype=np.float64)
    z = cam[..., 2]
    return np.stack([k.fx * cam[..., 0] / z + k.cx, k.fy * cam[..., 1] / z + k.cy], axis=-1)


def project(pose, k, world_point):
    cam = transform_to_camera(pose, world_point)
    if np.any(cam[..., 2] <= DEPTH_EPS):
        raise NonPositiveDepth(f"camera-frame depth {np.min(cam[..., 2]):.3g} is not positive")
    return project_camera(k, cam)


def project_many(pose, k, points):
    """Project (n, 3) points; returns (pixels, valid) without raising."""
    cam = transform_to_camera(pose, points)
    valid = cam[:, 2] > DEPTH_EPS
    z = np.where(valid, cam[:, 2], 1.0)
    px = np.stack([k.fx * cam[:, 0] / z + k.cx, k.fy * cam[:, 1] / z + k.cy], axis=-1)
    return px, valid


def unproject(pose, k, pixel, depth):
    u, v = pixel
    cam = np.array([(u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth])
    return pose.rotation.T @ (cam - pose.translation)


def rotation_angle_deg(Ra, Rb):
    """Angle of ``Ra @ Rb.T`` in degrees.

    Same value as ``arccos((trace - 1) / 2)``, but computed as
    ``atan2(sin, cos)`` so sub-microdegree differences stay resolvable.
    """
    D = Ra @ Rb.T
    cos = np.clip((np.trace(D) - 1.0) / 2.0, -1.0, 1.0)
    sin = 0.5 * np.linalg.norm([D[2, 1] - D[1, 2], D[0, 2] - D[2, 0], D[1, 0] - D[0, 1]])
    return float(np.degrees(np.arctan2(sin, cos)))


def pose_error(estimate, truth):
    t_err = float(np.linalg.norm(estimate.center - truth.center))
    return PoseError(t_err, rotation_angle_deg(estimate.rotation, truth.rotation))


def skew(v):
    x, y, z = v
    return np.array([[0, -z, y], [z, 0, -x], [-y, x, 0.0]])


def so3_exp(omega):
    """Rodrigues' formula."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega)
    K = skew(omega)
    if theta < 1e-12:
        return np.eye(3) + K
    return np.eye(3) + np.sin(theta) / theta * K + (1 - np.cos(theta)) / theta**2 * K @ K


def rotation_about(axis, angle_deg):
    axis = np.asarray(axis, dtype=np.float64)
    return so3_exp(axis / np.linalg.norm(axis) * np.radians(angle_deg))


def random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])
