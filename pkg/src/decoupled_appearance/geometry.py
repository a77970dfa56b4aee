"""Pinhole camera model with z-depth projection and back-projection.

Conventions:
    * Continuous pixel coordinates put the center of pixel (column i, row j)
      at ``(i + 0.5, j + 0.5)``; ``u`` runs along the width, ``v`` along the
      height.
    * Depth is z-depth along the camera forward axis (+z), not ray length.
    * Poses are stored world-from-camera and act on column vectors:
      ``x_world = R @ x_cam + t``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DomainError(ValueError):
    """Raised when a geometric operation is evaluated outside its domain."""


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image size must be at least 1x1, got {self.width}x{self.height}")
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-6) or abs(np.linalg.det(rot) - 1.0) > 1e-6:
            raise ValueError("rotation must be orthonormal with determinant +1")

    @property
    def center(self) -> np.ndarray:
        """Camera position in world space."""
        return self.translation.copy()

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def world_from_camera(self) -> np.ndarray:
        """4x4 homogeneous world-from-camera matrix."""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def to_dict(self) -> dict:
        return {
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "width": int(self.width),
            "height": int(self.height),
            "rotation": [float(v) for v in self.rotation.reshape(-1)],
            "translation": [float(v) for v in self.translation],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            width=int(d["width"]),
            height=int(d["height"]),
            rotation=np.asarray(d["rotation"], dtype=np.float64).reshape(3, 3),
            translation=np.asarray(d["translation"], dtype=np.float64),
        )

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load_json(cls, path) -> "Camera":
        return cls.from_dict(json.loads(Path(path).read_text()))

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, width, height, cx=None, cy=None) -> "Camera":
        """Camera at ``eye`` whose +z axis points at ``target``.

        Image rows grow along camera +y, which is aligned with ``-up``.
        """
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        norm = np.linalg.norm(right)
        if norm < 1e-12:
            raise ValueError("up vector is parallel to the viewing direction")
        right /= norm
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward], axis=1)
        return cls(
            fx=fx,
            fy=fy,
            cx=width / 2.0 if cx is None else cx,
            cy=height / 2.0 if cy is None else cy,
            width=width,
            height=height,
            rotation=rot,
            translation=eye,
        )


@dataclass
class DepthMap:
    """z-depth raster with a validity mask; invalid pixels hold 0."""

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.values.shape != self.valid.shape or self.values.ndim != 2:
            raise ValueError("depth values and validity mask must be matching 2D arrays")
        self.values = np.where(self.valid, self.values, 0.0)
        if np.any(self.values < 0) or not np.all(np.isfinite(self.values)):
            raise ValueError("valid depths must be finite and non-negative")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @classmethod
    def from_array(cls, values) -> "DepthMap":
        """Treat non-finite and non-positive entries as invalid."""
        values = np.asarray(values, dtype=np.float64)
        valid = np.isfinite(values) & (values > 0)
        return cls(np.where(valid, values, 0.0), valid)


def back_project(camera: Camera, pixel, depth) -> np.ndarray:
    """Lift pixel(s) with z-depth to world points.

    Args:
        camera: The pinhole camera.
        pixel: ``(u, v)`` or an ``(N, 2)`` array of continuous pixel coordinates.
        depth: Scalar or ``(N,)`` z-depths in meters, strictly positive.

    Returns:
        ``(3,)`` or ``(N, 3)`` world-space points.
    """
    pix = np.asarray(pixel, dtype=np.float64)
    d = np.asarray(depth, dtype=np.float64)
    if np.any(~(d > 0)):
        raise DomainError("back_project requires strictly positive depth")
    u = pix[..., 0]
    v = pix[..., 1]
    if np.any((u < 0) | (u > camera.width) | (v < 0) | (v > camera.height)):
        raise DomainError("pixel lies outside the image bounds")
    cam = np.stack([d * (u - camera.cx) / camera.fx, d * (v - camera.cy) / camera.fy, d * np.ones_like(u)], axis=-1)
    return cam @ camera.rotation.T + camera.translation


def project(camera: Camera, point) -> tuple[np.ndarray, np.ndarray]:
    """Project world point(s) to continuous pixel coordinates.

    Returns:
        ``(pixel, z_depth)`` with pixel shaped ``(..., 2)``.

    Raises:
        DomainError: if any point is at or behind the camera plane.
    """
    p = np.asarray(point, dtype=np.float64)
    cam = (p - camera.translation) @ camera.rotation
    z = cam[..., 2]
    if np.any(~(z > 0)):
        raise DomainError("point is behind the camera")
    u = camera.fx * cam[..., 0] / z + camera.cx
    v = camera.fy * cam[..., 1] / z + camera.cy
    return np.stack([u, v], axis=-1), z


def pixel_centers(width: int, height: int) -> np.ndarray:
    """``(H, W, 2)`` array of continuous pixel-center coordinates ``(u, v)``."""
    u = np.arange(width, dtype=np.float64) + 0.5
    v = np.arange(height, dtype=np.float64) + 0.5
    uu, vv = np.meshgrid(u, v)
    return np.stack([uu, vv], axis=-1)


def camera_rays(camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel ray origin and direction scaled so direction has unit z-depth.

    A hit at ray parameter ``s`` therefore has z-depth exactly ``s``.
    """
    pix = pixel_centers(camera.width, camera.height)
    cam = np.stack(
        [
            (pix[..., 0] - camera.cx) / camera.fx,
            (pix[..., 1] - camera.cy) / camera.fy,
            np.ones(pix.shape[:2]),
        ],
        axis=-1,
    )
    dirs = cam @ camera.rotation.T
    origins = np.broadcast_to(camera.translation, dirs.shape)
    return origins, dirs
