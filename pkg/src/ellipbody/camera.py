"""Projection of 3D points to the image plane.

Normalized image coordinates span [-1, 1] in both axes. A w x h pixel grid maps
x_pix = (u + 1) / 2 * w and y_pix = (1 - v) / 2 * h (y grows downward in pixel
space), with pixel (ix, iy) centered at (ix + 0.5, iy + 0.5).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class WeakPerspectiveCamera:
    """Scaled orthographic camera: (u, v) = (s*x + tx, s*y + ty), depth = z."""

    s: float = 1.0
    tx: float = 0.0
    ty: float = 0.0

    def __post_init__(self):
        if self.s <= 0:
            raise ValueError("camera scale s must be positive")

    def to_dict(self) -> dict:
        return {"s": self.s, "tx": self.tx, "ty": self.ty}

    @classmethod
    def from_dict(cls, d: dict) -> "WeakPerspectiveCamera":
        return cls(s=float(d["s"]), tx=float(d["tx"]), ty=float(d["ty"]))


@dataclass
class ProjectionMatrix:
    """Full 3x4 projection with perspective divide."""

    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.shape != (3, 4):
            raise ValueError("projection matrix must be 3x4")
        if abs(np.linalg.det(self.matrix[:, :3])) < 1e-12:
            raise ValueError("top-left 3x3 block of the projection matrix is singular")


def project_weak(points: np.ndarray, cam: WeakPerspectiveCamera) -> tuple[np.ndarray, np.ndarray]:
    """Project (n, 3) points; returns ((n, 2) normalized coords, (n,) retained depth z)."""
    points = np.asarray(points, dtype=np.float64)
    uv = points[:, :2] * cam.s + np.array([cam.tx, cam.ty])
    return uv, points[:, 2].copy()


def project_full(points: np.ndarray, proj: ProjectionMatrix) -> tuple[np.ndarray, np.ndarray]:
    """Homogeneous projection; depth is the pre-divide third coordinate."""
    points = np.asarray(points, dtype=np.float64)
    homo = points @ proj.matrix[:, :3].T + proj.matrix[:, 3]
    w = homo[:, 2]
    if np.any(np.abs(w) < 1e-12):
        raise ValueError("point projects to the camera plane (|w| < 1e-12)")
    return homo[:, :2] / w[:, None], w.copy()


def norm_to_pixel(uv: np.ndarray, width: int, height: int) -> np.ndarray:
    """Map normalized [-1, 1] coordinates to continuous pixel coordinates."""
    uv = np.asarray(uv, dtype=np.float64)
    out = np.empty_like(uv)
    out[..., 0] = (uv[..., 0] + 1.0) / 2.0 * width
    out[..., 1] = (1.0 - uv[..., 1]) / 2.0 * height
    return out


def pixel_to_norm(xy: np.ndarray, width: int, height: int) -> np.ndarray:
    xy = np.asarray(xy, dtype=np.float64)
    out = np.empty_like(xy)
    out[..., 0] = xy[..., 0] / width * 2.0 - 1.0
    out[..., 1] = 1.0 - xy[..., 1] / height * 2.0
    return out


def camera_from_dict(d: dict):
    """Camera JSON: either {s, tx, ty} or {P: [12 reals]}."""
    if "P" in d:
        return ProjectionMatrix(np.asarray(d["P"], dtype=np.float64).reshape(3, 4))
    return WeakPerspectiveCamera.from_dict(d)
