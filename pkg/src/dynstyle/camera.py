"""Pinhole cameras (OpenCV convention: x right, y down, z forward)."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True, eq=False)
class Camera:
    """World-to-camera pose ``x_cam = R x_world + T`` plus intrinsics.

    Float fields are stored as float32 so that scene containers round-trip
    bit-exactly.
    """

    rotation: np.ndarray
    translation: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float32).reshape(3, 3)
        T = np.asarray(self.translation, dtype=np.float32).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", T)
        for name in ("fx", "fy", "cx", "cy"):
            object.__setattr__(self, name, float(np.float32(getattr(self, name))))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        R64 = R.astype(np.float64)
        if np.abs(R64.T @ R64 - np.eye(3)).max() >= 1e-6:
            raise ValueError("camera rotation is not orthonormal")
        if not (np.all(np.isfinite(R64)) and np.all(np.isfinite(T))):
            raise ValueError("camera pose has non-finite entries")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("camera width/height must be positive")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def __eq__(self, other):
        if not isinstance(other, Camera):
            return NotImplemented
        return (
            np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
            and (self.fx, self.fy, self.cx, self.cy, self.width, self.height)
            == (other.fx, other.fy, other.cx, other.cy, other.width, other.height)
        )

    @property
    def R(self) -> np.ndarray:
        return self.rotation.astype(np.float64)

    @property
    def T(self) -> np.ndarray:
        return self.translation.astype(np.float64)

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.R.T @ self.T

    def pixel_rays_cam(self) -> np.ndarray:
        """(H, W, 3) unit ray directions in the camera frame through pixel centers."""
        xs = (np.arange(self.width, dtype=np.float64) - self.cx) / self.fx
        ys = (np.arange(self.height, dtype=np.float64) - self.cy) / self.fy
        d = np.stack(np.broadcast_arrays(xs[None, :], ys[:, None], np.ones((1, 1))), axis=-1)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def pixel_ray_world(self, px: float, py: float) -> tuple[np.ndarray, np.ndarray]:
        d = np.array([(px - self.cx) / self.fx, (py - self.cy) / self.fy, 1.0])
        d /= np.linalg.norm(d)
        return self.center, self.R.T @ d


def look_at(eye, target, up=(0.0, -1.0, 0.0), *, fx, fy, width, height, cx=None, cy=None) -> Camera:
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    z = target - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, np.array([1.0, 0.0, 0.0]))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    T = -R @ eye
    return Camera(
        R, T, fx, fy,
        (width - 1) / 2 if cx is None else cx,
        (height - 1) / 2 if cy is None else cy,
        width, height,
    )


def helix_poses(center, radius: float, turns: float, n: int, *, height_span: float = 0.0,
                fx: float, fy: float, width: int, height: int) -> tuple[list[Camera], np.ndarray]:
    """Cameras on a helix around ``center`` looking at it.

    Azimuth runs linearly from 0 to ``2*pi*turns`` inclusive; the vertical
    offset runs from ``-height_span/2`` to ``+height_span/2``.
    Returns the cameras and their azimuths.
    """
    if n < 1:
        raise ValueError("helix needs at least one pose")
    center = np.asarray(center, dtype=np.float64)
    frac = np.linspace(0.0, 1.0, n) if n > 1 else np.zeros(1)
    azimuth = 2.0 * np.pi * turns * frac
    elev = (frac - 0.5) * height_span
    cams = []
    for a, h in zip(azimuth, elev):
        eye = center + np.array([radius * np.sin(a), h, -radius * np.cos(a)])
        cams.append(look_at(eye, center, fx=fx, fy=fy, width=width, height=height))
    return cams, azimuth


def write_camera_file(path, cameras) -> None:
    lines = []
    for c in cameras:
        vals = [*c.rotation.ravel(), *c.translation, c.fx, c.fy, c.cx, c.cy]
        lines.append(" ".join(repr(float(v)) for v in vals) + f" {c.width} {c.height}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_camera_file(path) -> list[Camera]:
    cams = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 18:
            raise ValueError(f"{path}:{lineno}: expected 18 fields, got {len(parts)}")
        v = [float(p) for p in parts[:16]]
        cams.append(Camera(np.reshape(v[:9], (3, 3)), v[9:12], v[12], v[13], v[14], v[15],
                           int(parts[16]), int(parts[17])))
    return cams
