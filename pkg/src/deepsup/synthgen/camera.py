"""Pinhole camera orbiting the world origin.

Camera frame: x right, y down, z forward. The camera sits at azimuth ``az``
and elevation ``el`` on a sphere of radius ``distance`` around the origin and
looks at it with world Z up.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class CameraError(ValueError):
    pass


def look_at_rotation(azimuth: float, elevation: float) -> np.ndarray:
    """World-to-camera rotation (rows are the camera axes in world coordinates)."""
    a, e = np.deg2rad(azimuth), np.deg2rad(elevation)
    toward = np.array([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)])
    fwd = -toward
    right = np.cross(fwd, [0.0, 0.0, 1.0])
    n = np.linalg.norm(right)
    if n < 1e-12:
        raise CameraError("camera looking straight along Z has no defined right axis")
    right /= n
    down = np.cross(fwd, right)
    return np.stack([right, down, fwd])


@dataclass
class Camera:
    focal: float
    cx: float
    cy: float
    azimuth: float
    elevation: float
    distance: float

    def __post_init__(self):
        if self.distance <= 0:
            raise CameraError("camera distance must be positive")
        if self.focal <= 0:
            raise CameraError("focal length must be positive")
        self.R = look_at_rotation(self.azimuth, self.elevation)
        self.center = -self.distance * self.R[2]

    @classmethod
    def framing(cls, azimuth: float, elevation: float, distance: float, radius: float, size: int,
                fill: float = 0.45) -> "Camera":
        """Focal length chosen so a sphere of ``radius`` at the origin spans ``fill`` of the image half-width."""
        if distance <= radius:
            raise CameraError("camera inside the object's bounding sphere")
        f = fill * size * np.sqrt(distance ** 2 - radius ** 2) / radius
        return cls(float(f), size / 2, size / 2, azimuth, elevation, distance)

    def to_camera(self, p: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(p) - self.center) @ self.R.T

    def project(self, p: np.ndarray) -> np.ndarray:
        """World points -> ``(u, v, depth)`` rows; raises if any depth <= 0."""
        pc = self.to_camera(p)
        z = pc[:, 2]
        if np.any(z <= 0):
            raise CameraError("point at or behind the camera plane")
        return np.column_stack([self.focal * pc[:, 0] / z + self.cx, self.focal * pc[:, 1] / z + self.cy, z])

    def unproject(self, uv: np.ndarray, depth: np.ndarray) -> np.ndarray:
        """Inverse of ``project`` into the camera frame."""
        uv = np.atleast_2d(uv)
        depth = np.asarray(depth, dtype=np.float64)
        x = (uv[:, 0] - self.cx) / self.focal * depth
        y = (uv[:, 1] - self.cy) / self.focal * depth
        return np.column_stack([x, y, depth])

    def pixel_rays(self, size: int) -> np.ndarray:
        """World-space ray directions through pixel centres, shape ``(size*size, 3)``.

        Each direction has camera-frame z component 1, so a hit parameter
        equals camera depth.
        """
        v, u = np.mgrid[0:size, 0:size] + 0.5
        return self.rays_through(np.column_stack([u.ravel(), v.ravel()]))

    def rays_through(self, uv: np.ndarray) -> np.ndarray:
        uv = np.atleast_2d(uv)
        d = np.column_stack([(uv[:, 0] - self.cx) / self.focal, (uv[:, 1] - self.cy) / self.focal, np.ones(len(uv))])
        return d @ self.R
