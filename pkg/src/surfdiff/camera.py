"""Orthographic camera: pixel grid, projection, and depth normalization.

Depth is measured in scene units along the view direction starting at the
near plane; channel values map [near, far] -> [-1, 1] linearly.  Projection
follows the align-corners convention: u = -1 is the center of pixel column
0, u = +1 the center of column W-1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Camera:
    width: int = 64
    height: int = 64
    half_extent: float = 1.0
    near: float = -1.5
    far: float = 1.5
    right: tuple = (1.0, 0.0, 0.0)
    up: tuple = (0.0, 1.0, 0.0)
    forward: tuple = (0.0, 0.0, 1.0)
    center: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        basis = np.array([self.right, self.up, self.forward], dtype=np.float64)
        if not np.allclose(basis @ basis.T, np.eye(3), atol=1e-6):
            raise ValueError("camera axes must be orthonormal")
        if not self.near < self.far:
            raise ValueError(f"near {self.near} must be < far {self.far}")
        if self.width < 2 or self.height < 2:
            raise ValueError("degenerate camera resolution")

    @property
    def depth_range(self) -> float:
        return self.far - self.near

    def basis(self) -> np.ndarray:
        return np.array([self.right, self.up, self.forward], dtype=np.float64)

    # --- coordinates ---------------------------------------------------
    def to_camera(self, points: np.ndarray) -> np.ndarray:
        """World points (...,3) -> camera frame (x right, y up, z along view)."""
        rel = np.asarray(points, dtype=np.float64) - np.asarray(self.center)
        return rel @ self.basis().T

    def world_dir_to_camera(self, dirs: np.ndarray) -> np.ndarray:
        return np.asarray(dirs, dtype=np.float64) @ self.basis().T

    def project_uv(self, points: np.ndarray) -> np.ndarray:
        """World points (...,3) -> normalized image coords (...,2) in [-1,1].

        v grows downward in the image, so camera-up maps to negative v;
        consistent with pixel_rays, which puts +up at image row 0."""
        cam = self.to_camera(points)
        u = cam[..., 0] / self.half_extent
        v = -cam[..., 1] / self.half_extent
        return np.stack([u, v], axis=-1)

    def uv_to_pixel(self, uv: np.ndarray) -> np.ndarray:
        px = (uv[..., 0] + 1.0) * 0.5 * (self.width - 1)
        py = (uv[..., 1] + 1.0) * 0.5 * (self.height - 1)
        return np.stack([px, py], axis=-1)

    def pixel_centers_uv(self) -> np.ndarray:
        """(H, W, 2) normalized coords of every pixel center."""
        u = np.linspace(-1.0, 1.0, self.width)
        v = np.linspace(-1.0, 1.0, self.height)
        uu, vv = np.meshgrid(u, v)
        return np.stack([uu, vv], axis=-1)

    def pixel_rays(self, pixels_uv: np.ndarray | None = None):
        """Ray origins on the near plane plus the shared view direction.

        Returns (origins (...,3), direction (3,)).  Row v=-1 is the top of
        the image (image row 0)."""
        if pixels_uv is None:
            pixels_uv = self.pixel_centers_uv()
        basis = self.basis()
        x = pixels_uv[..., 0] * self.half_extent
        y = -pixels_uv[..., 1] * self.half_extent  # image rows grow downward
        origins = (
            np.asarray(self.center)
            + x[..., None] * basis[0]
            + y[..., None] * basis[1]
            + self.near * basis[2]
        )
        return origins, basis[2].copy()

    def uv_transform(self):
        """Linear map for projection: uv = p @ M + off, matching project_uv."""
        basis = self.basis()
        m = np.stack([basis[0] / self.half_extent, -basis[1] / self.half_extent], axis=1)
        off = -np.asarray(self.center) @ m
        return m, off

    # --- depth ----------------------------------------------------------
    def z_to_channel(self, z: np.ndarray) -> np.ndarray:
        return 2.0 * (np.asarray(z) - self.near) / self.depth_range - 1.0

    def channel_to_z(self, c: np.ndarray) -> np.ndarray:
        return (np.asarray(c) + 1.0) * 0.5 * self.depth_range + self.near

    # --- serialization ---------------------------------------------------
    def to_json(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "half_extent": self.half_extent,
            "near": self.near,
            "far": self.far,
            "right": list(self.right),
            "up": list(self.up),
            "forward": list(self.forward),
            "center": list(self.center),
        }

    @staticmethod
    def from_json(d: dict) -> "Camera":
        return Camera(
            width=d["width"],
            height=d["height"],
            half_extent=d["half_extent"],
            near=d["near"],
            far=d["far"],
            right=tuple(d["right"]),
            up=tuple(d["up"]),
            forward=tuple(d["forward"]),
            center=tuple(d["center"]),
        )
