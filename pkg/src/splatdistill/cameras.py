"""Pinhole cameras and ray generation.

Conventions: world up is +y, a frontal face looks toward +z. Camera
space is OpenCV-style (x right, y down, z forward); ``p_cam = R @ p + t``.
Pixel (row i, col j) has its center at continuous image point
(j + 0.5, i + 0.5), and the focal length derives from the vertical fov.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

WORLD_UP = np.array([0.0, 1.0, 0.0], dtype=np.float32)


@dataclass
class Camera:
    fov_y_deg: float
    width: int
    height: int
    rotation: np.ndarray  # [3,3] world -> camera
    translation: np.ndarray  # [3]
    near: float = 1.0
    far: float = 4.0
    azimuth_deg: float = field(default=0.0)  # metadata for view-gated losses

    def __post_init__(self):
        if not (0.0 < self.fov_y_deg < 180.0):
            raise ValueError(f"fov {self.fov_y_deg} outside (0, 180)")
        if not (self.near < self.far):
            raise ValueError(f"near {self.near} >= far {self.far}")
        self.rotation = np.asarray(self.rotation, dtype=np.float32).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float32).reshape(3)
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-5:
            raise ValueError(f"camera rotation not orthonormal (err {err:.2e})")

    @property
    def focal(self) -> float:
        return (self.height / 2.0) / math.tan(math.radians(self.fov_y_deg) / 2.0)

    @property
    def principal(self) -> tuple:
        return (self.width / 2.0, self.height / 2.0)

    @property
    def eye(self) -> np.ndarray:
        return (-self.rotation.T @ self.translation).astype(np.float32)

    def rays(self) -> tuple:
        """Ray origins [H*W,3] and unit directions [H*W,3], row-major pixels."""
        f = self.focal
        cx, cy = self.principal
        j, i = np.meshgrid(
            np.arange(self.width, dtype=np.float32),
            np.arange(self.height, dtype=np.float32),
        )
        dirs_cam = np.stack(
            [
                (j + 0.5 - cx) / f,
                (i + 0.5 - cy) / f,
                np.ones_like(j),
            ],
            axis=-1,
        ).reshape(-1, 3)
        dirs = dirs_cam @ self.rotation  # R^T @ d, batched
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        origins = np.broadcast_to(self.eye, dirs.shape).copy()
        return origins.astype(np.float32), dirs.astype(np.float32)


def look_at(eye, target, up=WORLD_UP, **kwargs) -> Camera:
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    nrm = np.linalg.norm(right)
    if nrm < 1e-8:
        raise ValueError("look_at: view direction parallel to up")
    right /= nrm
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd], axis=0)
    trans = -rot @ eye
    return Camera(rotation=rot, translation=trans, **kwargs)


def orbit_camera(
    azimuth_deg: float,
    elevation_deg: float,
    radius: float = 2.7,
    fov_y_deg: float = 25.0,
    width: int = 128,
    height: int = 128,
    near: float = 1.0,
    far: float = 4.0,
) -> Camera:
    """Camera on a sphere around the origin; azimuth 0 faces the +z front."""
    a = math.radians(azimuth_deg)
    e = math.radians(elevation_deg)
    eye = radius * np.array(
        [math.sin(a) * math.cos(e), math.sin(e), math.cos(a) * math.cos(e)]
    )
    cam = look_at(
        eye,
        np.zeros(3),
        fov_y_deg=fov_y_deg,
        width=width,
        height=height,
        near=near,
        far=far,
    )
    cam.azimuth_deg = ((azimuth_deg + 180.0) % 360.0) - 180.0
    return cam
