"""Equirectangular panoramas, the yaw sliding schedule, and view extraction.

Pixel-to-angle mapping of a width x height (W = 2H) panorama:

    longitude = (x + 0.5) / W * 2*pi - pi      (column, wraps horizontally)
    latitude  = pi/2 - (y + 0.5) / H * pi      (row, +pi/2 at the top)

A unit direction (x, y, z) has longitude atan2(x, z) and latitude asin(y).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .camera import CameraIntrinsics, CameraPose, pixel_rays

NUM_VIEWS = 30
YAW_STEP = math.pi / 15.0  # 12 degrees


@dataclass(frozen=True)
class EquirectImage:
    """H x 2H RGB panorama, float values in [0, 1], row-major (H, W, 3)."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"panorama must have shape (H, W, 3), got {px.shape}")
        h, w = px.shape[:2]
        if w != 2 * h:
            raise ValueError(f"panorama width must be 2x height, got {w}x{h}")
        if not np.all(np.isfinite(px)):
            raise ValueError("panorama contains non-finite values")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("panorama values must lie in [0, 1]")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class ViewRotation:
    """Camera-to-world rotation of one scheduled view."""

    index: int
    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError(f"rotation matrix must be 3x3, got {m.shape}")
        if np.max(np.abs(m.T @ m - np.eye(3))) > 1e-9:
            raise ValueError("rotation matrix is not orthonormal within 1e-9")
        if abs(np.linalg.det(m) - 1.0) > 1e-9:
            raise ValueError("rotation matrix determinant must be +1 within 1e-9")
        object.__setattr__(self, "matrix", m)


@dataclass
class PerspectiveView:
    """Pinhole image with its camera; depth is optional (z-depth, 0 = invalid)."""

    image: np.ndarray
    intrinsics: CameraIntrinsics
    pose: CameraPose
    depth: Optional[np.ndarray] = None
    index: int = -1


def rotation_matrix(i: int) -> ViewRotation:
    """Yaw rotation of scheduled view i (12-degree steps about +y).

    Raises ValueError for indices outside [0, 29].
    """
    if not 0 <= i <= NUM_VIEWS - 1:
        raise ValueError(f"view index must be in [0, {NUM_VIEWS - 1}], got {i}")
    return ViewRotation(index=i, matrix=yaw_matrix(i * YAW_STEP))


def yaw_matrix(angle: float) -> np.ndarray:
    """Rotation about +y that maps +z to (sin(angle), 0, cos(angle))."""
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def sliding_schedule(
    intrinsics: CameraIntrinsics,
) -> list[tuple[ViewRotation, CameraIntrinsics]]:
    """The 30-view schedule: one entry per 12 degrees of yaw, shared intrinsics."""
    return [(rotation_matrix(i), intrinsics) for i in range(NUM_VIEWS)]


def direction_to_equirect(dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(longitude, latitude) of world directions (..., 3); not necessarily unit."""
    d = np.asarray(dirs, dtype=np.float64)
    lon = np.arctan2(d[..., 0], d[..., 2])
    lat = np.arctan2(d[..., 1], np.hypot(d[..., 0], d[..., 2]))
    return lon, lat


def equirect_to_direction(lon: np.ndarray, lat: np.ndarray) -> np.ndarray:
    """Unit world directions (..., 3) of (longitude, latitude) angles."""
    lon = np.asarray(lon, dtype=np.float64)
    lat = np.asarray(lat, dtype=np.float64)
    cl = np.cos(lat)
    return np.stack([cl * np.sin(lon), np.sin(lat), cl * np.cos(lon)], axis=-1)


def view_pixel_directions(rot: ViewRotation, intr: CameraIntrinsics) -> np.ndarray:
    """World-frame unit ray directions per view pixel, shape (H, W, 3)."""
    rays = pixel_rays(intr)
    world = rays @ rot.matrix.T
    return world / np.linalg.norm(world, axis=-1, keepdims=True)


def sample_equirect(pano: EquirectImage, lon: np.ndarray, lat: np.ndarray) -> np.ndarray:
    """Bilinear sample at (longitude, latitude); wraps in x, clamps in y."""
    h, w = pano.height, pano.width
    # invert the pixel-center mapping
    x = (lon + math.pi) / (2.0 * math.pi) * w - 0.5
    y = (math.pi / 2.0 - lat) / math.pi * h - 0.5

    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0

    x0i = (x0.astype(np.int64)) % w
    x1i = (x0i + 1) % w
    y0i = np.clip(y0.astype(np.int64), 0, h - 1)
    y1i = np.clip(y0i + 1, 0, h - 1)

    px = pano.pixels
    c00 = px[y0i, x0i]
    c01 = px[y0i, x1i]
    c10 = px[y1i, x0i]
    c11 = px[y1i, x1i]
    fx = fx[..., None]
    fy = fy[..., None]
    top = c00 * (1.0 - fx) + c01 * fx
    bot = c10 * (1.0 - fx) + c11 * fx
    return top * (1.0 - fy) + bot * fy


def equirect_to_perspective(
    pano: EquirectImage, rot: ViewRotation, intr: CameraIntrinsics
) -> PerspectiveView:
    """Extract the pinhole view seen through `rot` from the panorama.

    Every output pixel's camera ray is rotated into the world frame, converted
    to (longitude, latitude) and bilinearly sampled with horizontal wraparound.
    """
    dirs = view_pixel_directions(rot, intr)
    lon, lat = direction_to_equirect(dirs)
    img = np.clip(sample_equirect(pano, lon, lat), 0.0, 1.0)
    pose = CameraPose.from_matrix(rot.matrix.T)
    return PerspectiveView(image=img, intrinsics=intr, pose=pose, index=rot.index)


def overlap_fraction(i: int, j: int, intr: CameraIntrinsics) -> float:
    """Horizontal angular overlap of two scheduled view frusta, as a fraction
    of the horizontal FOV. 1.0 for identical views, 0.0 for disjoint ones."""
    for k in (i, j):
        if not 0 <= k <= NUM_VIEWS - 1:
            raise ValueError(f"view index must be in [0, {NUM_VIEWS - 1}], got {k}")
    fov = math.radians(intr.fov_deg)
    gap = abs(i - j) * YAW_STEP
    gap = min(gap % (2.0 * math.pi), 2.0 * math.pi - gap % (2.0 * math.pi))
    return max(0.0, fov - gap) / fov
