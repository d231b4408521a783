"""Synthetic panoramas, scenes and camera rigs for tests and demos."""

from __future__ import annotations

import math

import numpy as np

from .camera import CameraIntrinsics, CameraPose
from .panorama import EquirectImage, PerspectiveView, yaw_matrix
from .scene import SceneModel


def angle_pattern(lon: np.ndarray, lat: np.ndarray) -> np.ndarray:
    """Smooth closed-form color field over the sphere (continuous at the seam)."""
    lon = np.asarray(lon, dtype=np.float64)
    lat = np.asarray(lat, dtype=np.float64)
    r = 0.5 + 0.5 * np.sin(lon)
    g = 0.5 + 0.5 * np.cos(lon)
    b = 0.5 + 0.5 * np.sin(lat)
    return np.stack(np.broadcast_arrays(r, g, b), axis=-1)


def pattern_panorama(height: int = 256) -> EquirectImage:
    """Equirectangular rendering of angle_pattern at pixel centers."""
    width = 2 * height
    x = np.arange(width) + 0.5
    y = np.arange(height) + 0.5
    lon = x / width * 2.0 * math.pi - math.pi
    lat = math.pi / 2.0 - y / height * math.pi
    lon_g, lat_g = np.meshgrid(lon, lat)
    return EquirectImage(pixels=angle_pattern(lon_g, lat_g))


def ring_poses(count: int, radius: float = 0.0) -> list[CameraPose]:
    """World-to-camera poses looking outward at evenly spaced yaws.

    radius 0 puts every camera at the origin; otherwise cameras sit on a
    circle in the y=0 plane, each looking away from the center."""
    poses = []
    for k in range(count):
        yaw = 2.0 * math.pi * k / count
        c2w = yaw_matrix(yaw)
        center = radius * np.array([math.sin(yaw), 0.0, math.cos(yaw)])
        w2c_r = c2w.T
        poses.append(CameraPose.from_matrix(w2c_r, translation=-w2c_r @ center))
    return poses


def yaw_pose(yaw: float, center: np.ndarray | None = None) -> CameraPose:
    c2w = yaw_matrix(yaw)
    w2c_r = c2w.T
    t = np.zeros(3) if center is None else -w2c_r @ np.asarray(center, dtype=np.float64)
    return CameraPose.from_matrix(w2c_r, translation=t)


def random_scene(
    rng: np.random.Generator,
    count: int,
    depth_range: tuple[float, float] = (2.0, 4.0),
    lateral: float = 0.9,
    scale_range: tuple[float, float] = (0.08, 0.35),
    opacity_range: tuple[float, float] = (0.4, 2.0),
    background=(0.25, 0.35, 0.45),
    min_depth_gap: float = 2e-3,
) -> SceneModel:
    """Random scene in front of an identity camera, suitable for gradient
    checks: everything on-screen, moderate opacities, and pairwise depth gaps
    above min_depth_gap so finite differences never flip the depth sort."""
    z = rng.uniform(depth_range[0], depth_range[1], count)
    for _ in range(1000):
        zs = np.sort(z)
        if count < 2 or np.min(np.diff(zs)) > min_depth_gap:
            break
        z = rng.uniform(depth_range[0], depth_range[1], count)
    xy = rng.uniform(-lateral, lateral, (count, 2))
    positions = np.column_stack([xy[:, 0], xy[:, 1], z])
    quats = rng.normal(size=(count, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    return SceneModel(
        positions=positions,
        colors=rng.uniform(0.05, 0.95, (count, 3)),
        opacities=rng.uniform(opacity_range[0], opacity_range[1], count),
        scales=rng.uniform(scale_range[0], scale_range[1], (count, 3)),
        rotations=quats,
        background=background,
    )


def shell_scene(
    rng: np.random.Generator,
    count: int = 200,
    radius: float = 3.0,
    half_height: float = 1.2,
    scale: float = 0.28,
    opacity: float = 14.0,
    background=(0.35, 0.35, 0.4),
) -> SceneModel:
    """Primitives on a cylindrical shell around the origin with a smooth
    position-derived color field; renders crisply from inside-out cameras."""
    yaw = rng.uniform(0.0, 2.0 * math.pi, count)
    y = rng.uniform(-half_height, half_height, count)
    r = radius + rng.normal(0.0, 0.02, count)
    positions = np.column_stack([r * np.sin(yaw), y, r * np.cos(yaw)])
    colors = np.column_stack(
        [
            0.5 + 0.45 * np.sin(yaw),
            0.5 + 0.45 * np.cos(2.0 * yaw),
            0.5 + 0.4 * np.sin(3.0 * y),
        ]
    )
    quats = np.zeros((count, 4))
    quats[:, 0] = 1.0
    return SceneModel(
        positions=positions,
        colors=np.clip(colors, 0.0, 1.0),
        opacities=np.full(count, opacity),
        scales=np.full((count, 3), scale),
        rotations=quats,
        background=background,
    )


def render_views(
    scene: SceneModel,
    poses: list[CameraPose],
    intr: CameraIntrinsics,
    opts=None,
) -> list[PerspectiveView]:
    """Render target views (image + depth) of a scene for training fixtures."""
    from .rasterizer import render

    views = []
    for i, pose in enumerate(poses):
        out = render(scene, pose, intr, opts)
        views.append(
            PerspectiveView(
                image=np.clip(out.rgb, 0.0, 1.0),
                intrinsics=intr,
                pose=pose,
                depth=np.where(out.alpha > 0.5, out.depth, 0.0),
                index=i,
            )
        )
    return views
