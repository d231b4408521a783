"""Gaussian scene representation: primitives, covariances, effective opacity.

A primitive's covariance is never stored directly; it is factored as
R(q) diag(scale^2) R(q)^T, which stays symmetric positive definite under
unconstrained optimization of scale (positive) and quaternion (unit).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .camera import CameraPose, quat_to_rotmat
from .fileio import read_ply, write_ply


class DegenerateCovarianceError(ValueError):
    """Covariance is singular or numerically unusable."""


@dataclass(frozen=True)
class Gaussian3D:
    """One anisotropic Gaussian primitive.

    opacity is an unbounded nonnegative density weight (it is not capped at 1;
    the compositing weight derived from it always is).
    """

    position: np.ndarray
    color: np.ndarray
    opacity: float
    scale: np.ndarray
    rotation: np.ndarray  # unit quaternion (w, x, y, z)

    def __post_init__(self):
        p = np.asarray(self.position, dtype=np.float64)
        c = np.asarray(self.color, dtype=np.float64)
        s = np.asarray(self.scale, dtype=np.float64)
        q = np.asarray(self.rotation, dtype=np.float64)
        if p.shape != (3,) or c.shape != (3,) or s.shape != (3,) or q.shape != (4,):
            raise ValueError("position/color/scale must be 3-vectors, rotation a quaternion")
        if np.any(c < 0.0) or np.any(c > 1.0):
            raise ValueError("color channels must lie in [0, 1]")
        if self.opacity < 0.0:
            raise ValueError("opacity must be >= 0")
        if np.any(s <= 0.0):
            raise ValueError("scale components must be > 0")
        if abs(np.linalg.norm(q) - 1.0) > 1e-9:
            raise ValueError("rotation quaternion must be unit norm within 1e-9")
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "color", c)
        object.__setattr__(self, "scale", s)
        object.__setattr__(self, "rotation", q)

    @property
    def covariance(self) -> np.ndarray:
        return covariance_from(self.scale, self.rotation)


def covariance_from(scale: np.ndarray, rotation: np.ndarray) -> np.ndarray:
    """3x3 covariance R(q) diag(scale^2) R(q)^T; symmetric positive definite."""
    s = np.asarray(scale, dtype=np.float64)
    q = np.asarray(rotation, dtype=np.float64)
    if np.any(s <= 0.0):
        raise ValueError("scale components must be > 0")
    norm = float(np.linalg.norm(q))
    if abs(norm - 1.0) > 1e-6:
        raise ValueError(f"quaternion must be unit norm within 1e-6, |q| = {norm}")
    R = quat_to_rotmat(q)
    cov = (R * (s**2)) @ R.T
    return 0.5 * (cov + cov.T)  # exact symmetry against fp drift


def eval_gaussian(g: Gaussian3D, p: np.ndarray) -> float:
    """Density opacity * exp(-0.5 (p-mu)^T Sigma^-1 (p-mu)) at point p."""
    s = g.scale
    if (s.max() / s.min()) ** 2 > 1e12:
        raise DegenerateCovarianceError(
            f"covariance condition number {(s.max() / s.min()) ** 2:.3e} exceeds 1e12"
        )
    d = np.asarray(p, dtype=np.float64) - g.position
    # solve in the eigenbasis: quadform = sum((R^T d / s)^2)
    R = quat_to_rotmat(g.rotation)
    local = (R.T @ d) / s
    return float(g.opacity * math.exp(-0.5 * float(local @ local)))


def sigma_effective(alpha: float, cov2d: np.ndarray) -> float:
    """Compositing weight 1 - exp(-alpha / sqrt(det cov2d)), in [0, 1)."""
    if alpha < 0.0:
        raise ValueError("opacity must be >= 0")
    c = np.asarray(cov2d, dtype=np.float64)
    det = float(c[0, 0] * c[1, 1] - c[0, 1] * c[1, 0])
    if det <= 0.0:
        raise DegenerateCovarianceError(f"2D covariance determinant {det} is not positive")
    # keep the value strictly below 1 even when exp() underflows
    return min(1.0 - math.exp(-alpha / math.sqrt(det)), math.nextafter(1.0, 0.0))


class SceneModel:
    """A set of Gaussian primitives plus registered camera poses.

    Parameters are stored as flat arrays (positions (N,3), colors (N,3),
    opacities (N,), scales (N,3), rotations (N,4)) so rendering and training
    can operate vectorized; `gaussians` materializes value objects on demand.
    """

    def __init__(
        self,
        positions: np.ndarray,
        colors: np.ndarray,
        opacities: np.ndarray,
        scales: np.ndarray,
        rotations: np.ndarray,
        poses: Optional[list[CameraPose]] = None,
        background: np.ndarray | tuple = (0.0, 0.0, 0.0),
    ):
        self.positions = np.array(positions, dtype=np.float64).reshape(-1, 3)
        n = self.positions.shape[0]
        self.colors = np.array(colors, dtype=np.float64).reshape(n, 3)
        self.opacities = np.array(opacities, dtype=np.float64).reshape(n)
        self.scales = np.array(scales, dtype=np.float64).reshape(n, 3)
        self.rotations = np.array(rotations, dtype=np.float64).reshape(n, 4)
        self.poses: list[CameraPose] = list(poses) if poses else []
        self.background = np.asarray(background, dtype=np.float64).reshape(3)
        self.validate()

    def validate(self) -> None:
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("positions contain non-finite values")
        if np.any(self.opacities < 0.0):
            raise ValueError("opacities must be >= 0")
        if np.any(self.scales <= 0.0):
            raise ValueError("scales must be > 0")
        norms = np.linalg.norm(self.rotations, axis=1)
        if self.num_gaussians and np.max(np.abs(norms - 1.0)) > 1e-9:
            raise ValueError("rotation quaternions must be unit norm within 1e-9")

    @property
    def num_gaussians(self) -> int:
        return self.positions.shape[0]

    @property
    def gaussians(self) -> list[Gaussian3D]:
        return [
            Gaussian3D(
                position=self.positions[i],
                color=np.clip(self.colors[i], 0.0, 1.0),
                opacity=float(self.opacities[i]),
                scale=self.scales[i],
                rotation=self.rotations[i],
            )
            for i in range(self.num_gaussians)
        ]

    @classmethod
    def from_gaussians(
        cls,
        gaussians: Iterable[Gaussian3D],
        poses: Optional[list[CameraPose]] = None,
        background=(0.0, 0.0, 0.0),
    ) -> "SceneModel":
        gs = list(gaussians)
        if not gs:
            raise ValueError("scene requires at least one gaussian")
        return cls(
            positions=np.stack([g.position for g in gs]),
            colors=np.stack([g.color for g in gs]),
            opacities=np.array([g.opacity for g in gs]),
            scales=np.stack([g.scale for g in gs]),
            rotations=np.stack([g.rotation for g in gs]),
            poses=poses,
            background=background,
        )

    def copy(self) -> "SceneModel":
        return SceneModel(
            positions=self.positions,
            colors=self.colors,
            opacities=self.opacities,
            scales=self.scales,
            rotations=self.rotations,
            poses=list(self.poses),
            background=self.background,
        )

    def extent(self) -> float:
        """Largest distance of any primitive from the scene centroid."""
        center = self.positions.mean(axis=0)
        return float(np.linalg.norm(self.positions - center, axis=1).max())

    # ---- serialization -------------------------------------------------

    def save_ply(self, path) -> None:
        write_ply(
            path,
            {
                "x": self.positions[:, 0],
                "y": self.positions[:, 1],
                "z": self.positions[:, 2],
                "r": self.colors[:, 0],
                "g": self.colors[:, 1],
                "b": self.colors[:, 2],
                "opacity": self.opacities,
                "scale_x": self.scales[:, 0],
                "scale_y": self.scales[:, 1],
                "scale_z": self.scales[:, 2],
                "rot_w": self.rotations[:, 0],
                "rot_x": self.rotations[:, 1],
                "rot_y": self.rotations[:, 2],
                "rot_z": self.rotations[:, 3],
            },
        )

    @classmethod
    def load_ply(
        cls, path, poses: Optional[list[CameraPose]] = None, background=(0.0, 0.0, 0.0)
    ) -> "SceneModel":
        props = read_ply(path)
        rot = np.stack([props["rot_w"], props["rot_x"], props["rot_y"], props["rot_z"]], axis=1)
        rot = rot / np.linalg.norm(rot, axis=1, keepdims=True)
        return cls(
            positions=np.stack([props["x"], props["y"], props["z"]], axis=1),
            colors=np.clip(np.stack([props["r"], props["g"], props["b"]], axis=1), 0.0, 1.0),
            opacities=props["opacity"],
            scales=props["scale_x"].reshape(-1, 1).repeat(3, axis=1)
            if "scale_y" not in props
            else np.stack([props["scale_x"], props["scale_y"], props["scale_z"]], axis=1),
            rotations=rot,
            poses=poses,
            background=background,
        )

    def save_poses(self, path) -> None:
        records = [
            {
                "rotation": [float(v) for v in p.rotation],
                "translation": [float(v) for v in p.translation],
            }
            for p in self.poses
        ]
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(records, indent=2, sort_keys=True))

    @staticmethod
    def load_poses(path) -> list[CameraPose]:
        records = json.loads(Path(path).read_text())
        return [
            CameraPose(rotation=np.array(r["rotation"]), translation=np.array(r["translation"]))
            for r in records
        ]


def scene_from_point_cloud(
    positions: np.ndarray,
    colors: np.ndarray,
    poses: list[CameraPose],
    background=(0.0, 0.0, 0.0),
    scale_knn: int = 3,
    scale_factor: float = 0.6,
    opacity: float | None = None,
    focal: float | None = None,
) -> SceneModel:
    """Initialize one isotropic Gaussian per cloud point.

    Scale comes from the local density (scale_factor times the mean distance
    to the k nearest neighbors). When `opacity` is None it is chosen per
    point so a primitive seen from the nearest camera composites at roughly
    0.8 peak weight, using `focal` (pixels) for the footprint estimate.
    """
    from scipy.spatial import cKDTree

    pts = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    cols = np.clip(np.asarray(colors, dtype=np.float64).reshape(-1, 3), 0.0, 1.0)
    n = pts.shape[0]
    if n == 0:
        raise ValueError("point cloud is empty")

    if n == 1:
        scales = np.full((1, 3), 0.1)
    else:
        tree = cKDTree(pts)
        k = min(scale_knn + 1, n)
        dists, _ = tree.query(pts, k=k)
        mean_nn = dists[:, 1:].mean(axis=1) * scale_factor
        floor = max(1e-6, float(np.median(mean_nn)) * 0.1)
        scales = np.maximum(mean_nn, floor)[:, None].repeat(3, axis=1)

    if opacity is None:
        centers = np.stack([p.camera_center() for p in poses]) if poses else np.zeros((1, 3))
        d = np.linalg.norm(pts[:, None, :] - centers[None, :, :], axis=2).min(axis=1)
        d = np.maximum(d, 1e-6)
        f = focal if focal is not None else 64.0
        px = np.maximum(f * scales[:, 0] / d, 0.3)
        opac = -math.log(0.2) * px**2  # peak compositing weight ~0.8
    else:
        opac = np.full(n, float(opacity))

    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    return SceneModel(
        positions=pts,
        colors=cols,
        opacities=opac,
        scales=scales,
        rotations=quats,
        poses=poses,
        background=background,
    )
