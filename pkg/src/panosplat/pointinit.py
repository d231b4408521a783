"""Colored point cloud initialization from per-view depth, and the
confidence-weighted scale-invariant regression objective."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .camera import CameraIntrinsics, CameraPose, pixel_rays
from .fileio import read_pfm, write_pfm, write_ply, read_ply
from .panorama import PerspectiveView


@dataclass
class PointMap:
    """Per-pixel 3D coordinates with confidence.

    points: (H, W, 3); confidence: (H, W) strictly positive where valid;
    valid: (H, W) bool (defaults to everywhere); colors: optional (H, W, 3).
    """

    points: np.ndarray
    confidence: np.ndarray
    valid: Optional[np.ndarray] = None
    colors: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        conf = np.asarray(self.confidence, dtype=np.float64)
        if pts.ndim != 3 or pts.shape[2] != 3:
            raise ValueError(f"points must be (H, W, 3), got {pts.shape}")
        if conf.shape != pts.shape[:2]:
            raise ValueError(f"confidence shape {conf.shape} must be {pts.shape[:2]}")
        valid = (
            np.ones(pts.shape[:2], dtype=bool)
            if self.valid is None
            else np.asarray(self.valid, dtype=bool)
        )
        if valid.shape != pts.shape[:2]:
            raise ValueError(f"valid mask shape {valid.shape} must be {pts.shape[:2]}")
        if not np.all(np.isfinite(pts[valid])):
            raise ValueError("valid points contain non-finite coordinates")
        if np.any(conf[valid] <= 0.0):
            raise ValueError("confidence must be strictly positive on valid pixels")
        self.points = pts
        self.confidence = conf
        self.valid = valid
        if self.colors is not None:
            cols = np.asarray(self.colors, dtype=np.float64)
            if cols.shape != pts.shape:
                raise ValueError(f"colors shape {cols.shape} must match points {pts.shape}")
            self.colors = cols

    def save(self, points_path, confidence_path) -> None:
        """Write the xyz channels as a color PFM and confidence as a gray PFM.

        Invalid pixels are stored with confidence 0."""
        write_pfm(points_path, np.where(self.valid[..., None], self.points, 0.0))
        write_pfm(confidence_path, np.where(self.valid, self.confidence, 0.0))

    @classmethod
    def load(cls, points_path, confidence_path, colors: Optional[np.ndarray] = None) -> "PointMap":
        pts = read_pfm(points_path)
        conf = read_pfm(confidence_path)
        valid = conf > 0.0
        return cls(
            points=pts,
            confidence=np.where(valid, conf, 1.0),
            valid=valid,
            colors=colors,
        )


@dataclass
class PointCloud:
    positions: np.ndarray  # (N, 3)
    colors: np.ndarray  # (N, 3)

    def __post_init__(self):
        p = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        c = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if p.shape[0] < 1:
            raise ValueError("point cloud must contain at least one point")
        if c.shape != p.shape:
            raise ValueError(f"colors shape {c.shape} must match positions {p.shape}")
        if not np.all(np.isfinite(p)):
            raise ValueError("positions contain non-finite coordinates")
        self.positions = p
        self.colors = c

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
            },
        )

    @classmethod
    def load_ply(cls, path) -> "PointCloud":
        p = read_ply(path)
        return cls(
            positions=np.stack([p["x"], p["y"], p["z"]], axis=1),
            colors=np.stack([p["r"], p["g"], p["b"]], axis=1),
        )

    def bbox_diagonal(self) -> float:
        return float(np.linalg.norm(self.positions.max(axis=0) - self.positions.min(axis=0)))


def backproject(
    view: PerspectiveView,
    pose: Optional[CameraPose] = None,
    intr: Optional[CameraIntrinsics] = None,
    confidence: Optional[np.ndarray] = None,
) -> PointMap:
    """Lift a view's depth map to a world-frame point map.

    Each pixel's camera ray (z component 1) is scaled by its z-depth, then
    moved to world coordinates through the inverse pose. Pixels with
    nonpositive or non-finite depth are marked invalid, never errored.
    """
    if view.depth is None:
        raise ValueError("view has no depth map to backproject")
    pose = pose if pose is not None else view.pose
    intr = intr if intr is not None else view.intrinsics
    depth = np.asarray(view.depth, dtype=np.float64)
    if depth.shape != (intr.height, intr.width):
        raise ValueError(
            f"depth shape {depth.shape} does not match image ({intr.height}, {intr.width})"
        )
    valid = np.isfinite(depth) & (depth > 0.0)
    rays = pixel_rays(intr)
    pts_cam = rays * np.where(valid, depth, 1.0)[..., None]
    pts_world = pose.camera_to_world(pts_cam.reshape(-1, 3)).reshape(pts_cam.shape)
    conf = np.ones(depth.shape) if confidence is None else np.asarray(confidence, dtype=np.float64)
    colors = np.asarray(view.image, dtype=np.float64) if view.image is not None else None
    return PointMap(points=pts_world, confidence=conf, valid=valid, colors=colors)


def merge_clouds(maps: Sequence[PointMap], voxel: float) -> PointCloud:
    """Concatenate valid points and collapse each voxel to its
    confidence-weighted centroid (and color). Deterministic given input order."""
    if not maps:
        raise ValueError("at least one point map is required")
    if voxel <= 0.0:
        raise ValueError(f"voxel edge length must be > 0, got {voxel}")
    pts_list, conf_list, col_list = [], [], []
    for m in maps:
        v = m.valid
        pts_list.append(m.points[v])
        conf_list.append(m.confidence[v])
        if m.colors is not None:
            col_list.append(m.colors[v])
        else:
            col_list.append(np.full((int(v.sum()), 3), 0.5))
    pts = np.concatenate(pts_list, axis=0)
    conf = np.concatenate(conf_list, axis=0)
    cols = np.concatenate(col_list, axis=0)
    if pts.shape[0] == 0:
        raise ValueError("all points are invalid; cannot build a cloud")

    keys = np.floor(pts / voxel).astype(np.int64)
    _, inverse = np.unique(keys, axis=0, return_inverse=True)
    nvox = int(inverse.max()) + 1
    wsum = np.bincount(inverse, weights=conf, minlength=nvox)
    centroid = np.stack(
        [np.bincount(inverse, weights=conf * pts[:, k], minlength=nvox) for k in range(3)], axis=1
    )
    color = np.stack(
        [np.bincount(inverse, weights=conf * cols[:, k], minlength=nvox) for k in range(3)], axis=1
    )
    return PointCloud(positions=centroid / wsum[:, None], colors=color / wsum[:, None])


def confidence_loss(pred: PointMap, gt: PointMap, beta: float = 0.2) -> float:
    """Confidence-weighted scale-invariant regression objective.

    Sum over valid pixels of  C * ||X/z - X_ref/z_ref|| - beta * log C,
    where z (z_ref) is the mean point norm of the predicted (reference) map.
    Invariant to separate global rescaling of either map.
    """
    if pred.points.shape != gt.points.shape:
        raise ValueError(
            f"point map shapes differ: {pred.points.shape} vs {gt.points.shape}"
        )
    valid = pred.valid & gt.valid
    if not np.any(valid):
        raise ValueError("no common valid pixels")
    p = pred.points[valid]
    g = gt.points[valid]
    z = float(np.mean(np.linalg.norm(p, axis=1)))
    zbar = float(np.mean(np.linalg.norm(g, axis=1)))
    if z <= 0.0 or zbar <= 0.0:
        raise ValueError("degenerate point map: zero mean norm")
    resid = np.linalg.norm(p / z - g / zbar, axis=1)
    c = pred.confidence[valid]
    return float(np.sum(c * resid - beta * np.log(c)))
