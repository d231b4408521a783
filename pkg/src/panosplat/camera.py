"""Pinhole camera types and quaternion utilities shared across the package."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics derived from a horizontal field of view.

    The focal length (in pixels) is (width / 2) / tan(fov / 2) and is shared
    by both axes; the principal point is the image center (width/2, height/2)
    in continuous pixel coordinates where pixel (u, v) covers
    [u, u+1) x [v, v+1).
    """

    fov_deg: float
    width: int
    height: int

    def __post_init__(self):
        if not 0.0 < self.fov_deg < 180.0:
            raise ValueError(f"fov_deg must be in (0, 180), got {self.fov_deg}")
        if self.width < 1 or self.height < 1:
            raise ValueError(
                f"image size must be >= 1 pixel, got {self.width}x{self.height}"
            )

    @property
    def focal(self) -> float:
        return (self.width / 2.0) / math.tan(math.radians(self.fov_deg) / 2.0)

    @property
    def cx(self) -> float:
        return self.width / 2.0

    @property
    def cy(self) -> float:
        return self.height / 2.0


def _as_unit_quat(q, tol: float = 1e-9) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (4,):
        raise ValueError(f"quaternion must have shape (4,), got {q.shape}")
    norm = float(np.linalg.norm(q))
    if abs(norm - 1.0) > tol:
        raise ValueError(f"quaternion must be unit norm within {tol}, |q| = {norm}")
    return q / norm


@dataclass(frozen=True)
class CameraPose:
    """World-to-camera rigid transform: p_cam = R(rotation) @ p_world + translation.

    rotation is a unit quaternion (w, x, y, z).
    """

    rotation: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", _as_unit_quat(self.rotation))
        t = np.asarray(self.translation, dtype=np.float64)
        if t.shape != (3,):
            raise ValueError(f"translation must have shape (3,), got {t.shape}")
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(rotation=np.array([1.0, 0.0, 0.0, 0.0]), translation=np.zeros(3))

    @classmethod
    def from_matrix(cls, rot_mat: np.ndarray, translation=None) -> "CameraPose":
        q = rotmat_to_quat(np.asarray(rot_mat, dtype=np.float64))
        t = np.zeros(3) if translation is None else translation
        return cls(rotation=q, translation=t)

    @property
    def rot_matrix(self) -> np.ndarray:
        return quat_to_rotmat(self.rotation)

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rot_matrix.T + self.translation

    def camera_to_world(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return (pts - self.translation) @ self.rot_matrix

    def camera_center(self) -> np.ndarray:
        """Camera position in world coordinates (-R^T t)."""
        return -self.rot_matrix.T @ self.translation


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of quaternion(s) (w, x, y, z); accepts (4,) or (N, 4).

    The quaternion is normalized internally, so near-unit inputs are fine.
    """
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R[0] if single else R


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """Quaternion (w, x, y, z) of a proper rotation matrix (Shepperd's method)."""
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise ValueError(f"rotation matrix must be 3x3, got {R.shape}")
    tr = np.trace(R)
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        )
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = np.array(
            [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
        )
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = np.array(
            [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
        )
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = np.array(
            [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
        )
    q = q / np.linalg.norm(q)
    # canonical sign: nonnegative scalar part
    return -q if q[0] < 0 else q


def quat_rotmat_vjp(q: np.ndarray, grad_R: np.ndarray) -> np.ndarray:
    """Backpropagate gradients w.r.t. rotation matrices to raw quaternions.

    Differentiates R(q / |q|) with respect to the unnormalized q, so the
    result is tangent to the unit sphere at q/|q|. Accepts (4,)/(3,3) or
    batched (N, 4)/(N, 3, 3).
    """
    q = np.asarray(q, dtype=np.float64)
    grad_R = np.asarray(grad_R, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    g = grad_R.reshape(-1, 3, 3)
    norm = np.linalg.norm(q, axis=1, keepdims=True)
    u = q / norm
    w, x, y, z = u[:, 0], u[:, 1], u[:, 2], u[:, 3]
    zero = np.zeros_like(w)

    # dR/dw, dR/dx, dR/dy, dR/dz for the unit quaternion
    dRw = np.stack(
        [zero, -2 * z, 2 * y, 2 * z, zero, -2 * x, -2 * y, 2 * x, zero], axis=1
    ).reshape(-1, 3, 3)
    dRx = np.stack(
        [zero, 2 * y, 2 * z, 2 * y, -4 * x, -2 * w, 2 * z, 2 * w, -4 * x], axis=1
    ).reshape(-1, 3, 3)
    dRy = np.stack(
        [-4 * y, 2 * x, 2 * w, 2 * x, zero, 2 * z, -2 * w, 2 * z, -4 * y], axis=1
    ).reshape(-1, 3, 3)
    dRz = np.stack(
        [-4 * z, -2 * w, 2 * x, 2 * w, -4 * z, 2 * y, 2 * x, 2 * y, zero], axis=1
    ).reshape(-1, 3, 3)

    grad_u = np.stack(
        [
            np.einsum("nij,nij->n", g, dRw),
            np.einsum("nij,nij->n", g, dRx),
            np.einsum("nij,nij->n", g, dRy),
            np.einsum("nij,nij->n", g, dRz),
        ],
        axis=1,
    )
    # through normalization: grad_q = (I - u u^T) grad_u / |q|
    grad_q = (grad_u - u * np.sum(u * grad_u, axis=1, keepdims=True)) / norm
    return grad_q[0] if single else grad_q


def pixel_centers(intr: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Continuous center coordinates of every pixel, as (px, py) 2D grids."""
    px = np.arange(intr.width, dtype=np.float64) + 0.5
    py = np.arange(intr.height, dtype=np.float64) + 0.5
    return np.meshgrid(px, py)


def pixel_rays(intr: CameraIntrinsics) -> np.ndarray:
    """Camera-frame ray directions with z = 1 for every pixel, shape (H, W, 3).

    +x is right in the image, +y is up, so image row 0 maps to positive y.
    """
    px, py = pixel_centers(intr)
    f = intr.focal
    x = (px - intr.cx) / f
    y = (intr.cy - py) / f
    z = np.ones_like(x)
    return np.stack([x, y, z], axis=-1)


def project_points(points_cam: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """Project camera-frame points to continuous pixel coordinates (N, 2)."""
    p = np.asarray(points_cam, dtype=np.float64)
    z = p[..., 2]
    f = intr.focal
    u = intr.cx + f * p[..., 0] / z
    v = intr.cy - f * p[..., 1] / z
    return np.stack([u, v], axis=-1)
