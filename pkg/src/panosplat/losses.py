"""Training objectives and image quality metrics.

The total objective is  l_rgb + lambda_sem * l_sem + lambda_geo * l_geo
with default weights lambda_sem = 0.1 and lambda_geo = 0.03.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

PSNR_CAP_DB = 99.0
VARIANCE_EPS = 1e-8


@dataclass(frozen=True)
class Embedding:
    """A feature vector tagged with the id of whatever produced it."""

    vector: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64).ravel()
        if v.size < 1:
            raise ValueError("embedding must have at least one dimension")
        if not np.all(np.isfinite(v)):
            raise ValueError("embedding contains non-finite values")
        if np.linalg.norm(v) == 0.0:
            raise ValueError("embedding must not be the zero vector")
        object.__setattr__(self, "vector", v)


@dataclass(frozen=True)
class LossReport:
    l_rgb: float
    l_sem: float
    l_geo: float
    lambda_sem: float
    lambda_geo: float
    total: float

    @classmethod
    def combine(
        cls, l_rgb: float, l_sem: float, l_geo: float, lambda_sem: float, lambda_geo: float
    ) -> "LossReport":
        return cls(
            l_rgb=float(l_rgb),
            l_sem=float(l_sem),
            l_geo=float(l_geo),
            lambda_sem=float(lambda_sem),
            lambda_geo=float(lambda_geo),
            total=float(l_rgb + lambda_sem * l_sem + lambda_geo * l_geo),
        )


def l_rgb(rendered: np.ndarray, target: np.ndarray) -> float:
    """Mean absolute difference over all pixels and channels."""
    a = np.asarray(rendered, dtype=np.float64)
    b = np.asarray(target, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean(np.abs(a - b)))


def l_rgb_grad(rendered: np.ndarray, target: np.ndarray) -> np.ndarray:
    """d l_rgb / d rendered (subgradient sign(diff) / count)."""
    a = np.asarray(rendered, dtype=np.float64)
    b = np.asarray(target, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return np.sign(a - b) / a.size


def l_sem(a: Embedding, b: Embedding) -> float:
    """Cosine distance 1 - cos(a, b) between two embeddings, in [0, 2]."""
    va, vb = a.vector, b.vector
    if va.size != vb.size:
        raise ValueError(f"embedding dimensions differ: {va.size} vs {vb.size}")
    return float(1.0 - np.dot(va, vb) / (np.linalg.norm(va) * np.linalg.norm(vb)))


def l_sem_grad(a: Embedding, b: Embedding) -> np.ndarray:
    """d l_sem / d a.vector."""
    va, vb = a.vector, b.vector
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    cos = np.dot(va, vb) / (na * nb)
    return -(vb / (na * nb) - cos * va / na**2)


def _masked_pair(rendered, reference, mask):
    a = np.asarray(rendered, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if mask is None:
        mask = np.ones(a.shape, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != a.shape:
            raise ValueError(f"mask shape {mask.shape} does not match {a.shape}")
    if int(mask.sum()) < 2:
        raise ValueError("depth correlation requires at least 2 valid pixels")
    return a, b, mask


def l_geo(
    rendered_depth: np.ndarray,
    reference_depth: np.ndarray,
    eps: float = VARIANCE_EPS,
    mask: np.ndarray | None = None,
) -> float:
    """1 - Pearson correlation between depth maps over valid pixels.

    Invariant to positive affine transforms of either map. Returns 1.0 (no
    correlation) when either variance falls below eps.
    """
    a, b, m = _masked_pair(rendered_depth, reference_depth, mask)
    x = a[m] - a[m].mean()
    y = b[m] - b[m].mean()
    vx = float(np.mean(x * x))
    vy = float(np.mean(y * y))
    if vx < eps or vy < eps:
        return 1.0
    return float(1.0 - np.mean(x * y) / math.sqrt(vx * vy))


def l_geo_grad(
    rendered_depth: np.ndarray,
    reference_depth: np.ndarray,
    eps: float = VARIANCE_EPS,
    mask: np.ndarray | None = None,
) -> np.ndarray:
    """d l_geo / d rendered_depth (zero where masked out or degenerate)."""
    a, b, m = _masked_pair(rendered_depth, reference_depth, mask)
    grad = np.zeros_like(a)
    x = a[m] - a[m].mean()
    y = b[m] - b[m].mean()
    n = x.size
    vx = float(np.mean(x * x))
    vy = float(np.mean(y * y))
    if vx < eps or vy < eps:
        return grad
    sx = math.sqrt(vx * n)  # ||x||
    sy = math.sqrt(vy * n)
    r = float(np.dot(x, y)) / (sx * sy)
    # d r / d x for centered x (centering projector is a no-op on x, y)
    dr = y / (sx * sy) - r * x / sx**2
    grad[m] = -dr
    return grad


def total_loss(
    l_rgb_value: float,
    l_sem_value: float,
    l_geo_value: float,
    lambda_sem: float = 0.1,
    lambda_geo: float = 0.03,
) -> LossReport:
    """Weighted combination of the three training terms."""
    for name, v in (
        ("l_rgb", l_rgb_value),
        ("l_sem", l_sem_value),
        ("l_geo", l_geo_value),
        ("lambda_sem", lambda_sem),
        ("lambda_geo", lambda_geo),
    ):
        if not math.isfinite(v):
            raise ValueError(f"{name} must be finite, got {v}")
    return LossReport.combine(l_rgb_value, l_sem_value, l_geo_value, lambda_sem, lambda_geo)


def image_metrics(rendered: np.ndarray, target: np.ndarray) -> dict[str, float]:
    """PSNR (dB, capped at 99) and SSIM (11x11 Gaussian window, unit range)."""
    a = np.asarray(rendered, dtype=np.float64)
    b = np.asarray(target, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    psnr = PSNR_CAP_DB if mse <= 10 ** (-PSNR_CAP_DB / 10.0) else 10.0 * math.log10(1.0 / mse)
    return {"psnr": min(psnr, PSNR_CAP_DB), "ssim": ssim(a, b)}


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean structural similarity with the standard 11x11, sigma 1.5 window."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    c1 = 0.01**2
    c2 = 0.03**2
    sig, trunc = 1.5, 5.0 / 1.5  # 11-tap kernel
    vals = []
    for c in range(a.shape[2]):
        x, y = a[:, :, c], b[:, :, c]
        mx = gaussian_filter(x, sig, truncate=trunc)
        my = gaussian_filter(y, sig, truncate=trunc)
        vxx = gaussian_filter(x * x, sig, truncate=trunc) - mx * mx
        vyy = gaussian_filter(y * y, sig, truncate=trunc) - my * my
        vxy = gaussian_filter(x * y, sig, truncate=trunc) - mx * my
        s = ((2 * mx * my + c1) * (2 * vxy + c2)) / ((mx**2 + my**2 + c1) * (vxx + vyy + c2))
        vals.append(float(s.mean()))
    return float(np.mean(vals))


GRID_CELLS = 4  # fallback embedding: per-cell channel means and variances


def grid_embedding(image: np.ndarray, source_id: str = "builtin-grid") -> Embedding:
    """Deterministic non-semantic fallback embedding of an RGB image.

    Channel-wise mean and variance over a 4x4 cell grid, 96 dimensions. A
    stand-in so training and evaluation run offline; it carries no semantic
    content.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {img.shape}")
    feats = []
    for cy in range(GRID_CELLS):
        for cx in range(GRID_CELLS):
            cell = _grid_cell(img, cy, cx)
            feats.extend(cell.mean(axis=(0, 1)))
    for cy in range(GRID_CELLS):
        for cx in range(GRID_CELLS):
            cell = _grid_cell(img, cy, cx)
            feats.extend(cell.var(axis=(0, 1)))
    vec = np.asarray(feats)
    if np.linalg.norm(vec) == 0.0:
        vec = vec.copy()
        vec[0] = 1e-12  # all-black images still need a direction
    return Embedding(vector=vec, source_id=source_id)


def grid_embedding_grad(image: np.ndarray, grad_vector: np.ndarray) -> np.ndarray:
    """Backpropagate a gradient on grid_embedding's vector to the image."""
    img = np.asarray(image, dtype=np.float64)
    g = np.asarray(grad_vector, dtype=np.float64).ravel()
    grad_img = np.zeros_like(img)
    k = 0
    cells = GRID_CELLS * GRID_CELLS
    for cy in range(GRID_CELLS):
        for cx in range(GRID_CELLS):
            sl = _grid_slices(img, cy, cx)
            npx = (sl[0].stop - sl[0].start) * (sl[1].stop - sl[1].start)
            grad_img[sl] += g[k : k + 3][None, None, :] / npx
            k += 3
    for cy in range(GRID_CELLS):
        for cx in range(GRID_CELLS):
            sl = _grid_slices(img, cy, cx)
            cell = img[sl]
            npx = cell.shape[0] * cell.shape[1]
            centered = cell - cell.mean(axis=(0, 1), keepdims=True)
            grad_img[sl] += 2.0 * centered * g[k : k + 3][None, None, :] / npx
            k += 3
    return grad_img


def _grid_slices(img, cy, cx):
    h, w = img.shape[:2]
    ys = np.linspace(0, h, GRID_CELLS + 1).astype(int)
    xs = np.linspace(0, w, GRID_CELLS + 1).astype(int)
    return slice(ys[cy], ys[cy + 1]), slice(xs[cx], xs[cx + 1])


def _grid_cell(img, cy, cx):
    return img[_grid_slices(img, cy, cx)]
