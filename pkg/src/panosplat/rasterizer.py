"""Differentiable forward rendering of Gaussian scenes (RGB + depth + alpha).

Per view, every primitive is projected to a screen-space footprint (mean,
2x2 covariance via the local affine approximation of the pinhole map, plus a
0.3 px^2 isotropic dilation). Per pixel, footprints are composited front to
back:

    C(p) = sum_i c_i s_i(p) prod_{j<i} (1 - s_j(p)) + background * T_final
    s_i(p) = peak_i * exp(-0.5 d^T cov2d^-1 d),   d = p - mean2d_i
    peak_i = 1 - exp(-opacity_i / sqrt(det cov2d_i))

s is clipped to [0, 0.999] so transmittance never reaches zero. Depth is the
compositing-weighted mean of camera-space z, normalized by accumulated alpha.
`render_backward` returns analytic gradients for every Gaussian parameter and
the camera pose; they match central finite differences (see the test suite).

Work is vectorized over (gaussian, pixel) pairs, globally ordered by
(pixel, depth, input index), so output is independent of the input list
order. workers > 1 rasterizes horizontal bands in parallel; every pixel
lives in exactly one band, so RGB/depth/alpha are identical for any worker
count, and per-gaussian gradients are reduced in fixed band order.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .camera import CameraIntrinsics, CameraPose, quat_rotmat_vjp, quat_to_rotmat
from .scene import SceneModel, sigma_effective

COV2D_DILATION = 0.3  # px^2, keeps footprints at least a fraction of a pixel
NEAR_PLANE = 0.01
SIGMA_CLIP = 0.999
ALPHA_EPS = 1e-6
CULL_SIGMA = 3.0  # cull whole primitives whose 3-sigma box misses the image
_RANK_STRIDE = 1 << 22  # max gaussians per render for the composite sort key


@dataclass
class RenderOptions:
    """Rasterization knobs.

    kernel_cutoff_sigma limits each footprint's pixel box to that many
    standard deviations (None = evaluate the full image; exact but slow,
    used for gradient checking). dtype is the per-pair compute precision;
    float32 is plenty for training, float64 for gradient checks.
    """

    kernel_cutoff_sigma: Optional[float] = 3.0
    workers: int = 1
    dtype: str = "float64"


@dataclass
class SplatFootprint:
    """Screen-space footprint of one projected primitive."""

    mean2d: np.ndarray  # (2,) continuous pixel coords
    cov2d: np.ndarray  # (2, 2) SPD, px^2
    depth: float  # camera-space z
    sigma_peak: float
    color: np.ndarray  # (3,)


@dataclass
class RenderOutput:
    rgb: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W), alpha-weighted expected z, 0 where alpha ~ 0
    alpha: np.ndarray  # (H, W) accumulated opacity in [0, 1]


@dataclass
class RenderGrads:
    """Gradients of a scalar loss w.r.t. scene parameters and the pose."""

    positions: np.ndarray  # (N, 3)
    colors: np.ndarray  # (N, 3)
    opacities: np.ndarray  # (N,)
    scales: np.ndarray  # (N, 3)
    rotations: np.ndarray  # (N, 4), tangent to the unit sphere
    pose_rotation: np.ndarray  # (4,), tangent to the unit sphere
    pose_translation: np.ndarray  # (3,)


def _project_arrays(scene: SceneModel, pose: CameraPose, intr: CameraIntrinsics):
    """Vectorized projection of all primitives; returns per-gaussian arrays
    plus the intermediates the backward pass needs."""
    W = pose.rot_matrix
    p_cam = scene.positions @ W.T + pose.translation  # (N, 3)
    X, Y, Z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    infront = Z > NEAR_PLANE

    f = intr.focal
    Zs = np.where(infront, Z, 1.0)  # placeholder z for culled rows
    mean2d = np.stack([intr.cx + f * X / Zs, intr.cy - f * Y / Zs], axis=1)

    # local affine approximation of the projection
    J = np.zeros((scene.num_gaussians, 2, 3))
    J[:, 0, 0] = f / Zs
    J[:, 0, 2] = -f * X / Zs**2
    J[:, 1, 1] = -f / Zs
    J[:, 1, 2] = f * Y / Zs**2

    Rg = quat_to_rotmat(scene.rotations)  # (N, 3, 3)
    S2 = scene.scales**2
    sigma3 = np.einsum("nik,nk,njk->nij", Rg, S2, Rg)
    M = np.einsum("ik,nkl,jl->nij", W, sigma3, W)  # camera-frame covariance
    cov2d = np.einsum("nik,nkl,njl->nij", J, M, J)
    cov2d[:, 0, 0] += COV2D_DILATION
    cov2d[:, 1, 1] += COV2D_DILATION

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    det = np.maximum(det, 1e-12)
    conic = np.empty_like(cov2d)
    conic[:, 0, 0] = cov2d[:, 1, 1] / det
    conic[:, 0, 1] = -cov2d[:, 0, 1] / det
    conic[:, 1, 0] = -cov2d[:, 1, 0] / det
    conic[:, 1, 1] = cov2d[:, 0, 0] / det

    sqrt_det = np.sqrt(det)
    decay = np.exp(-scene.opacities / sqrt_det)
    speak = 1.0 - decay

    # conservative screen radius from the largest eigenvalue
    mid = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1])
    lam_max = mid + np.sqrt(np.maximum(mid**2 - det, 0.0))
    radius = CULL_SIGMA * np.sqrt(lam_max)
    onscreen = (
        (mean2d[:, 0] + radius > 0.0)
        & (mean2d[:, 0] - radius < intr.width)
        & (mean2d[:, 1] + radius > 0.0)
        & (mean2d[:, 1] - radius < intr.height)
    )
    valid = infront & onscreen

    return {
        "valid": valid,
        "p_cam": p_cam,
        "mean2d": mean2d,
        "cov2d": cov2d,
        "conic": conic,
        "det": det,
        "sqrt_det": sqrt_det,
        "decay": decay,
        "speak": speak,
        "lam_max": lam_max,
        "J": J,
        "W": W,
        "Rg": Rg,
        "M": M,
        "sigma3": sigma3,
    }


def project_gaussian(
    g, pose: CameraPose, intr: CameraIntrinsics
) -> Optional[SplatFootprint]:
    """Project a single primitive; returns None when culled (behind the near
    plane or fully off-screen beyond 3 sigma)."""
    scene = SceneModel(
        positions=g.position[None],
        colors=g.color[None],
        opacities=[g.opacity],
        scales=g.scale[None],
        rotations=g.rotation[None],
    )
    pr = _project_arrays(scene, pose, intr)
    if not pr["valid"][0]:
        return None
    cov2d = pr["cov2d"][0]
    return SplatFootprint(
        mean2d=pr["mean2d"][0],
        cov2d=cov2d,
        depth=float(pr["p_cam"][0, 2]),
        sigma_peak=sigma_effective(float(g.opacity), cov2d),
        color=np.asarray(g.color, dtype=np.float64),
    )


def _build_pairs(pr, indices, ranks, intr, opts, row0, row1):
    """Enumerate (gaussian, pixel) pairs for image rows [row0, row1), ordered
    by (pixel, depth, input index). Returns None when the band is empty."""
    dtype = np.dtype(opts.dtype)
    mean2d = pr["mean2d"][indices]
    W, H = intr.width, intr.height

    if opts.kernel_cutoff_sigma is None:
        x0 = np.zeros(len(indices), dtype=np.int64)
        x1 = np.full(len(indices), W, dtype=np.int64)
        y0 = np.full(len(indices), row0, dtype=np.int64)
        y1 = np.full(len(indices), row1, dtype=np.int64)
    else:
        r = opts.kernel_cutoff_sigma * np.sqrt(pr["lam_max"][indices])
        x0 = np.clip(np.floor(mean2d[:, 0] - r).astype(np.int64), 0, W)
        x1 = np.clip(np.ceil(mean2d[:, 0] + r).astype(np.int64) + 1, 0, W)
        y0 = np.clip(np.floor(mean2d[:, 1] - r).astype(np.int64), row0, row1)
        y1 = np.clip(np.ceil(mean2d[:, 1] + r).astype(np.int64) + 1, row0, row1)

    bw = np.maximum(x1 - x0, 0)
    bh = np.maximum(y1 - y0, 0)
    counts = bw * bh
    keep = counts > 0
    if not np.any(keep):
        return None
    sel = np.flatnonzero(keep)
    bw, counts = bw[sel], counts[sel]
    x0, y0 = x0[sel], y0[sel]

    offsets = np.concatenate([[0], np.cumsum(counts)])
    total = int(offsets[-1])
    local = np.repeat(sel, counts)  # index into `indices`
    k = np.arange(total, dtype=np.int64) - np.repeat(offsets[:-1], counts)
    bws = np.repeat(bw, counts)
    px = np.repeat(x0, counts) + k % bws
    py = np.repeat(y0, counts) + k // bws
    pixid = py * W + px

    # one integer key encodes (pixel, depth rank); unique per pair
    order = np.argsort(pixid * _RANK_STRIDE + ranks[local], kind="stable")
    local = local[order]
    pixid = pixid[order]
    px = px[order]
    py = py[order]

    gsel = indices[local]
    dx = np.asarray(px + 0.5 - pr["mean2d"][gsel, 0], dtype=dtype)
    dy = np.asarray(py + 0.5 - pr["mean2d"][gsel, 1], dtype=dtype)
    ca = np.asarray(pr["conic"][gsel, 0, 0], dtype=dtype)
    cb = np.asarray(pr["conic"][gsel, 0, 1], dtype=dtype)
    cc = np.asarray(pr["conic"][gsel, 1, 1], dtype=dtype)
    q = ca * dx**2 + 2.0 * cb * dx * dy + cc * dy**2
    G = np.exp(-0.5 * q)
    sigma_raw = np.asarray(pr["speak"][gsel], dtype=dtype) * G
    sigma = np.minimum(sigma_raw, dtype.type(SIGMA_CLIP))

    first = np.ones(total, dtype=bool)
    first[1:] = pixid[1:] != pixid[:-1]
    seg_starts = np.flatnonzero(first)
    seg_id = np.cumsum(first) - 1

    return {
        "local": local,
        "gsel": gsel,
        "pixid": pixid,
        "dx": dx,
        "dy": dy,
        "G": G,
        "sigma": sigma,
        "clipped": sigma_raw > SIGMA_CLIP,
        "z": np.asarray(pr["p_cam"][gsel, 2], dtype=dtype),
        "first": first,
        "seg_starts": seg_starts,
        "seg_id": seg_id,
        "seg_pix": pixid[first],
    }


def _band_rows(height: int, workers: int) -> list[tuple[int, int]]:
    workers = max(1, min(int(workers), height))
    edges = np.linspace(0, height, workers + 1).astype(int)
    return [(int(edges[i]), int(edges[i + 1])) for i in range(workers) if edges[i] < edges[i + 1]]


class _ForwardState:
    """Cached projection + per-band pair state shared by forward and backward."""

    def __init__(self, scene: SceneModel, pose: CameraPose, intr: CameraIntrinsics, opts: RenderOptions):
        self.scene = scene
        self.pose = pose
        self.intr = intr
        self.opts = opts
        self.pr = _project_arrays(scene, pose, intr)
        self.indices = np.flatnonzero(self.pr["valid"])
        if len(self.indices) >= _RANK_STRIDE:
            raise ValueError(f"scene exceeds {_RANK_STRIDE} visible gaussians")
        self.bands = _band_rows(intr.height, opts.workers)
        self.colors = scene.colors

        # depth ranks over valid gaussians, ties broken by input index
        z = self.pr["p_cam"][self.indices, 2]
        order = np.lexsort((self.indices, z))
        ranks = np.empty(len(self.indices), dtype=np.int64)
        ranks[order] = np.arange(len(self.indices))

        npx = intr.width * intr.height
        csum = np.zeros((npx, 3))
        acc = np.zeros(npx)
        dnum = np.zeros(npx)
        log_tfinal = np.zeros(npx)
        self.band_pairs = []

        def run_band(rows):
            if len(self.indices) == 0:
                return None
            pairs = _build_pairs(self.pr, self.indices, ranks, intr, opts, rows[0], rows[1])
            if pairs is None:
                return None
            sigma = pairs["sigma"]
            lg = np.log1p(-sigma)
            cs = np.cumsum(lg)
            base = (cs - lg)[pairs["first"]]
            T = np.exp(cs - lg - base[pairs["seg_id"]])
            w = sigma * T
            pairs["T"] = T
            pairs["w"] = w
            pairs["lg"] = lg
            pairs["wc"] = w[:, None] * self.colors[pairs["gsel"]]
            return pairs

        if len(self.bands) > 1:
            with ThreadPoolExecutor(max_workers=len(self.bands)) as ex:
                results = list(ex.map(run_band, self.bands))
        else:
            results = [run_band(rows) for rows in self.bands]

        for pairs in results:
            self.band_pairs.append(pairs)
            if pairs is None:
                continue
            starts = pairs["seg_starts"]
            spix = pairs["seg_pix"]
            csum[spix] += np.add.reduceat(pairs["wc"], starts, axis=0)
            acc[spix] += np.add.reduceat(pairs["w"], starts)
            dnum[spix] += np.add.reduceat(pairs["w"] * pairs["z"], starts)
            log_tfinal[spix] += np.add.reduceat(pairs["lg"], starts)

        tfinal = np.exp(log_tfinal)
        rgb = csum + tfinal[:, None] * scene.background[None, :]
        covered = acc > ALPHA_EPS
        depth = np.where(covered, dnum / np.where(covered, acc, 1.0), 0.0)

        H, W = intr.height, intr.width
        self.acc = acc
        self.dnum = dnum
        self.tfinal = tfinal
        self.covered = covered
        self.output = RenderOutput(
            rgb=rgb.reshape(H, W, 3),
            depth=depth.reshape(H, W),
            alpha=acc.reshape(H, W).clip(0.0, 1.0),
        )


def render(
    scene: SceneModel,
    pose: CameraPose,
    intr: CameraIntrinsics,
    opts: Optional[RenderOptions] = None,
) -> RenderOutput:
    """Render RGB, expected depth and accumulated alpha from one pose."""
    return _ForwardState(scene, pose, intr, opts or RenderOptions()).output


def render_backward(
    scene: SceneModel,
    pose: CameraPose,
    intr: CameraIntrinsics,
    grad_rgb: np.ndarray,
    grad_depth: Optional[np.ndarray] = None,
    opts: Optional[RenderOptions] = None,
    state: Optional[_ForwardState] = None,
) -> RenderGrads:
    """Analytic gradients of sum(grad_rgb * rgb) + sum(grad_depth * depth).

    Pass `state` to reuse a forward pass; otherwise the forward is recomputed
    with the same options. Shapes of grad_rgb/(optional) grad_depth must match
    the render output.
    """
    grad_rgb = np.asarray(grad_rgb, dtype=np.float64)
    if grad_rgb.shape != (intr.height, intr.width, 3):
        raise ValueError(
            f"grad_rgb shape {grad_rgb.shape} does not match image "
            f"({intr.height}, {intr.width}, 3)"
        )
    with_depth = grad_depth is not None
    if with_depth:
        grad_depth = np.asarray(grad_depth, dtype=np.float64)
        if grad_depth.shape != (intr.height, intr.width):
            raise ValueError(
                f"grad_depth shape {grad_depth.shape} does not match image "
                f"({intr.height}, {intr.width})"
            )

    st = state if state is not None else _ForwardState(scene, pose, intr, opts or RenderOptions())
    pr = st.pr
    n = scene.num_gaussians
    npx = intr.width * intr.height

    gC = grad_rgb.reshape(npx, 3)
    if with_depth:
        gD = grad_depth.reshape(npx)
        covered = st.covered
        safe_acc = np.where(covered, st.acc, 1.0)
        gDnum_px = np.where(covered, gD / safe_acc, 0.0)
        gA_px = np.where(covered, -gD * st.dnum / safe_acc**2, 0.0)

    # per-gaussian accumulators over all pairs
    g_color = np.zeros((n, 3))
    g_speak = np.zeros(n)
    g_mean2d = np.zeros((n, 2))
    g_conic = np.zeros((n, 2, 2))
    g_z = np.zeros(n)

    for pairs in st.band_pairs:
        if pairs is None:
            continue
        gidx = pairs["gsel"]
        pix = pairs["pixid"]
        w = pairs["w"]
        T = pairs["T"]
        sigma = pairs["sigma"]
        z = pairs["z"]
        col = st.colors[gidx]
        first = pairs["first"]
        seg_id = pairs["seg_id"]
        starts = pairs["seg_starts"]

        # suffix sums (over strictly later pairs of the same pixel):
        # seg_total - inclusive_prefix, both relative to the segment start
        def suffix1(values):
            incl = np.cumsum(values)
            totals = np.add.reduceat(values, starts)
            base = (incl - values)[first]
            return (totals + base)[seg_id] - incl

        wc = pairs["wc"]
        incl_c = np.cumsum(wc, axis=0)
        totals_c = np.add.reduceat(wc, starts, axis=0)
        base_c = (incl_c - wc)[first]
        suf_c = (totals_c + base_c)[seg_id] - incl_c

        gC_pair = gC[pix]
        one_m = 1.0 - sigma
        direct = np.einsum("pc,pc->p", gC_pair, col)
        tail = np.einsum(
            "pc,pc->p",
            gC_pair,
            suf_c + st.tfinal[pix, None] * scene.background[None, :],
        )
        if with_depth:
            suf_a = suffix1(w)
            suf_d = suffix1(w * z)
            direct = direct + gDnum_px[pix] * z + gA_px[pix]
            tail = tail + gDnum_px[pix] * suf_d + gA_px[pix] * suf_a
        g_sigma = T * direct - tail / one_m
        g_sigma[pairs["clipped"]] = 0.0

        G = pairs["G"]
        speak = pr["speak"][gidx]
        gG = g_sigma * speak
        g_speak_pair = g_sigma * G
        gq = gG * G * -0.5  # G = exp(-0.5 q)

        dx, dy = pairs["dx"], pairs["dy"]
        ca = pr["conic"][gidx, 0, 0]
        cb = pr["conic"][gidx, 0, 1]
        cc = pr["conic"][gidx, 1, 1]
        # d(q)/d(mean) = -2 P d ; d(q)/dP = d d^T
        gm_x = gq * (-2.0 * (ca * dx + cb * dy))
        gm_y = gq * (-2.0 * (cb * dx + cc * dy))

        def reduce(values):
            return np.bincount(gidx, weights=values, minlength=n)

        for c in range(3):
            g_color[:, c] += reduce(w * gC_pair[:, c])
        if with_depth:
            g_z += reduce(w * gDnum_px[pix])
        g_speak += reduce(g_speak_pair)
        g_mean2d[:, 0] += reduce(gm_x)
        g_mean2d[:, 1] += reduce(gm_y)
        g_conic[:, 0, 0] += reduce(gq * dx * dx)
        gxy = reduce(gq * dx * dy)
        g_conic[:, 0, 1] += gxy
        g_conic[:, 1, 0] += gxy
        g_conic[:, 1, 1] += reduce(gq * dy * dy)

    return _chain_to_parameters(scene, pose, pr, g_color, g_speak, g_mean2d, g_conic, g_z)


def _chain_to_parameters(scene, pose, pr, g_color, g_speak, g_mean2d, g_conic, g_z):
    """Chain per-gaussian screen-space gradients back to scene parameters."""
    valid = pr["valid"]
    conic = pr["conic"]
    det = pr["det"]
    decay = pr["decay"]
    sqrt_det = pr["sqrt_det"]
    J = pr["J"]
    W = pr["W"]
    Rg = pr["Rg"]
    M = pr["M"]
    sigma3 = pr["sigma3"]
    p_cam = pr["p_cam"]
    alpha = scene.opacities

    # opacity and determinant through peak = 1 - exp(-alpha / sqrt(det))
    g_alpha = np.where(valid, g_speak * decay / sqrt_det, 0.0)
    g_det = g_speak * decay * (-0.5) * alpha / det**1.5

    # conic = cov2d^-1  =>  g_cov = -P g_conic P ; det path: d(det)/d(cov) = det * conic
    g_cov = -np.einsum("nki,nkl,nlj->nij", conic, g_conic, conic)
    g_cov += (g_det * det)[:, None, None] * conic
    g_cov[~valid] = 0.0

    # cov2d = J M J^T + dilation
    g_M = np.einsum("nki,nkl,nlj->nij", J, g_cov, J)
    g_J = 2.0 * np.einsum("nik,nkl,nlj->nij", g_cov, J, M)

    # sigma3 (world covariance) and pose-rotation paths of M = W sigma3 W^T
    g_sigma3 = np.einsum("ki,nkl,lj->nij", W, g_M, W)
    g_W_cov = 2.0 * np.einsum("nik,kl,nlj->nij", g_M, W, sigma3)

    # camera-space position: mean2d path (Jacobian of the projection is J) ...
    g_pcam = np.einsum("nji,nj->ni", J, g_mean2d)
    # ... plus the dependence of J itself on (X, Y, Z) ...
    f_over = J[:, 0, 0]  # f / Z
    Z = p_cam[:, 2]
    Zs = np.where(Z > 0, Z, 1.0)
    X, Y = p_cam[:, 0], p_cam[:, 1]
    g_pcam[:, 0] += g_J[:, 0, 2] * (-f_over / Zs)
    g_pcam[:, 1] += g_J[:, 1, 2] * (f_over / Zs)
    g_pcam[:, 2] += (
        g_J[:, 0, 0] * (-f_over / Zs)
        + g_J[:, 0, 2] * (2.0 * f_over * X / Zs**2)
        + g_J[:, 1, 1] * (f_over / Zs)
        + g_J[:, 1, 2] * (-2.0 * f_over * Y / Zs**2)
    )
    # ... plus the depth output
    g_pcam[:, 2] += g_z
    g_pcam[~valid] = 0.0

    g_positions = g_pcam @ W  # row-stacked W^T g

    # gaussian covariance factorization: sigma3 = Rg diag(s^2) Rg^T
    S2 = scene.scales**2
    g_Rg = 2.0 * np.einsum("nij,njk,nk->nik", g_sigma3, Rg, S2)
    inner = np.einsum("nki,nkl,nlj->nij", Rg, g_sigma3, Rg)
    g_scales = 2.0 * scene.scales * np.einsum("nii->ni", inner)
    g_scales[~valid] = 0.0
    g_rotations = quat_rotmat_vjp(scene.rotations, g_Rg)
    g_rotations[~valid] = 0.0

    # pose: translation enters p_cam only; rotation enters p_cam and M
    g_pose_t = g_pcam.sum(axis=0)
    g_W = g_pcam.T @ scene.positions + g_W_cov[valid].sum(axis=0)
    g_pose_q = quat_rotmat_vjp(pose.rotation, g_W)

    return RenderGrads(
        positions=g_positions,
        colors=g_color,
        opacities=g_alpha,
        scales=g_scales,
        rotations=g_rotations,
        pose_rotation=g_pose_q,
        pose_translation=g_pose_t,
    )
