"""Optimization: photometric/semantic/geometric training and joint
scene + pose refinement (bundle adjustment).

Scales and opacities are optimized in log space (always positive), rotations
and pose quaternions are renormalized after every step, and view 0's pose is
frozen to fix the global rigid-transform gauge.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .camera import CameraPose
from .losses import (
    LossReport,
    grid_embedding,
    grid_embedding_grad,
    image_metrics,
    l_geo,
    l_geo_grad,
    l_rgb,
    l_rgb_grad,
    l_sem,
    l_sem_grad,
)
from .panorama import PerspectiveView
from .rasterizer import RenderOptions, _ForwardState, render_backward
from .scene import SceneModel


class DivergenceError(RuntimeError):
    """Bundle adjustment kept getting worse; carries the trace so far."""

    def __init__(self, message: str, trace: "TrainTrace"):
        super().__init__(message)
        self.trace = trace


@dataclass
class TrainConfig:
    iterations: int = 3000
    lr_position: float = 1.6e-4  # multiplied by the scene extent
    lr_color: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    pose_opt_enabled: bool = False
    pose_lr: float = 1e-4
    lambda_sem: float = 0.1
    lambda_geo: float = 0.03
    loss_ramp: bool = True  # ramp the two weights over the first 20% of steps
    seed: int = 0
    eval_every: int = 0  # 0 = never
    checkpoint_every: int = 0  # 0 = never
    workers: int = 1
    kernel_cutoff_sigma: Optional[float] = 3.5
    divergence_window: int = 50

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        for name in ("lr_position", "lr_color", "lr_opacity", "lr_scale", "lr_rotation", "pose_lr"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be > 0")

    def render_options(self) -> RenderOptions:
        return RenderOptions(kernel_cutoff_sigma=self.kernel_cutoff_sigma, workers=self.workers)


@dataclass
class TrainTrace:
    losses: list[LossReport] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    wall_time: float = 0.0  # in memory only; never serialized

    def save_jsonl(self, path) -> None:
        """One record per iteration, plus eval records; byte-deterministic."""
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            for i, rep in enumerate(self.losses):
                rec = {
                    "iter": i,
                    "l_rgb": rep.l_rgb,
                    "l_sem": rep.l_sem,
                    "l_geo": rep.l_geo,
                    "lambda_sem": rep.lambda_sem,
                    "lambda_geo": rep.lambda_geo,
                    "total": rep.total,
                }
                f.write(json.dumps(rec, sort_keys=True) + "\n")
            for ev in self.evals:
                f.write(json.dumps({"eval": ev}, sort_keys=True) + "\n")

    @staticmethod
    def load_jsonl(path) -> "TrainTrace":
        trace = TrainTrace()
        for line in Path(path).read_text().splitlines():
            rec = json.loads(line)
            if "eval" in rec:
                trace.evals.append(rec["eval"])
            else:
                trace.losses.append(
                    LossReport(
                        l_rgb=rec["l_rgb"],
                        l_sem=rec["l_sem"],
                        l_geo=rec["l_geo"],
                        lambda_sem=rec["lambda_sem"],
                        lambda_geo=rec["lambda_geo"],
                        total=rec["total"],
                    )
                )
        return trace


class _Adam:
    """Per-array Adam with bias correction (beta1 0.9, beta2 0.999)."""

    def __init__(self, shape, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-15):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self, grad: np.ndarray, lr: float) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad**2
        mh = self.m / (1 - self.beta1**self.t)
        vh = self.v / (1 - self.beta2**self.t)
        return -lr * mh / (np.sqrt(vh) + self.eps)


class _SceneOptimizer:
    """Adam state over all Gaussian parameter classes (log scales/opacities)."""

    def __init__(self, scene: SceneModel, cfg: TrainConfig):
        n = scene.num_gaussians
        self.cfg = cfg
        self.extent = max(scene.extent(), 1e-6) if n else 1.0
        self.opt = {
            "positions": _Adam((n, 3)),
            "colors": _Adam((n, 3)),
            "log_opacities": _Adam((n,)),
            "log_scales": _Adam((n, 3)),
            "rotations": _Adam((n, 4)),
        }

    def apply(self, scene: SceneModel, grads) -> None:
        cfg = self.cfg
        for name, g in (
            ("positions", grads.positions),
            ("colors", grads.colors),
            ("opacities", grads.opacities),
            ("scales", grads.scales),
            ("rotations", grads.rotations),
        ):
            if not np.all(np.isfinite(g)):
                raise RuntimeError(f"non-finite gradient for {name}")
        scene.positions += self.opt["positions"].step(
            grads.positions, cfg.lr_position * self.extent
        )
        scene.colors += self.opt["colors"].step(grads.colors, cfg.lr_color)
        scene.colors[:] = np.clip(scene.colors, 0.0, 1.0)
        # chain rule into log space keeps both parameters positive
        scene.opacities *= np.exp(
            self.opt["log_opacities"].step(grads.opacities * scene.opacities, cfg.lr_opacity)
        )
        scene.scales *= np.exp(
            self.opt["log_scales"].step(grads.scales * scene.scales, cfg.lr_scale)
        )
        scene.rotations += self.opt["rotations"].step(grads.rotations, cfg.lr_rotation)
        scene.rotations /= np.linalg.norm(scene.rotations, axis=1, keepdims=True)


def _view_pose(scene: SceneModel, views, k: int) -> CameraPose:
    return scene.poses[k] if k < len(scene.poses) else views[k].pose


def _check_finite(name: str, value: float, it: int) -> None:
    if not math.isfinite(value):
        raise RuntimeError(f"non-finite {name} at iteration {it}")


def _loss_and_image_grads(
    rendered_rgb: np.ndarray,
    rendered_depth: np.ndarray,
    view: PerspectiveView,
    target_emb_fn,
    lam_sem: float,
    lam_geo: float,
    it: int,
):
    """Total objective for one view plus d(total)/d(rgb) and d(total)/d(depth)."""
    target = view.image
    v_rgb = l_rgb(rendered_rgb, target)
    _check_finite("l_rgb", v_rgb, it)
    grad_rgb = l_rgb_grad(rendered_rgb, target)
    v_sem = 0.0
    v_geo = 0.0
    grad_depth = None

    if lam_sem > 0.0:
        emb_r = grid_embedding(rendered_rgb)
        target_emb = target_emb_fn()
        v_sem = l_sem(emb_r, target_emb)
        _check_finite("l_sem", v_sem, it)
        gvec = l_sem_grad(emb_r, target_emb)
        grad_rgb = grad_rgb + lam_sem * grid_embedding_grad(rendered_rgb, gvec)
    if lam_geo > 0.0 and view.depth is not None:
        mask = np.isfinite(view.depth) & (view.depth > 0.0)
        if int(mask.sum()) >= 2:
            v_geo = l_geo(rendered_depth, view.depth, mask=mask)
            _check_finite("l_geo", v_geo, it)
            grad_depth = lam_geo * l_geo_grad(rendered_depth, view.depth, mask=mask)

    return LossReport.combine(v_rgb, v_sem, v_geo, lam_sem, lam_geo), grad_rgb, grad_depth


def train(
    scene: SceneModel,
    views: Sequence[PerspectiveView],
    cfg: TrainConfig,
    checkpoint_dir=None,
) -> tuple[SceneModel, TrainTrace]:
    """Optimize the scene against the views' target images.

    Views are visited round-robin in a seed-derived order. Returns a new
    scene; the input is untouched. Deterministic for a fixed config and seed.
    """
    if not views:
        raise ValueError("at least one view is required")
    scene = scene.copy()
    if len(scene.poses) < len(views):
        scene.poses = [v.pose for v in views]
    t0 = time.perf_counter()

    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(views))
    opts = cfg.render_options()
    optimizer = _SceneOptimizer(scene, cfg)
    pose_opts = (
        {k: (_Adam((4,)), _Adam((3,))) for k in range(1, len(views))}
        if cfg.pose_opt_enabled
        else {}
    )
    target_embs = [
        grid_embedding(v.image) if cfg.lambda_sem > 0.0 else None for v in views
    ]
    ramp_until = max(1, int(0.2 * cfg.iterations)) if cfg.loss_ramp else 0
    trace = TrainTrace()

    for it in range(cfg.iterations):
        k = int(order[it % len(views)])
        view = views[k]
        pose = _view_pose(scene, views, k)
        ramp = min(1.0, it / ramp_until) if ramp_until else 1.0
        lam_sem = cfg.lambda_sem * ramp
        lam_geo = cfg.lambda_geo * ramp

        state = _ForwardState(scene, pose, view.intrinsics, opts)
        report, grad_rgb, grad_depth = _loss_and_image_grads(
            state.output.rgb, state.output.depth, view, target_embs[k], lam_sem, lam_geo, it
        )
        trace.losses.append(report)

        grads = render_backward(
            scene, pose, view.intrinsics, grad_rgb, grad_depth, opts, state=state
        )
        optimizer.apply(scene, grads)
        if cfg.pose_opt_enabled and k in pose_opts:
            q_opt, t_opt = pose_opts[k]
            q = pose.rotation + q_opt.step(grads.pose_rotation, cfg.pose_lr)
            t = pose.translation + t_opt.step(grads.pose_translation, cfg.pose_lr)
            scene.poses[k] = CameraPose(rotation=q / np.linalg.norm(q), translation=t)

        if cfg.eval_every and (it + 1) % cfg.eval_every == 0:
            out = state.output
            m = image_metrics(np.clip(out.rgb, 0.0, 1.0), view.image)
            trace.evals.append({"iter": it, "view": k, **m})
        if checkpoint_dir and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            ckpt = Path(checkpoint_dir)
            scene.save_ply(ckpt / f"scene_{it + 1:06d}.ply")
            scene.save_poses(ckpt / f"poses_{it + 1:06d}.json")

    trace.wall_time = time.perf_counter() - t0
    return scene, trace


def bundle_adjust(
    scene: SceneModel,
    views: Sequence[PerspectiveView],
    cfg: TrainConfig,
) -> tuple[SceneModel, TrainTrace]:
    """Jointly refine Gaussians and camera poses on the summed photometric
    error over all views (view 0's pose stays frozen as the gauge anchor).

    Aborts with DivergenceError when the objective worsens for
    cfg.divergence_window consecutive iterations.
    """
    if not cfg.pose_opt_enabled:
        raise ValueError("bundle adjustment requires pose_opt_enabled")
    if len(views) < 2:
        raise ValueError(">=2 views required: a single view leaves the gauge free")
    scene = scene.copy()
    if len(scene.poses) < len(views):
        scene.poses = [v.pose for v in views]
    t0 = time.perf_counter()

    opts = cfg.render_options()
    optimizer = _SceneOptimizer(scene, cfg)
    pose_opts = {k: (_Adam((4,)), _Adam((3,))) for k in range(1, len(views))}
    trace = TrainTrace()
    best = math.inf
    worse_streak = 0

    for it in range(cfg.iterations):
        total = 0.0
        acc = None
        pose_grads = {}
        for k, view in enumerate(views):
            pose = _view_pose(scene, views, k)
            state = _ForwardState(scene, pose, view.intrinsics, opts)
            total += l_rgb(state.output.rgb, view.image)
            grad_rgb = l_rgb_grad(state.output.rgb, view.image)
            g = render_backward(
                scene, pose, view.intrinsics, grad_rgb, None, opts, state=state
            )
            if acc is None:
                acc = g
            else:
                acc.positions += g.positions
                acc.colors += g.colors
                acc.opacities += g.opacities
                acc.scales += g.scales
                acc.rotations += g.rotations
            pose_grads[k] = (g.pose_rotation, g.pose_translation)

        total /= len(views)
        if not math.isfinite(total):
            raise RuntimeError(f"non-finite l_rgb at iteration {it}")
        trace.losses.append(LossReport.combine(total, 0.0, 0.0, 0.0, 0.0))

        if total < best - 1e-15:
            best = total
            worse_streak = 0
        else:
            worse_streak += 1
            if worse_streak >= cfg.divergence_window:
                trace.wall_time = time.perf_counter() - t0
                raise DivergenceError(
                    f"objective has not improved for {worse_streak} iterations "
                    f"(best {best:.6g}, now {total:.6g})",
                    trace,
                )

        optimizer.apply(scene, acc)
        for k in range(1, len(views)):
            q_opt, t_opt = pose_opts[k]
            gq, gt = pose_grads[k]
            pose = scene.poses[k]
            q = pose.rotation + q_opt.step(gq, cfg.pose_lr)
            t = pose.translation + t_opt.step(gt, cfg.pose_lr)
            scene.poses[k] = CameraPose(rotation=q / np.linalg.norm(q), translation=t)

    trace.wall_time = time.perf_counter() - t0
    return scene, trace


def ba_objective(scene: SceneModel, views: Sequence[PerspectiveView], cfg: TrainConfig) -> float:
    """The bundle-adjustment objective (mean photometric error over views)."""
    from .rasterizer import render

    opts = cfg.render_options()
    total = 0.0
    for k, view in enumerate(views):
        pose = _view_pose(scene, views, k)
        out = render(scene, pose, view.intrinsics, opts)
        total += l_rgb(out.rgb, view.image)
    return total / len(views)
