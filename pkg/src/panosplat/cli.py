"""Pipeline driver: refine -> slide -> init -> train -> render -> metrics.

One JSON config describes paths, the view schedule, training parameters and
hook endpoints; every stage writes its artifacts plus a manifest (hashed
inputs, hashed outputs, package version, seed) under <out>/manifests/.
Re-running a stage whose manifest matches the current inputs is a no-op
unless --force is given.

Exit codes: 0 success, 1 user error (bad config / missing dependency),
2 hook failure, 3 internal error.

Embedder hook protocol (metrics stage): `command INPUT_PNG SOURCE_ID OUTPUT`
writing OUTPUT as a raw float32 embedding with a JSON sidecar next to it.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .camera import CameraIntrinsics, CameraPose
from .fileio import read_embedding, read_pfm, read_png, write_pfm, write_png
from .hooks import (
    HookError,
    HttpCriticHook,
    HttpImageHook,
    SubprocessCriticHook,
    SubprocessImageHook,
    bicubic_upscale,
)
from .losses import Embedding, grid_embedding, image_metrics, l_sem
from .panorama import EquirectImage, PerspectiveView, sliding_schedule, equirect_to_perspective
from .pointinit import PointCloud, backproject, merge_clouds
from .rasterizer import render
from .refine import run_refinement
from .scene import SceneModel, scene_from_point_cloud
from .trainer import TrainConfig, train

ALL_STAGES = ["refine", "slide", "init", "train", "render", "metrics"]

DEFAULT_CONFIG = {
    "seed": 0,
    "paths": {
        "panorama": None,
        "views_dir": None,
        "depth_dir": None,
        "embeddings_dir": None,
        "output_dir": "out",
    },
    "schedule": {"fov_deg": 90.0, "view_width": 512, "view_height": 512},
    "refine": {"initial_prompt": "", "max_rounds": 3, "superres": False},
    "init": {"voxel": None, "min_alpha": 0.5},
    "train": {
        "iterations": 3000,
        "lr_position": 1.6e-4,
        "lr_color": 2.5e-3,
        "lr_opacity": 5e-2,
        "lr_scale": 5e-3,
        "lr_rotation": 1e-3,
        "pose_opt_enabled": False,
        "pose_lr": 1e-4,
        "lambda_sem": 0.1,
        "lambda_geo": 0.03,
        "loss_ramp": True,
        "eval_every": 0,
        "checkpoint_every": 0,
        "workers": 1,
        "kernel_cutoff_sigma": 3.5,
    },
    "hooks": {
        "generator": None,
        "critic": None,
        "denoiser": None,
        "embedder": None,
        "depth": None,
        "superres": None,
    },
}


class UserError(ValueError):
    """Bad config or command line; maps to exit code 1."""


class DependencyError(UserError):
    """A required artifact is missing; names the stage that produces it."""

    def __init__(self, artifact: str, producing_stage: str):
        self.artifact = artifact
        self.producing_stage = producing_stage
        super().__init__(
            f"missing artifact '{artifact}'; run the '{producing_stage}' stage first"
        )


class PipelineConfig:
    """The parsed config document plus derived accessors."""

    def __init__(self, data: dict):
        self.data = _merge(copy.deepcopy(DEFAULT_CONFIG), data)

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        try:
            return cls(json.loads(Path(path).read_text()))
        except FileNotFoundError:
            raise UserError(f"config file not found: {path}")
        except json.JSONDecodeError as e:
            raise UserError(f"config is not valid JSON: {e}")

    def override(self, dotted_key: str, raw_value: str) -> None:
        node = self.data
        parts = dotted_key.split(".")
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise UserError(f"unknown config key: {dotted_key}")
            node = node[p]
        if parts[-1] not in node:
            raise UserError(f"unknown config key: {dotted_key}")
        try:
            node[parts[-1]] = json.loads(raw_value)
        except json.JSONDecodeError:
            node[parts[-1]] = raw_value

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    @property
    def out_dir(self) -> Path:
        return Path(self.data["paths"]["output_dir"])

    def intrinsics(self) -> CameraIntrinsics:
        s = self.data["schedule"]
        return CameraIntrinsics(
            fov_deg=float(s["fov_deg"]), width=int(s["view_width"]), height=int(s["view_height"])
        )

    def train_config(self) -> TrainConfig:
        t = dict(self.data["train"])
        t["seed"] = self.seed
        return TrainConfig(**t)

    def image_hook(self, name: str):
        spec = self.data["hooks"].get(name)
        if spec is None:
            return None
        kind = spec.get("kind")
        if kind == "subprocess":
            return SubprocessImageHook(spec["command"])
        if kind == "http":
            return HttpImageHook(spec["url"])
        if kind == "builtin":
            return "builtin"
        raise UserError(f"hook '{name}' has unknown kind {kind!r}")

    def critic_hook(self):
        spec = self.data["hooks"].get("critic")
        if spec is None:
            return None
        kind = spec.get("kind")
        if kind == "subprocess":
            return SubprocessCriticHook(spec["command"])
        if kind == "http":
            return HttpCriticHook(spec["url"])
        raise UserError(f"critic hook has unknown kind {kind!r}")


def _merge(base: dict, extra: dict) -> dict:
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _merge(base[k], v)
        else:
            base[k] = v
    return base


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class StageRunner:
    def __init__(self, cfg: PipelineConfig, force: bool = False):
        self.cfg = cfg
        self.force = force
        self.out = cfg.out_dir
        self.manifest_dir = self.out / "manifests"

    def _manifest_path(self, stage: str) -> Path:
        return self.manifest_dir / f"{stage}.json"

    def _signature(self, stage: str, inputs: dict[str, str]) -> dict:
        return {
            "stage": stage,
            "seed": self.cfg.seed,
            "versions": {"panosplat": __version__},
            "config": self.cfg.data.get(stage, {}),
            "schedule": self.cfg.data["schedule"] if stage in ("slide", "init", "train", "render") else {},
            "inputs": inputs,
        }

    def up_to_date(self, stage: str, inputs: dict[str, str]) -> bool:
        if self.force:
            return False
        path = self._manifest_path(stage)
        if not path.exists():
            return False
        try:
            manifest = json.loads(path.read_text())
        except json.JSONDecodeError:
            return False
        sig = self._signature(stage, inputs)
        if any(manifest.get(k) != sig[k] for k in sig):
            return False
        for rel, digest in manifest.get("outputs", {}).items():
            p = self.out / rel
            if not p.exists() or _sha256(p) != digest:
                return False
        return True

    def write_manifest(self, stage: str, inputs: dict[str, str], outputs: list[Path]) -> None:
        manifest = self._signature(stage, inputs)
        manifest["outputs"] = {
            str(p.relative_to(self.out)): _sha256(p) for p in sorted(outputs)
        }
        self.manifest_dir.mkdir(parents=True, exist_ok=True)
        self._manifest_path(stage).write_text(json.dumps(manifest, indent=2, sort_keys=True))

    # ---- artifact discovery ---------------------------------------------

    def panorama_path(self) -> Path:
        configured = self.cfg.data["paths"]["panorama"]
        if configured and Path(configured).exists():
            return Path(configured)
        refined = self.out / "refine" / "panorama.png"
        if refined.exists():
            return refined
        raise DependencyError("panorama", "refine")

    def views_dir(self) -> Path:
        configured = self.cfg.data["paths"]["views_dir"]
        if configured and Path(configured).exists():
            return Path(configured)
        slid = self.out / "views"
        if (slid / "cameras.json").exists():
            return slid
        raise DependencyError("views", "slide")

    def load_views(self, with_depth: bool) -> list[PerspectiveView]:
        vdir = self.views_dir()
        meta = json.loads((vdir / "cameras.json").read_text())
        intr = CameraIntrinsics(
            fov_deg=meta["fov_deg"], width=meta["width"], height=meta["height"]
        )
        depth_dir = self.cfg.data["paths"]["depth_dir"]
        views = []
        for rec in meta["views"]:
            img_path = vdir / rec["image"]
            if not img_path.exists():
                raise DependencyError(f"views/{rec['image']}", "slide")
            pose = CameraPose(
                rotation=np.array(rec["rotation"]), translation=np.array(rec["translation"])
            )
            depth = None
            if with_depth:
                candidates = [Path(img_path).with_suffix(".pfm")]
                if depth_dir:
                    candidates.insert(0, Path(depth_dir) / (Path(rec["image"]).stem + ".pfm"))
                for c in candidates:
                    if c.exists():
                        depth = read_pfm(c)
                        break
                if depth is None:
                    raise DependencyError(
                        f"depth map for {rec['image']} (searched {[str(c) for c in candidates]})",
                        "external depth estimation",
                    )
            views.append(
                PerspectiveView(
                    image=read_png(img_path),
                    intrinsics=intr,
                    pose=pose,
                    depth=depth,
                    index=int(rec["index"]),
                )
            )
        return views

    # ---- stages ----------------------------------------------------------

    def run_refine(self) -> None:
        stage = "refine"
        inputs: dict[str, str] = {}
        if self.up_to_date(stage, inputs):
            print(f"[{stage}] up to date, skipping")
            return
        rcfg = self.cfg.data["refine"]
        generator_hook = self.cfg.image_hook("generator")
        if generator_hook is None:
            raise UserError("refine stage requires a generator hook (hooks.generator)")
        if generator_hook == "builtin":
            generator = _builtin_generator(self.cfg)
        else:
            def generator(prompt, previous, _hook=generator_hook):
                blank = (
                    previous
                    if previous is not None
                    else np.zeros((self.cfg.intrinsics().height, 2 * self.cfg.intrinsics().height, 3))
                )
                return _hook(blank, prompt)

        superres = None
        sr_hook = self.cfg.image_hook("superres")
        if rcfg.get("superres"):
            if sr_hook in (None, "builtin"):
                superres = lambda img: bicubic_upscale(img, 2)  # noqa: E731
            else:
                superres = lambda img, _h=sr_hook: _h(img, "superres")  # noqa: E731

        session = self.out / "refine"
        best, history = run_refinement(
            initial_prompt=rcfg["initial_prompt"],
            generator=generator,
            critic=self.cfg.critic_hook(),
            max_rounds=int(rcfg["max_rounds"]),
            session_dir=session,
            superres=superres,
        )
        best_img = read_png(best.panorama_path)
        write_png(session / "panorama.png", best_img, bit_depth=8)
        outputs = sorted(session.glob("*.png")) + [session / "session.json"]
        self.write_manifest(stage, inputs, outputs)
        print(f"[{stage}] best round {best.round} of {len(history)}")

    def run_slide(self) -> None:
        stage = "slide"
        pano_path = self.panorama_path()
        inputs = {str(pano_path): _sha256(pano_path)}
        if self.up_to_date(stage, inputs):
            print(f"[{stage}] up to date, skipping")
            return
        pano = EquirectImage(pixels=read_png(pano_path))
        intr = self.cfg.intrinsics()
        vdir = self.out / "views"
        vdir.mkdir(parents=True, exist_ok=True)
        records = []
        outputs = []
        for rot, _ in sliding_schedule(intr):
            view = equirect_to_perspective(pano, rot, intr)
            name = f"view_{rot.index:03d}.png"
            write_png(vdir / name, view.image, bit_depth=8)
            outputs.append(vdir / name)
            records.append(
                {
                    "index": rot.index,
                    "image": name,
                    "yaw_deg": rot.index * 12.0,
                    "rotation": [float(v) for v in view.pose.rotation],
                    "translation": [float(v) for v in view.pose.translation],
                }
            )
        cameras = vdir / "cameras.json"
        cameras.write_text(
            json.dumps(
                {
                    "fov_deg": intr.fov_deg,
                    "width": intr.width,
                    "height": intr.height,
                    "views": records,
                },
                indent=2,
                sort_keys=True,
            )
        )
        outputs.append(cameras)
        self.write_manifest(stage, inputs, outputs)
        print(f"[{stage}] wrote {len(records)} views to {vdir}")

    def run_init(self) -> None:
        stage = "init"
        views = self.load_views(with_depth=True)
        vdir = self.views_dir()
        inputs = {str(vdir / "cameras.json"): _sha256(vdir / "cameras.json")}
        if self.up_to_date(stage, inputs):
            print(f"[{stage}] up to date, skipping")
            return
        icfg = self.cfg.data["init"]
        maps = [backproject(v) for v in views]
        voxel = icfg.get("voxel")
        if voxel is None:
            pts = np.concatenate([m.points[m.valid] for m in maps], axis=0)
            diag = float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))
            voxel = max(diag / 512.0, 1e-9)
        cloud = merge_clouds(maps, voxel=float(voxel))
        idir = self.out / "init"
        cloud.save_ply(idir / "pointcloud.ply")
        (idir / "init.json").write_text(
            json.dumps({"voxel": float(voxel), "points": int(cloud.positions.shape[0])}, sort_keys=True)
        )
        self.write_manifest(stage, inputs, [idir / "pointcloud.ply", idir / "init.json"])
        print(f"[{stage}] {cloud.positions.shape[0]} points (voxel {voxel:.5g})")

    def run_train(self) -> None:
        stage = "train"
        cloud_path = self.out / "init" / "pointcloud.ply"
        if not cloud_path.exists():
            raise DependencyError("init/pointcloud.ply", "init")
        views = self.load_views(with_depth=True)
        inputs = {str(cloud_path): _sha256(cloud_path)}
        if self.up_to_date(stage, inputs):
            print(f"[{stage}] up to date, skipping")
            return
        cloud = PointCloud.load_ply(cloud_path)
        intr = views[0].intrinsics
        scene = scene_from_point_cloud(
            cloud.positions,
            cloud.colors,
            poses=[v.pose for v in views],
            focal=intr.focal,
        )
        tcfg = self.cfg.train_config()
        tdir = self.out / "train"
        tdir.mkdir(parents=True, exist_ok=True)
        trained, trace = train(scene, views, tcfg, checkpoint_dir=tdir)
        trained.save_ply(tdir / "scene.ply")
        trained.save_poses(tdir / "poses.json")
        trace.save_jsonl(tdir / "trace.jsonl")
        outputs = [tdir / "scene.ply", tdir / "poses.json", tdir / "trace.jsonl"]
        outputs += sorted(tdir.glob("scene_*.ply")) + sorted(tdir.glob("poses_*.json"))
        self.write_manifest(stage, inputs, outputs)
        print(
            f"[{stage}] {tcfg.iterations} iterations, "
            f"final l_rgb {trace.losses[-1].l_rgb:.5f} ({trace.wall_time:.1f}s)"
        )

    def run_render(self) -> None:
        stage = "render"
        scene_path = self.out / "train" / "scene.ply"
        poses_path = self.out / "train" / "poses.json"
        if not scene_path.exists() or not poses_path.exists():
            raise DependencyError("train/scene.ply", "train")
        inputs = {str(scene_path): _sha256(scene_path), str(poses_path): _sha256(poses_path)}
        if self.up_to_date(stage, inputs):
            print(f"[{stage}] up to date, skipping")
            return
        poses = SceneModel.load_poses(poses_path)
        scene = SceneModel.load_ply(scene_path, poses=poses)
        intr = self.cfg.intrinsics()
        try:
            meta = json.loads((self.views_dir() / "cameras.json").read_text())
            intr = CameraIntrinsics(
                fov_deg=meta["fov_deg"], width=meta["width"], height=meta["height"]
            )
        except DependencyError:
            pass
        rdir = self.out / "render"
        outputs = []
        for k, pose in enumerate(poses):
            out = render(scene, pose, intr)
            write_png(rdir / f"render_{k:03d}.png", np.clip(out.rgb, 0, 1), bit_depth=8)
            write_pfm(rdir / f"depth_{k:03d}.pfm", out.depth)
            write_pfm(rdir / f"alpha_{k:03d}.pfm", out.alpha)
            outputs += [
                rdir / f"render_{k:03d}.png",
                rdir / f"depth_{k:03d}.pfm",
                rdir / f"alpha_{k:03d}.pfm",
            ]
        self.write_manifest(stage, inputs, outputs)
        print(f"[{stage}] rendered {len(poses)} poses to {rdir}")

    def run_metrics(self) -> None:
        stage = "metrics"
        rdir = self.out / "render"
        renders = sorted(rdir.glob("render_*.png"))
        if not renders:
            raise DependencyError("render/render_*.png", "render")
        views = self.load_views(with_depth=False)
        inputs = {str(p): _sha256(p) for p in renders}
        if self.up_to_date(stage, inputs):
            print(f"[{stage}] up to date, skipping")
            return
        emb_dir = self.cfg.data["paths"]["embeddings_dir"]
        embedder = self.cfg.image_hook("embedder")
        per_view = []
        for k, path in enumerate(renders):
            if k >= len(views):
                break
            rendered = read_png(path)
            m = image_metrics(rendered, views[k].image)
            sem = _semantic_distance(rendered, views[k], emb_dir, embedder)
            if sem is not None:
                m["l_sem"] = sem
            per_view.append({"view": k, **m})
        summary = {
            "per_view": per_view,
            "mean_psnr": float(np.mean([m["psnr"] for m in per_view])),
            "mean_ssim": float(np.mean([m["ssim"] for m in per_view])),
        }
        mdir = self.out / "metrics"
        mdir.mkdir(parents=True, exist_ok=True)
        (mdir / "metrics.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
        self.write_manifest(stage, inputs, [mdir / "metrics.json"])
        print(
            f"[{stage}] mean psnr {summary['mean_psnr']:.2f} dB, "
            f"mean ssim {summary['mean_ssim']:.4f}"
        )


def _semantic_distance(rendered, view, emb_dir, embedder):
    """Cosine distance between render and target embeddings when both sides
    can come from the same provider; None otherwise."""
    target = None
    if emb_dir:
        cand = Path(emb_dir) / f"view_{view.index:03d}.emb"
        if cand.exists():
            vec, src = read_embedding(cand)
            target = Embedding(vector=vec, source_id=src)
    if target is not None and embedder is not None and embedder != "builtin":
        import tempfile

        with tempfile.TemporaryDirectory(prefix="panosplat-emb-") as tmp:
            inp = Path(tmp) / "render.png"
            outp = Path(tmp) / "render.emb"
            write_png(inp, rendered, bit_depth=8)
            # reuse the image-hook transport: command INPUT SOURCE_ID OUTPUT
            import subprocess

            proc = subprocess.run(
                [*embedder.command, str(inp), f"render_{view.index:03d}", str(outp)],
                capture_output=True,
            )
            if proc.returncode != 0 or not outp.exists():
                raise HookError("embedder hook failed", endpoint=" ".join(embedder.command))
            vec, src = read_embedding(outp)
            return l_sem(Embedding(vector=vec, source_id=src), target)
    if target is None:
        return l_sem(grid_embedding(rendered), grid_embedding(view.image))
    return None


def _builtin_generator(cfg: PipelineConfig):
    """Deterministic procedural panorama keyed on the prompt; offline stand-in."""

    def generate(prompt: str, previous):
        h = cfg.intrinsics().height
        seed = int.from_bytes(hashlib.sha256(prompt.encode()).digest()[:4], "little")
        rng = np.random.default_rng(seed)
        w = 2 * h
        x = (np.arange(w) + 0.5) / w * 2 * np.pi
        y = (np.arange(h) + 0.5) / h * np.pi
        lon, lat = np.meshgrid(x, y)
        img = np.zeros((h, w, 3))
        for c in range(3):
            a, b, ph = rng.uniform(1, 4), rng.uniform(1, 3), rng.uniform(0, 2 * np.pi)
            img[:, :, c] = 0.5 + 0.35 * np.sin(a * lon + ph) * np.sin(b * lat)
        return np.clip(img, 0.0, 1.0)

    return generate


def run_pipeline(cfg: PipelineConfig, stages: list[str], force: bool = False) -> None:
    """Run the requested stages in pipeline order."""
    unknown = [s for s in stages if s not in ALL_STAGES]
    if unknown:
        raise UserError(f"unknown stages: {unknown}; valid: {ALL_STAGES}")
    runner = StageRunner(cfg, force=force)
    for stage in ALL_STAGES:
        if stage in stages:
            getattr(runner, f"run_{stage}")()


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="panosplat",
        description="panorama sliding + Gaussian splat reconstruction pipeline",
    )
    parser.add_argument("command", choices=ALL_STAGES + ["all"])
    parser.add_argument("--config", type=str, default=None, help="JSON config path")
    parser.add_argument(
        "--stages", type=str, default=None, help="comma-separated stage subset (with 'all')"
    )
    parser.add_argument("--force", action="store_true", help="ignore up-to-date manifests")
    parser.add_argument("--seed", type=int, default=None, help="override config seed")
    parser.add_argument("--out", type=str, default=None, help="override output directory")
    parser.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config key, e.g. --set train.iterations=100",
    )
    args = parser.parse_args(argv)

    try:
        cfg = (
            PipelineConfig.from_file(args.config)
            if args.config
            else PipelineConfig({})
        )
        for kv in args.set:
            if "=" not in kv:
                raise UserError(f"--set expects KEY=VALUE, got {kv!r}")
            key, value = kv.split("=", 1)
            cfg.override(key, value)
        if args.seed is not None:
            cfg.data["seed"] = args.seed
        if args.out is not None:
            cfg.data["paths"]["output_dir"] = args.out

        if args.command == "all":
            stages = args.stages.split(",") if args.stages else list(ALL_STAGES)
            stages = [s for s in (x.strip() for x in stages) if s]
        else:
            stages = [args.command]
        run_pipeline(cfg, stages, force=args.force)
        return 0
    except UserError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except HookError as e:
        where = f" ({e.endpoint})" if e.endpoint else ""
        print(f"hook failure: {e}{where}", file=sys.stderr)
        return 2
    except Exception as e:  # pragma: no cover - defensive
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
