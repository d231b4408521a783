"""External model hooks: subprocess and HTTP adapters plus offline mocks.

Image hook protocol (denoiser, generator, super-resolution):
  subprocess:  <command...> INPUT_PNG PROMPT OUTPUT_PNG   (exit 0 = success)
  HTTP:        POST multipart {image: png, prompt: text} -> png bytes

Critic hook protocol:
  subprocess:  <command...> INPUT_PNG PROMPT OUTPUT_JSON  (exit 0 = success)
  HTTP:        POST multipart {image: png, prompt: text}
               -> JSON body {"score": float, "prompt": str, "feedback": str}

In-process callables with the same signatures work everywhere a hook is
accepted; the identity/blur/bicubic mocks below keep the pipeline runnable
offline.
"""

from __future__ import annotations

import json
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import cv2
import numpy as np
from scipy.ndimage import gaussian_filter

from .fileio import read_png, write_png


class HookError(RuntimeError):
    """An external hook failed; carries the endpoint and view index if known."""

    def __init__(self, message: str, endpoint: str = "", view_index: Optional[int] = None):
        super().__init__(message)
        self.endpoint = endpoint
        self.view_index = view_index


@dataclass(frozen=True)
class CriticResult:
    score: float
    prompt: str
    feedback: str = ""


def _parse_critic_json(raw: str, endpoint: str) -> CriticResult:
    try:
        body = json.loads(raw)
        return CriticResult(
            score=float(body["score"]),
            prompt=str(body["prompt"]),
            feedback=str(body.get("feedback", "")),
        )
    except (ValueError, KeyError, TypeError) as e:
        raise HookError(f"critic returned malformed JSON: {e}", endpoint=endpoint) from e


class SubprocessImageHook:
    """Image -> image hook run as `command INPUT_PNG PROMPT OUTPUT_PNG`."""

    def __init__(self, command: list[str], timeout: float = 600.0):
        self.command = list(command)
        self.timeout = timeout

    def __call__(self, image: np.ndarray, prompt: str) -> np.ndarray:
        endpoint = " ".join(self.command)
        with tempfile.TemporaryDirectory(prefix="panosplat-hook-") as tmp:
            inp = Path(tmp) / "input.png"
            out = Path(tmp) / "output.png"
            write_png(inp, image, bit_depth=16)
            try:
                proc = subprocess.run(
                    [*self.command, str(inp), prompt, str(out)],
                    capture_output=True,
                    timeout=self.timeout,
                )
            except (OSError, subprocess.TimeoutExpired) as e:
                raise HookError(f"hook process failed to run: {e}", endpoint=endpoint) from e
            if proc.returncode != 0:
                tail = proc.stderr.decode(errors="replace")[-500:]
                raise HookError(
                    f"hook exited with status {proc.returncode}: {tail}", endpoint=endpoint
                )
            if not out.exists():
                raise HookError("hook wrote no output image", endpoint=endpoint)
            return read_png(out)


class HttpImageHook:
    """Image -> image hook POSTing multipart (image, prompt) to a URL."""

    def __init__(self, url: str, timeout: float = 600.0):
        self.url = url
        self.timeout = timeout

    def __call__(self, image: np.ndarray, prompt: str) -> np.ndarray:
        import requests

        ok, buf = cv2.imencode(".png", np.rint(np.clip(image, 0, 1) * 65535).astype(np.uint16)[:, :, ::-1])
        if not ok:
            raise HookError("cannot encode image for HTTP hook", endpoint=self.url)
        try:
            resp = requests.post(
                self.url,
                files={"image": ("image.png", buf.tobytes(), "image/png")},
                data={"prompt": prompt},
                timeout=self.timeout,
            )
        except requests.RequestException as e:
            raise HookError(f"hook endpoint unreachable: {e}", endpoint=self.url) from e
        if resp.status_code != 200:
            raise HookError(f"hook returned HTTP {resp.status_code}", endpoint=self.url)
        raw = cv2.imdecode(np.frombuffer(resp.content, np.uint8), cv2.IMREAD_UNCHANGED)
        if raw is None:
            raise HookError("hook returned undecodable image bytes", endpoint=self.url)
        if raw.ndim == 3:
            raw = raw[:, :, :3][:, :, ::-1]
        else:
            raw = raw[:, :, None].repeat(3, axis=2)
        scale = 65535.0 if raw.dtype == np.uint16 else 255.0
        return raw.astype(np.float64) / scale


class SubprocessCriticHook:
    """Critic hook run as `command INPUT_PNG PROMPT OUTPUT_JSON`."""

    def __init__(self, command: list[str], timeout: float = 600.0):
        self.command = list(command)
        self.timeout = timeout

    def __call__(self, image: np.ndarray, prompt: str) -> CriticResult:
        endpoint = " ".join(self.command)
        with tempfile.TemporaryDirectory(prefix="panosplat-critic-") as tmp:
            inp = Path(tmp) / "input.png"
            out = Path(tmp) / "output.json"
            write_png(inp, image, bit_depth=16)
            try:
                proc = subprocess.run(
                    [*self.command, str(inp), prompt, str(out)],
                    capture_output=True,
                    timeout=self.timeout,
                )
            except (OSError, subprocess.TimeoutExpired) as e:
                raise HookError(f"critic process failed to run: {e}", endpoint=endpoint) from e
            if proc.returncode != 0:
                tail = proc.stderr.decode(errors="replace")[-500:]
                raise HookError(
                    f"critic exited with status {proc.returncode}: {tail}", endpoint=endpoint
                )
            if not out.exists():
                raise HookError("critic wrote no output JSON", endpoint=endpoint)
            return _parse_critic_json(out.read_text(), endpoint)


class HttpCriticHook:
    """Critic hook POSTing multipart (image, prompt), expecting a JSON body."""

    def __init__(self, url: str, timeout: float = 600.0):
        self.url = url
        self.timeout = timeout

    def __call__(self, image: np.ndarray, prompt: str) -> CriticResult:
        import requests

        ok, buf = cv2.imencode(".png", np.rint(np.clip(image, 0, 1) * 255).astype(np.uint8)[:, :, ::-1])
        if not ok:
            raise HookError("cannot encode image for HTTP critic", endpoint=self.url)
        try:
            resp = requests.post(
                self.url,
                files={"image": ("image.png", buf.tobytes(), "image/png")},
                data={"prompt": prompt},
                timeout=self.timeout,
            )
        except requests.RequestException as e:
            raise HookError(f"critic endpoint unreachable: {e}", endpoint=self.url) from e
        if resp.status_code != 200:
            raise HookError(f"critic returned HTTP {resp.status_code}", endpoint=self.url)
        return _parse_critic_json(resp.text, self.url)


# ---- offline mocks ------------------------------------------------------


def identity_hook(image: np.ndarray, prompt: str = "") -> np.ndarray:
    return np.asarray(image, dtype=np.float64).copy()


def blur_hook(image: np.ndarray, prompt: str = "", sigma: float = 1.0) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        return gaussian_filter(img, sigma)
    return np.stack([gaussian_filter(img[:, :, c], sigma) for c in range(img.shape[2])], axis=2)


def bicubic_upscale(image: np.ndarray, factor: int = 2) -> np.ndarray:
    """Super-resolution stand-in: plain bicubic upsampling."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    up = cv2.resize(img, (w * factor, h * factor), interpolation=cv2.INTER_CUBIC)
    return np.clip(up, 0.0, 1.0)
