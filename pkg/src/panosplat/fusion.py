"""Multi-view weighted fusion onto a shared canvas, and stitch-window cropping.

Each contribution carries a per-pixel weight map and a per-pixel mapping onto
canvas coordinates; a fused canvas pixel is the weight-normalized mean of all
values mapped onto it. Default weights are 1 everywhere.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .hooks import HookError


class CoverageError(ValueError):
    """Some canvas pixels received no contribution; `pixels` lists (row, col)."""

    def __init__(self, pixels: np.ndarray):
        self.pixels = np.asarray(pixels)
        shown = ", ".join(f"({r}, {c})" for r, c in self.pixels[:8])
        more = "" if len(self.pixels) <= 8 else f" and {len(self.pixels) - 8} more"
        super().__init__(f"{len(self.pixels)} canvas pixels uncovered: {shown}{more}")


@dataclass
class ViewContribution:
    """One view's output warped onto the canvas.

    image: (H, W) or (H, W, C) values; weight: (H, W) nonnegative;
    mapping: (H, W, 2) integer canvas (row, col) per view pixel.
    """

    image: np.ndarray
    weight: np.ndarray
    mapping: np.ndarray

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float64)
        wgt = np.asarray(self.weight, dtype=np.float64)
        mp = np.asarray(self.mapping)
        if wgt.shape != img.shape[:2]:
            raise ValueError(f"weight shape {wgt.shape} does not match image {img.shape[:2]}")
        if np.any(wgt < 0.0):
            raise ValueError("weights must be nonnegative")
        if mp.shape != img.shape[:2] + (2,):
            raise ValueError(f"mapping shape {mp.shape} must be image shape + (2,)")
        self.image = img
        self.weight = wgt
        self.mapping = mp.astype(np.int64)

    def check_inside(self, canvas_shape) -> None:
        rows = self.mapping[..., 0]
        cols = self.mapping[..., 1]
        if rows.min() < 0 or rows.max() >= canvas_shape[0] or cols.min() < 0 or cols.max() >= canvas_shape[1]:
            raise ValueError("mapping targets fall outside the canvas")


def fuse_views(
    contribs: Sequence[ViewContribution], canvas_shape: tuple
) -> np.ndarray:
    """Fuse contributions: each canvas pixel is sum(w_i v_i) / sum(w_i).

    Raises CoverageError when any canvas pixel gets zero total weight.
    """
    if not contribs:
        raise ValueError("at least one contribution is required")
    h, w = canvas_shape[0], canvas_shape[1]
    channels = contribs[0].image.shape[2:] or ()
    acc = np.zeros((h, w) + channels)
    wsum = np.zeros((h, w))
    for c in contribs:
        if (c.image.shape[2:] or ()) != channels:
            raise ValueError("contributions disagree on channel count")
        c.check_inside((h, w))
        rows = c.mapping[..., 0].ravel()
        cols = c.mapping[..., 1].ravel()
        wv = c.weight.ravel()
        np.add.at(wsum, (rows, cols), wv)
        if channels:
            np.add.at(acc, (rows, cols), c.image.reshape(-1, *channels) * wv[:, None])
        else:
            np.add.at(acc, (rows, cols), c.image.ravel() * wv)
    uncovered = np.argwhere(wsum <= 0.0)
    if len(uncovered):
        raise CoverageError(uncovered)
    return acc / (wsum[..., None] if channels else wsum)


def extract_stitch_center(stitched: np.ndarray) -> np.ndarray:
    """Centered window of width 2H from a stitched strip of height H.

    The input must be strictly wider than 2H with at least one column of
    margin on each side (width >= 2H + 2); the left offset is (W - 2H) // 2.
    """
    img = np.asarray(stitched)
    h, w = img.shape[0], img.shape[1]
    if w < 2 * h + 2:
        raise ValueError(
            f"stitched width {w} must be at least 2*height + 2 = {2 * h + 2} "
            "to leave a seam margin"
        )
    left = (w - 2 * h) // 2
    return img[:, left : left + 2 * h].copy()


@dataclass(frozen=True)
class CanvasWindow:
    """A rectangular view footprint on the canvas; columns wrap when `wrap`."""

    top: int
    left: int
    height: int
    width: int
    wrap: bool = True

    def mapping(self, canvas_shape) -> np.ndarray:
        rows = self.top + np.arange(self.height)
        cols = self.left + np.arange(self.width)
        if self.wrap:
            cols = cols % canvas_shape[1]
        grid = np.empty((self.height, self.width, 2), dtype=np.int64)
        grid[..., 0] = rows[:, None]
        grid[..., 1] = cols[None, :]
        return grid

    def extract(self, canvas: np.ndarray) -> np.ndarray:
        m = self.mapping(canvas.shape[:2])
        return canvas[m[..., 0], m[..., 1]]


def sliding_windows(
    canvas_shape, window_width: int, step: int, wrap: bool = True
) -> list[CanvasWindow]:
    """Full-height windows marching across the canvas at a fixed column step."""
    h, w = canvas_shape[0], canvas_shape[1]
    lefts = range(0, w if wrap else max(w - window_width + 1, 1), step)
    return [CanvasWindow(0, left, h, window_width, wrap=wrap) for left in lefts]


def run_denoise_round(
    canvas: np.ndarray,
    prompts: Sequence[str],
    denoiser: Callable[[np.ndarray, str], np.ndarray],
    schedule: Sequence[CanvasWindow],
    weights: Optional[Sequence[np.ndarray]] = None,
    max_workers: int = 1,
) -> np.ndarray:
    """One fuse round: extract every window, run the denoiser hook on it,
    fuse the outputs back onto a fresh canvas.

    Deterministic for a deterministic hook regardless of max_workers. A hook
    failure raises HookError carrying the view index; the input canvas is
    never modified.
    """
    if not schedule:
        raise ValueError("schedule must contain at least one window")
    canvas = np.asarray(canvas, dtype=np.float64)
    if len(prompts) == 1 and len(schedule) > 1:
        prompts = list(prompts) * len(schedule)
    if len(prompts) != len(schedule):
        raise ValueError(f"{len(prompts)} prompts for {len(schedule)} windows")

    def run_one(i: int) -> np.ndarray:
        try:
            out = denoiser(schedule[i].extract(canvas), prompts[i])
        except HookError as e:
            e.view_index = i
            raise
        except Exception as e:
            raise HookError(f"denoiser hook failed on view {i}: {e}", view_index=i) from e
        out = np.asarray(out, dtype=np.float64)
        want = (schedule[i].height, schedule[i].width)
        if out.shape[:2] != want:
            raise HookError(
                f"denoiser hook returned shape {out.shape[:2]} for view {i}, expected {want}",
                view_index=i,
            )
        return out

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as ex:
            outputs = list(ex.map(run_one, range(len(schedule))))
    else:
        outputs = [run_one(i) for i in range(len(schedule))]

    contribs = []
    for i, win in enumerate(schedule):
        wgt = (
            np.ones((win.height, win.width))
            if weights is None
            else np.asarray(weights[i], dtype=np.float64)
        )
        contribs.append(
            ViewContribution(image=outputs[i], weight=wgt, mapping=win.mapping(canvas.shape[:2]))
        )
    return fuse_views(contribs, canvas.shape)
