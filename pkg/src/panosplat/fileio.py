"""Readers and writers for the on-disk formats: PNG, PFM, PLY, embeddings.

PFM files are little-endian float32 with the standard header (Pf/PF, WIDTH
HEIGHT, negative scale line) and bottom-to-top row order. Embedding files are
raw little-endian float32 vectors with a JSON sidecar {dim, source_id}.
"""

from __future__ import annotations

import json
from pathlib import Path

import cv2
import numpy as np


def read_png(path) -> np.ndarray:
    """Read an 8- or 16-bit PNG as float64 RGB in [0, 1], shape (H, W, 3)."""
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise IOError(f"cannot read image: {path}")
    if raw.ndim == 2:
        raw = raw[:, :, None].repeat(3, axis=2)
    if raw.shape[2] == 4:
        raw = raw[:, :, :3]
    raw = raw[:, :, ::-1]  # BGR -> RGB
    if raw.dtype == np.uint8:
        return raw.astype(np.float64) / 255.0
    if raw.dtype == np.uint16:
        return raw.astype(np.float64) / 65535.0
    raise IOError(f"unsupported PNG sample type {raw.dtype}: {path}")


def write_png(path, image: np.ndarray, bit_depth: int = 8) -> None:
    """Write float RGB in [0, 1] as an 8- or 16-bit PNG."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None].repeat(3, axis=2)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {img.shape}")
    img = np.clip(img, 0.0, 1.0)
    if bit_depth == 8:
        data = np.rint(img * 255.0).astype(np.uint8)
    elif bit_depth == 16:
        data = np.rint(img * 65535.0).astype(np.uint16)
    else:
        raise ValueError(f"bit_depth must be 8 or 16, got {bit_depth}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), data[:, :, ::-1]):
        raise IOError(f"cannot write image: {path}")


def read_pfm(path) -> np.ndarray:
    """Read a PFM file as float64, shape (H, W) or (H, W, 3)."""
    with open(path, "rb") as f:
        tag = f.readline().decode("ascii").strip()
        if tag not in ("Pf", "PF"):
            raise IOError(f"not a PFM file (tag {tag!r}): {path}")
        dims = f.readline().decode("ascii").split()
        width, height = int(dims[0]), int(dims[1])
        scale = float(f.readline().decode("ascii").strip())
        channels = 3 if tag == "PF" else 1
        count = width * height * channels
        buf = f.read(count * 4)
        if len(buf) != count * 4:
            raise IOError(f"truncated PFM payload: {path}")
    endian = "<" if scale < 0 else ">"
    data = np.frombuffer(buf, dtype=endian + "f4").astype(np.float64)
    data = data.reshape(height, width, channels)
    data = np.flipud(data)  # PFM stores rows bottom-to-top
    return data[:, :, 0] if channels == 1 else data


def write_pfm(path, data: np.ndarray) -> None:
    """Write a (H, W) or (H, W, 3) float array as a little-endian PFM."""
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim == 2:
        tag, channels = b"Pf", 1
    elif arr.ndim == 3 and arr.shape[2] == 3:
        tag, channels = b"PF", 3
    else:
        raise ValueError(f"expected (H, W) or (H, W, 3) array, got {arr.shape}")
    h, w = arr.shape[:2]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(tag + b"\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(np.flipud(arr).astype("<f4").tobytes())


def write_embedding(path, vector: np.ndarray, source_id: str) -> None:
    """Write a float32 embedding plus its JSON sidecar (same stem, .json)."""
    vec = np.asarray(vector, dtype="<f4").ravel()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(vec.tobytes())
    sidecar = {"dim": int(vec.size), "source_id": source_id}
    path.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True))


def read_embedding(path) -> tuple[np.ndarray, str]:
    """Read an embedding file and its sidecar; returns (vector, source_id)."""
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    vec = np.frombuffer(path.read_bytes(), dtype="<f4").astype(np.float64)
    if vec.size != int(meta["dim"]):
        raise IOError(
            f"embedding length {vec.size} does not match sidecar dim {meta['dim']}: {path}"
        )
    return vec, str(meta["source_id"])


def write_ply(path, vertex_props: dict[str, np.ndarray]) -> None:
    """Write a binary little-endian PLY with one float32 property per key."""
    names = list(vertex_props)
    cols = [np.asarray(vertex_props[n], dtype="<f4").ravel() for n in names]
    n = cols[0].size
    if any(c.size != n for c in cols):
        raise ValueError("all vertex properties must have the same length")
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {name}" for name in names]
    header += ["end_header"]
    body = np.stack(cols, axis=1).astype("<f4").tobytes()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(body)


def read_ply(path) -> dict[str, np.ndarray]:
    """Read a binary little-endian PLY of float32 vertex properties."""
    with open(path, "rb") as f:
        if f.readline().strip() != b"ply":
            raise IOError(f"not a PLY file: {path}")
        fmt = f.readline().strip()
        if fmt != b"format binary_little_endian 1.0":
            raise IOError(f"unsupported PLY format {fmt!r}: {path}")
        names: list[str] = []
        count = 0
        while True:
            line = f.readline()
            if not line:
                raise IOError(f"unterminated PLY header: {path}")
            line = line.strip()
            if line == b"end_header":
                break
            parts = line.decode("ascii").split()
            if parts[0] == "element":
                if parts[1] != "vertex":
                    raise IOError(f"unsupported PLY element {parts[1]}: {path}")
                count = int(parts[2])
            elif parts[0] == "property":
                if parts[1] != "float":
                    raise IOError(f"unsupported PLY property type {parts[1]}: {path}")
                names.append(parts[2])
        raw = f.read(count * len(names) * 4)
    if len(raw) != count * len(names) * 4:
        raise IOError(f"truncated PLY payload: {path}")
    table = np.frombuffer(raw, dtype="<f4").reshape(count, len(names)).astype(np.float64)
    return {name: table[:, k].copy() for k, name in enumerate(names)}
