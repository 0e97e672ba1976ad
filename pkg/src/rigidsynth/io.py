"""File formats: PNG images and label masks, DPF1 depth, FLO1 flow, JSON.

Binary formats share one layout: a 4-byte ASCII magic, width and height as
little-endian int32, then row-major little-endian float32 payload.
"""
from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any, Union

import numpy as np
from PIL import Image

from rigidsynth.camgeo import InvalidInputError

PathLike = Union[str, os.PathLike]

DEPTH_MAGIC = b"DPF1"
FLOW_MAGIC = b"FLO1"
_HEADER = np.dtype([("magic", "S4"), ("width", "<i4"), ("height", "<i4")])


class FileFormatError(InvalidInputError):
    """A file could not be read or does not match its declared format."""

    def __init__(self, path: PathLike, message: str):
        super().__init__(f"{path}: {message}")
        self.path = str(path)


# ---------------------------------------------------------------------------
# binary rasters


def _write_raster(path: PathLike, magic: bytes, data: np.ndarray, channels: int) -> None:
    h, w = data.shape[:2]
    header = np.array([(magic, w, h)], dtype=_HEADER)
    payload = np.ascontiguousarray(data, dtype="<f4")
    if payload.size != h * w * channels:
        raise InvalidInputError(f"raster payload has {payload.size} values, expected {h * w * channels}")
    with open(path, "wb") as f:
        f.write(header.tobytes())
        f.write(payload.tobytes())


def _read_raster(path: PathLike, magic: bytes, channels: int) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise FileFormatError(path, exc.strerror or str(exc)) from exc
    if len(raw) < _HEADER.itemsize:
        raise FileFormatError(path, "truncated header")
    head = np.frombuffer(raw[: _HEADER.itemsize], dtype=_HEADER)[0]
    if head["magic"] != magic:
        raise FileFormatError(path, f"bad magic {bytes(head['magic'])!r}, expected {magic!r}")
    w, h = int(head["width"]), int(head["height"])
    if w < 0 or h < 0:
        raise FileFormatError(path, f"negative raster size {w}x{h}")
    n = w * h * channels
    body = raw[_HEADER.itemsize :]
    if len(body) != 4 * n:
        raise FileFormatError(path, f"payload is {len(body)} bytes, expected {4 * n} for {w}x{h}")
    data = np.frombuffer(body, dtype="<f4").astype(np.float32)
    return data.reshape((h, w, channels) if channels > 1 else (h, w))


def write_depth(path: PathLike, depth: np.ndarray) -> None:
    """Write a DPF1 depth file; values must be finite and > 0, or exactly 0 (missing)."""
    d = np.asarray(depth)
    if d.ndim != 2:
        raise InvalidInputError(f"depth must be 2-D, got shape {d.shape}")
    d32 = d.astype(np.float32)
    if not np.isfinite(d32).all() or (d32 < 0).any():
        raise InvalidInputError("depth values must be finite and non-negative")
    _write_raster(path, DEPTH_MAGIC, d32, 1)


def read_depth(path: PathLike) -> np.ndarray:
    d = _read_raster(path, DEPTH_MAGIC, 1)
    if not np.isfinite(d).all() or (d < 0).any():
        raise FileFormatError(path, "depth values must be finite and non-negative")
    return d


def write_flow(path: PathLike, flow: np.ndarray) -> None:
    f = np.asarray(flow)
    if f.ndim != 3 or f.shape[2] != 2:
        raise InvalidInputError(f"flow must be (H, W, 2), got shape {f.shape}")
    f32 = f.astype(np.float32)
    if not np.isfinite(f32).all():
        raise InvalidInputError("flow values must be finite")
    _write_raster(path, FLOW_MAGIC, f32, 2)


def read_flow(path: PathLike) -> np.ndarray:
    f = _read_raster(path, FLOW_MAGIC, 2)
    if not np.isfinite(f).all():
        raise FileFormatError(path, "flow values must be finite")
    return f


# ---------------------------------------------------------------------------
# PNG


def to_uint8(image: np.ndarray) -> np.ndarray:
    """Scale [0, 1] intensities by 255 and round to nearest."""
    return np.rint(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(path: PathLike, image: np.ndarray) -> None:
    a = to_uint8(image)
    if a.ndim not in (2, 3) or (a.ndim == 3 and a.shape[2] not in (1, 3)):
        raise InvalidInputError(f"image must be (H, W) or (H, W, 3), got shape {a.shape}")
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[..., 0]
    Image.fromarray(a).save(path, format="PNG")


def _open_png(path: PathLike) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
    except (OSError, SyntaxError) as exc:
        raise FileFormatError(path, f"not a readable PNG ({exc})") from exc
    return img


def read_image(path: PathLike) -> np.ndarray:
    """Read an 8-bit PNG as float64 in [0, 1]; colour images come back as (H, W, 3)."""
    img = _open_png(path)
    if img.mode not in ("L", "RGB"):
        img = img.convert("RGB")
    return np.asarray(img, dtype=np.float64) / 255.0


def write_labels(path: PathLike, labels: np.ndarray) -> None:
    """8-bit single-channel PNG, pixel value = instance id (0 = background)."""
    L = np.asarray(labels)
    if L.ndim != 2:
        raise InvalidInputError(f"label raster must be 2-D, got shape {L.shape}")
    if L.size and (L.min() < 0 or L.max() > 255):
        raise InvalidInputError("instance ids must fit in 8 bits")
    Image.fromarray(L.astype(np.uint8), mode="L").save(path, format="PNG")


def read_labels(path: PathLike) -> np.ndarray:
    img = _open_png(path)
    if img.mode != "L":
        raise FileFormatError(path, f"mask PNG must be 8-bit single-channel, got mode {img.mode}")
    return np.asarray(img, dtype=np.uint8).copy()


# ---------------------------------------------------------------------------
# JSON


def read_json(path: PathLike) -> Any:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except OSError as exc:
        raise FileFormatError(path, exc.strerror or str(exc)) from exc
    except json.JSONDecodeError as exc:
        raise FileFormatError(path, f"invalid JSON ({exc})") from exc


def write_json(path: PathLike, obj: Any) -> None:
    """Deterministic JSON: sorted keys, fixed indentation, trailing newline."""
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True, allow_nan=False)
        f.write("\n")
