"""Binary image/flow containers and PNG helpers.

``.imgf32``: magic ``IF32``, u32 H, u32 W, u32 C, then little-endian f32
planes (C, H, W).
``.flo``: Middlebury layout - f32 202021.25 (bytes ``PIEH``), i32 W, i32 H,
interleaved f32 (u, v) rows.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

IMG_MAGIC = b"IF32"
FLO_MAGIC = b"PIEH"


class FormatError(ValueError):
    pass


def write_imgf32(path, planes: np.ndarray) -> None:
    """Write a (C, H, W) array."""
    a = np.asarray(planes, dtype="<f4")
    if a.ndim != 3:
        raise ValueError("imgf32 expects a (C, H, W) array")
    c, h, w = a.shape
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(IMG_MAGIC + struct.pack("<III", h, w, c) + a.tobytes())


def read_imgf32(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != IMG_MAGIC:
        raise FormatError(f"{path}: bad magic")
    if len(data) < 16:
        raise FormatError(f"{path}: truncated header")
    h, w, c = struct.unpack("<III", data[4:16])
    if len(data) != 16 + 4 * h * w * c:
        raise FormatError(f"{path}: expected {h}x{w}x{c} floats, file size {len(data)}")
    return np.frombuffer(data, dtype="<f4", offset=16).reshape(c, h, w).astype(np.float32)


def write_image(path, image: np.ndarray) -> None:
    """(H, W, 3) float image -> .imgf32."""
    write_imgf32(path, np.moveaxis(np.asarray(image), -1, 0))


def read_image(path) -> np.ndarray:
    """.imgf32 or any Pillow-decodable file -> (H, W, 3) float64 in [0, 1] (PNG) or raw (imgf32)."""
    path = Path(path)
    if path.suffix == ".imgf32":
        return np.moveaxis(read_imgf32(path), 0, -1).astype(np.float64)
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except OSError as exc:
        raise FormatError(f"{path}: cannot decode image ({exc})") from None


def write_png(path, image: np.ndarray) -> None:
    a = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(a * 255.0).astype(np.uint8)).save(path)


def write_flo(path, u: np.ndarray, v: np.ndarray) -> None:
    h, w = u.shape
    inter = np.stack([u, v], axis=-1).astype("<f4")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(FLO_MAGIC + struct.pack("<ii", w, h) + inter.tobytes())


def read_flo(path) -> tuple[np.ndarray, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != FLO_MAGIC:
        raise FormatError(f"{path}: bad .flo magic")
    w, h = struct.unpack("<ii", data[4:12])
    if w <= 0 or h <= 0 or len(data) != 12 + 8 * w * h:
        raise FormatError(f"{path}: inconsistent .flo size")
    a = np.frombuffer(data, dtype="<f4", offset=12).reshape(h, w, 2).astype(np.float64)
    return a[..., 0], a[..., 1]
