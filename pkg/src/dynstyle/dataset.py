"""Multi-view video datasets: in-memory container and a Neu3D-style directory loader."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera import Camera, read_camera_file
from .imageio import FormatError, read_image

IMAGE_SUFFIXES = (".imgf32", ".png", ".jpg", ".jpeg")


@dataclass
class MultiViewDataset:
    """Frames keyed by (camera index, time index); ``times`` are normalized to [0, 1]."""

    cameras: list
    times: np.ndarray
    frames: dict

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        if not self.frames:
            raise ValueError("dataset has no frames")
        for cam, ti in self.frames:
            if not (0 <= cam < len(self.cameras) and 0 <= ti < len(self.times)):
                raise ValueError(f"frame key {(cam, ti)} out of range")

    def keys(self) -> list:
        return sorted(self.frames)

    def items(self):
        """(camera index, time index, normalized time, image) in deterministic order."""
        for cam, ti in self.keys():
            yield cam, ti, float(self.times[ti]), self.frames[(cam, ti)]

    def __len__(self):
        return len(self.frames)

    @property
    def shape(self):
        return next(iter(self.frames.values())).shape


def normalized_times(n: int) -> np.ndarray:
    return np.zeros(1) if n == 1 else np.linspace(0.0, 1.0, n)


def _sort_key(name: str):
    return (0, int(name), "") if name.isdigit() else (1, 0, name)


def load_neu3d_style(directory, camera_file=None) -> MultiViewDataset:
    """Load ``<dir>/<camera>/<frame>.{png,imgf32}`` plus ``<dir>/cameras.txt``.

    Camera folders and frame files are taken in natural sort order; every
    camera must have the same frame count.
    """
    root = Path(directory)
    cam_path = Path(camera_file) if camera_file else root / "cameras.txt"
    if not cam_path.exists():
        raise FileNotFoundError(f"camera file {cam_path} not found")
    cameras: list[Camera] = read_camera_file(cam_path)
    cam_dirs = sorted((p for p in root.iterdir() if p.is_dir()), key=lambda p: _sort_key(p.name))
    if len(cam_dirs) != len(cameras):
        raise ValueError(f"{root}: {len(cam_dirs)} camera folders but {len(cameras)} cameras in {cam_path.name}")
    per_cam = []
    for d in cam_dirs:
        files = [p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES]
        # prefer the lossless container when both encodings are present
        by_stem: dict = {}
        for p in files:
            if p.stem not in by_stem or p.suffix == ".imgf32":
                by_stem[p.stem] = p
        per_cam.append([by_stem[s] for s in sorted(by_stem, key=_sort_key)])
    counts = [len(f) for f in per_cam]
    if max(counts) == 0:
        raise ValueError(f"{root}: no frames found")
    expected = max(counts)
    for d, c in zip(cam_dirs, counts):
        if c != expected:
            raise ValueError(f"camera '{d.name}' has {c} frames, expected {expected}")
    frames = {}
    for ci, files in enumerate(per_cam):
        cam = cameras[ci]
        for ti, p in enumerate(files):
            try:
                im = read_image(p)
            except FormatError as exc:
                raise ValueError(f"undecodable image {p}: {exc}") from None
            if im.shape != (cam.height, cam.width, 3):
                raise ValueError(f"{p}: shape {im.shape} does not match camera {ci} ({cam.height}x{cam.width})")
            frames[(ci, ti)] = im
    return MultiViewDataset(cameras, normalized_times(expected), frames)
