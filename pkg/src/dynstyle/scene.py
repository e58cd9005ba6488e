"""Scene primitives, the scene container format, and point-cloud initialization."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .camera import Camera
from .deformation import DeformationField, deform_arrays, param_count
from .style_mlp import N_PARAMS as MLP_PARAMS, TinyMlpParams, flatten as mlp_flatten, unflatten as mlp_unflatten

MAGIC = b"S4DS"
VERSION = 1
_FLAG_SH1 = 1
_FLAG_MLP = 2


class SceneFormatError(ValueError):
    pass


class InvariantViolation(ValueError):
    pass


def _check_gaussian_arrays(mu, rot, scale, opacity, color, sh1):
    if not all(np.all(np.isfinite(a)) for a in (mu, rot, scale, opacity, color)):
        raise InvariantViolation("non-finite Gaussian attribute")
    qn = np.linalg.norm(rot.astype(np.float64), axis=-1)
    bad = np.abs(qn - 1.0) > 1e-6
    if np.any(bad):
        raise InvariantViolation(f"quaternion of Gaussian {int(np.argmax(bad))} has norm {qn[bad][0]:.6g}, expected 1")
    if np.any(scale <= 0):
        raise InvariantViolation("scale components must be positive")
    if np.any((opacity <= 0) | (opacity >= 1)):
        raise InvariantViolation("opacity must lie in (0, 1)")
    if sh1 is not None and not np.all(np.isfinite(sh1)):
        raise InvariantViolation("non-finite degree-1 color coefficients")


@dataclass(frozen=True, eq=False)
class Gaussian:
    """One primitive. ``color`` is the base RGB; ``sh1`` optionally holds the
    nine degree-1 coefficients (3 basis functions x RGB)."""

    mu: np.ndarray
    rot: np.ndarray
    scale: np.ndarray
    opacity: float
    color: np.ndarray
    sh1: np.ndarray | None = None

    def __post_init__(self):
        f = lambda a, n: np.asarray(a, dtype=np.float32).reshape(n)
        object.__setattr__(self, "mu", f(self.mu, 3))
        object.__setattr__(self, "rot", f(self.rot, 4))
        object.__setattr__(self, "scale", f(self.scale, 3))
        object.__setattr__(self, "color", f(self.color, 3))
        object.__setattr__(self, "opacity", float(np.float32(self.opacity)))
        if self.sh1 is not None:
            object.__setattr__(self, "sh1", f(self.sh1, 9))
        _check_gaussian_arrays(self.mu, self.rot[None], self.scale, np.array([self.opacity]), self.color, self.sh1)

    def __eq__(self, other):
        if not isinstance(other, Gaussian):
            return NotImplemented
        same_sh = (self.sh1 is None and other.sh1 is None) or (
            self.sh1 is not None and other.sh1 is not None and np.array_equal(self.sh1, other.sh1))
        return (np.array_equal(self.mu, other.mu) and np.array_equal(self.rot, other.rot)
                and np.array_equal(self.scale, other.scale) and self.opacity == other.opacity
                and np.array_equal(self.color, other.color) and same_sh)


@dataclass(frozen=True, eq=False)
class StyleGaussian:
    base: Gaussian
    style_mlp: TinyMlpParams

    def __eq__(self, other):
        if not isinstance(other, StyleGaussian):
            return NotImplemented
        return self.base == other.base and np.array_equal(self.style_mlp.flatten(), other.style_mlp.flatten())


@dataclass(frozen=True, eq=False)
class GaussianSet:
    """Structure-of-arrays storage for N Gaussians (float32)."""

    mu: np.ndarray
    rot: np.ndarray
    scale: np.ndarray
    opacity: np.ndarray
    color: np.ndarray
    sh1: np.ndarray | None = None
    mlp: np.ndarray | None = None

    def __post_init__(self):
        for name, width in (("mu", 3), ("rot", 4), ("scale", 3), ("color", 3), ("sh1", 9), ("mlp", MLP_PARAMS)):
            a = getattr(self, name)
            if a is None:
                continue
            object.__setattr__(self, name, np.asarray(a, dtype=np.float32).reshape(-1, width))
        object.__setattr__(self, "opacity", np.asarray(self.opacity, dtype=np.float32).reshape(-1))
        n = len(self.mu)
        for name in ("rot", "scale", "opacity", "color", "sh1", "mlp"):
            a = getattr(self, name)
            if a is not None and len(a) != n:
                raise InvariantViolation(f"{name} has {len(a)} rows, expected {n}")
        if n == 0:
            raise InvariantViolation("scene needs at least one Gaussian")
        _check_gaussian_arrays(self.mu, self.rot, self.scale, self.opacity, self.color, self.sh1)
        if self.mlp is not None and not np.all(np.isfinite(self.mlp)):
            raise InvariantViolation("non-finite style MLP parameters")

    def __len__(self):
        return len(self.mu)

    def __eq__(self, other):
        if not isinstance(other, GaussianSet):
            return NotImplemented
        for name in ("mu", "rot", "scale", "opacity", "color", "sh1", "mlp"):
            a, b = getattr(self, name), getattr(other, name)
            if (a is None) != (b is None) or (a is not None and not np.array_equal(a, b)):
                return False
        return True

    def __getitem__(self, i: int) -> Gaussian | StyleGaussian:
        g = Gaussian(self.mu[i], self.rot[i], self.scale[i], self.opacity[i], self.color[i],
                     None if self.sh1 is None else self.sh1[i])
        if self.mlp is None:
            return g
        return StyleGaussian(g, mlp_unflatten(self.mlp[i]))

    @classmethod
    def from_list(cls, items) -> "GaussianSet":
        items = list(items)
        if not items:
            raise InvariantViolation("scene needs at least one Gaussian")
        styled = isinstance(items[0], StyleGaussian)
        if any(isinstance(it, StyleGaussian) != styled for it in items):
            raise ValueError("cannot mix Gaussian and StyleGaussian")
        bases = [it.base if styled else it for it in items]
        has_sh = bases[0].sh1 is not None
        return cls(
            np.stack([g.mu for g in bases]), np.stack([g.rot for g in bases]),
            np.stack([g.scale for g in bases]), np.array([g.opacity for g in bases]),
            np.stack([g.color for g in bases]),
            np.stack([g.sh1 for g in bases]) if has_sh else None,
            np.stack([mlp_flatten(it.style_mlp) for it in items]) if styled else None,
        )


@dataclass(frozen=True, eq=False)
class Scene:
    gaussians: GaussianSet
    deformation: DeformationField
    cameras: list = field(default_factory=list)
    background: np.ndarray = field(default_factory=lambda: np.zeros(3, np.float32))
    extent: float = 1.0
    time_range: tuple = (0.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "background", np.asarray(self.background, dtype=np.float32).reshape(3))
        object.__setattr__(self, "extent", float(np.float32(self.extent)))
        object.__setattr__(self, "cameras", list(self.cameras))
        if tuple(self.time_range) != (0.0, 1.0):
            raise InvariantViolation("times are normalized to [0, 1]")
        if not np.all((self.background >= 0) & (self.background <= 1)):
            raise InvariantViolation("background must lie in [0, 1]^3")
        if not self.extent > 0:
            raise InvariantViolation("extent must be positive")

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (self.gaussians == other.gaussians and self.deformation == other.deformation
                and self.cameras == other.cameras and np.array_equal(self.background, other.background)
                and self.extent == other.extent)

    def replace(self, **kw) -> "Scene":
        return replace(self, **kw)


def deform(g: Gaussian, field: DeformationField, t: float, index: int = 0) -> Gaussian:
    """Apply the deformation field to a single Gaussian at time ``t``."""
    try:
        mu, rot, scale, cache = deform_arrays(g.mu[None], g.rot[None], g.scale[None], field, t)
    except FloatingPointError as exc:
        raise FloatingPointError(f"Gaussian {index}: {exc}") from None
    # a zero rotation delta keeps the stored quaternion: renormalizing an f32 unit
    # quaternion in f64 and rounding back can move it by one ulp
    if np.array_equal(cache.rot_sum[0], np.asarray(g.rot, dtype=np.float64)):
        rot = g.rot[None]
    return Gaussian(mu[0], rot[0], scale[0], g.opacity, g.color, g.sh1)


# ---------------------------------------------------------------------------
# container


def _pack(fmt, *vals):
    return struct.pack("<" + fmt, *vals)


def save_scene(scene: Scene, path) -> None:
    gs = scene.gaussians
    flags = (_FLAG_SH1 if gs.sh1 is not None else 0) | (_FLAG_MLP if gs.mlp is not None else 0)
    parts = [MAGIC, _pack("IQI", VERSION, len(gs), flags), scene.background.astype("<f4").tobytes(),
             _pack("f", scene.extent)]
    for a in (gs.mu, gs.rot, gs.scale, gs.opacity, gs.color, gs.sh1, gs.mlp):
        if a is not None:
            parts.append(a.astype("<f4").tobytes())
    d = scene.deformation
    parts += [_pack("IIQ", d.encoding_frequencies, d.width, d.params.size), d.params.astype("<f4").tobytes()]
    parts.append(_pack("I", len(scene.cameras)))
    for c in scene.cameras:
        parts.append(np.concatenate([c.rotation.ravel(), c.translation,
                                     np.array([c.fx, c.fy, c.cx, c.cy], np.float32)]).astype("<f4").tobytes())
        parts.append(_pack("II", c.width, c.height))
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise SceneFormatError(f"truncated scene file: needed {n} bytes at offset {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def f32(self, count: int, shape) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32).reshape(shape)


def load_scene(path) -> Scene:
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise SceneFormatError(f"{path}: not a scene container (bad magic)")
    version, n, flags = r.unpack("IQI")
    if version != VERSION:
        raise SceneFormatError(f"{path}: unsupported container version {version} (expected {VERSION})")
    background = r.f32(3, 3)
    (extent,) = r.unpack("f")
    mu, rot, scale = r.f32(3 * n, (n, 3)), r.f32(4 * n, (n, 4)), r.f32(3 * n, (n, 3))
    opacity, color = r.f32(n, n), r.f32(3 * n, (n, 3))
    sh1 = r.f32(9 * n, (n, 9)) if flags & _FLAG_SH1 else None
    mlp = r.f32(MLP_PARAMS * n, (n, MLP_PARAMS)) if flags & _FLAG_MLP else None
    freq, width, n_params = r.unpack("IIQ")
    if n_params != param_count(freq, width):
        raise SceneFormatError(f"{path}: deformation parameter count {n_params} inconsistent with its shape")
    params = r.f32(n_params, n_params)
    (n_cams,) = r.unpack("I")
    cams = []
    for _ in range(n_cams):
        v = r.f32(16, 16)
        w, h = r.unpack("II")
        cams.append(Camera(v[:9].reshape(3, 3), v[9:12], v[12], v[13], v[14], v[15], w, h))
    if r.pos != len(r.data):
        raise SceneFormatError(f"{path}: {len(r.data) - r.pos} trailing bytes")
    gs = GaussianSet(mu, rot, scale, opacity, color, sh1, mlp)
    return Scene(gs, DeformationField(params, freq, width), cams, background, float(extent))


# ---------------------------------------------------------------------------
# initialization


def init_from_points(points, colors, count_target: int, *, seed: int = 0, cameras=(),
                     background=(0.0, 0.0, 0.0), sh_degree: int = 0, k_neighbors: int = 3) -> Scene:
    """Build a static scene from a colored point cloud.

    Points beyond ``count_target`` are dropped by a seeded uniform subsample.
    Each Gaussian starts isotropic with scale equal to the mean distance to
    its (up to) ``k_neighbors`` nearest neighbors, opacity 0.5, identity
    rotation, and a deformation field whose output layer is zero (identity
    map at every time, but trainable).
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cols = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("init_from_points needs at least one point")
    if len(cols) != len(pts):
        raise ValueError("points and colors differ in length")
    if count_target < 1:
        raise ValueError("count_target must be positive")
    if len(pts) > count_target:
        keep = np.sort(np.random.default_rng(seed).choice(len(pts), count_target, replace=False))
        pts, cols = pts[keep], cols[keep]
    n = len(pts)
    if n > 1:
        k = min(k_neighbors, n - 1)
        dist, _ = cKDTree(pts).query(pts, k=k + 1)
        nn = np.asarray(dist).reshape(n, k + 1)[:, 1:].mean(axis=1)
        nn = np.maximum(nn, 1e-7)
    else:
        nn = np.full(1, 0.01)
    centroid = pts.mean(axis=0)
    extent = max(float(np.linalg.norm(pts - centroid, axis=1).max()), 1e-3)
    gs = GaussianSet(
        mu=pts,
        rot=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        scale=np.repeat(nn[:, None], 3, axis=1),
        opacity=np.full(n, 0.5),
        color=cols,
        sh1=np.zeros((n, 9)) if sh_degree >= 1 else None,
    )
    return Scene(gs, DeformationField.initialized(seed), list(cameras), background, extent)
