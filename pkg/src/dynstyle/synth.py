"""Synthetic dynamic multi-view scenes with analytic motion and image-space flow."""
from __future__ import annotations

import configparser
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .camera import look_at, write_camera_file
from .dataset import MultiViewDataset, normalized_times
from .deformation import DeformationField
from .imageio import write_flo, write_image, write_png
from .raster.project import quat_to_rotmat
from .raster.render import GaussianParams, logit, render_params
from .scene import GaussianSet, Scene

MOTIONS = ("orbit", "oscillate", "static")


@dataclass(frozen=True)
class SynthSpec:
    n_gaussians: int = 200
    n_cameras: int = 5
    n_times: int = 20
    resolution: int = 64
    motion: str = "oscillate"
    seed: int = 0
    amplitude: float = 0.15        # oscillate: peak displacement (scene units)
    angular_rate: float = np.pi / 4  # orbit: radians per unit time about +y
    cam_radius: float = 4.0
    focal: float = 80.0
    backdrop: int = 0              # extra static Gaussians on a dome enclosing the cameras
    backdrop_radius: float = 6.0

    def __post_init__(self):
        for name in ("n_gaussians", "n_cameras", "n_times"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.backdrop < 0:
            raise ValueError("backdrop must be >= 0")
        if not self.backdrop_radius > self.cam_radius:
            raise ValueError("backdrop_radius must exceed cam_radius (the dome encloses the cameras)")
        if self.resolution < 16 or self.resolution % 16:
            raise ValueError("resolution must be a positive multiple of 16")
        if self.motion not in MOTIONS:
            raise ValueError(f"motion must be one of {MOTIONS}, got {self.motion!r}")

    @classmethod
    def from_config(cls, text: str, section: str = "synth") -> "SynthSpec":
        cp = configparser.ConfigParser()
        cp.read_string(text)
        if not cp.has_section(section):
            return cls()
        kw = {}
        types = {f.name: f.type for f in fields(cls)}
        for key, val in cp.items(section):
            if key not in types:
                raise ValueError(f"unknown [{section}] key '{key}'")
            t = types[key]
            kw[key] = int(val) if t == "int" else float(val) if t == "float" else val
        return cls(**kw)


def _rotate_y(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _quat_mul(a, b):
    w1, x1, y1, z1 = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    w2, x2, y2, z2 = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ], axis=-1)


def apply_motion(spec: SynthSpec, mu, rot, t: float):
    """Analytic canonical -> time-t map for positions and rotations."""
    mu = np.asarray(mu, dtype=np.float64)
    rot = np.asarray(rot, dtype=np.float64)
    if spec.motion == "static":
        return mu.copy(), rot.copy()
    if spec.motion == "oscillate":
        s = spec.amplitude * np.sin(2 * np.pi * t)
        d = np.stack([np.cos(np.pi * mu[:, 1]), np.zeros(len(mu)), np.sin(np.pi * mu[:, 0])], axis=1)
        return mu + s * d, rot.copy()
    theta = spec.angular_rate * t
    q = np.array([np.cos(theta / 2), 0.0, np.sin(theta / 2), 0.0])
    return mu @ _rotate_y(theta).T, _quat_mul(np.broadcast_to(q, rot.shape), rot)


def make_cameras(spec: SynthSpec) -> list:
    n = spec.n_cameras
    az = np.zeros(1) if n == 1 else np.linspace(-np.pi / 3, np.pi / 3, n)
    cams = []
    for a in az:
        eye = spec.cam_radius * np.array([np.sin(a), -0.25, -np.cos(a)])
        cams.append(look_at(eye, np.zeros(3), fx=spec.focal, fy=spec.focal,
                            width=spec.resolution, height=spec.resolution))
    return cams


def make_gaussians(spec: SynthSpec) -> GaussianSet:
    rng = np.random.default_rng(spec.seed)
    n = spec.n_gaussians
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    mu = d * rng.random(n)[:, None] ** (1 / 3)
    rot = rng.normal(size=(n, 4))
    rot /= np.linalg.norm(rot, axis=1, keepdims=True)
    scale = rng.uniform(0.05, 0.14, size=(n, 3))
    opacity = rng.uniform(0.6, 0.95, size=n)
    palette = rng.random((6, 3))
    color = np.clip(palette[rng.integers(0, 6, size=n)] + rng.normal(0, 0.08, size=(n, 3)), 0, 1)
    if spec.backdrop:
        b = _backdrop(spec, make_cameras(spec), rng)
        mu, rot, scale, opacity, color = (np.concatenate([x, y]) for x, y in zip((mu, rot, scale, opacity, color), b))
    return GaussianSet(mu, rot, scale, opacity, color)


def _backdrop(spec: SynthSpec, cams, rng):
    """Static band of flat Gaussians on a dome around the rig, covering every camera's view.

    Dome points a camera can see lie beyond its ray's closest approach to the
    origin, i.e. at depth >= cam_radius * cos^2(half diagonal fov). Candidates
    in front of some camera but nearer than that only spill huge footprints
    into its view and are rejected.
    """
    m = spec.backdrop
    half_diag = np.arctan(np.sqrt(0.5) * spec.resolution / spec.focal)
    # angle at the origin between a camera's far axis and where its widest ray meets the dome
    reach = half_diag + np.arcsin(spec.cam_radius * np.sin(half_diag) / spec.backdrop_radius) + 0.1
    span = np.pi / 3 + reach
    min_depth = 0.9 * spec.cam_radius * np.cos(half_diag) ** 2
    R = np.stack([c.R for c in cams])
    T = np.stack([c.T for c in cams])
    kept = []
    while sum(len(k) for k in kept) < m:
        az = np.pi + rng.uniform(-span, span, m)
        el = rng.uniform(-reach, reach, m)
        d = np.stack([np.sin(az) * np.cos(el), np.sin(el), -np.cos(az) * np.cos(el)], axis=1)
        z = np.einsum("ck,nk->nc", R[:, 2], spec.backdrop_radius * d) + T[:, 2]
        kept.append(d[np.all((z <= 0.0) | (z >= min_depth), axis=1)])
    d = np.concatenate(kept)[:m]
    mu = spec.backdrop_radius * d
    area = 2 * span * 2 * reach * spec.backdrop_radius ** 2
    s = 1.2 * np.sqrt(area / m)
    scale = np.column_stack([np.full(m, s), np.full(m, s), np.full(m, 0.2 * s)])
    # flat side faces the origin: rotate local z onto the radial direction
    zax = np.array([0.0, 0.0, 1.0])
    axis = np.cross(zax, d)
    ang = np.arccos(np.clip(d @ zax, -1, 1))
    nrm = np.linalg.norm(axis, axis=1, keepdims=True)
    axis = np.where(nrm > 1e-9, axis / np.maximum(nrm, 1e-12), np.array([1.0, 0.0, 0.0]))
    rot = np.column_stack([np.cos(ang / 2), axis * np.sin(ang / 2)[:, None]])
    base = rng.random(3) * 0.6 + 0.2
    color = np.clip(base + rng.normal(0, 0.15, (m, 3)), 0, 1)
    return mu, rot, scale, np.full(m, 0.98), color


@dataclass
class SynthResult:
    spec: SynthSpec
    scene: Scene                  # canonical (t = 0) Gaussians, identity deformation
    dataset: MultiViewDataset     # ground-truth frames
    flows: dict                   # (cam, t) -> (u, v) from frame t to t + 1
    point_cloud: tuple            # (points, colors) for initialization

    def time_params(self, t: float) -> GaussianParams:
        gs = self.scene.gaussians
        k = self.spec.n_gaussians       # backdrop Gaussians (after the first k) stay put
        p = GaussianParams.from_set(gs)
        p.mu[:k], p.rot[:k] = apply_motion(self.spec, gs.mu[:k], gs.rot[:k], t)
        return p


def _render(params, cam, scene):
    return render_params(params, cam, 0.0, background=scene.background, extent=scene.extent)


def _proj_jacobian(x, cam):
    z = x[:, 2]
    J = np.zeros((len(x), 2, 3))
    J[:, 0, 0] = cam.fx / z
    J[:, 0, 2] = -cam.fx * x[:, 0] / z ** 2
    J[:, 1, 1] = cam.fy / z
    J[:, 1, 2] = -cam.fy * x[:, 1] / z ** 2
    return J


def analytic_flow(p0: GaussianParams, p1: GaussianParams, cam, scene):
    """Compositing-weighted image-space flow from t to t+1.

    Each Gaussian moves rigidly (relative rotation about its center plus
    translation), so near its projected center the pixel map is affine:
    F_i(x) = d_i + (J_i - I)(x - m_i), with J_i the pixel Jacobian through the
    center's depth plane. The affine fields are composited with the frame's
    own blending weights and normalized by coverage.

    Sign follows the warp convention: frame t+1 sampled at x + F(x) lands on
    the content seen at x in frame t. Pixels with no coverage get zero flow.
    """
    out0 = _render(p0, cam, scene)
    if np.array_equal(p0.mu, p1.mu) and np.array_equal(p0.rot, p1.rot):
        zero = np.zeros(out0.alpha.shape)
        return zero, zero.copy()
    pr0, pr1 = out0.ctx["proj"], _render(p1, cam, scene).ctx["proj"]
    m0, disp = pr0.mean2d, pr1.mean2d - pr0.mean2d
    q0 = p0.rot / np.linalg.norm(p0.rot, axis=1, keepdims=True)
    q1 = p1.rot / np.linalg.norm(p1.rot, axis=1, keepdims=True)
    rel = quat_to_rotmat(q1) @ quat_to_rotmat(q0).transpose(0, 2, 1)
    R = cam.R
    B = np.zeros((len(m0), 3, 2))
    B[:, 0, 0] = pr0.x[:, 2] / cam.fx
    B[:, 1, 1] = pr0.x[:, 2] / cam.fy
    Jpix = _proj_jacobian(pr1.x, cam) @ (R @ rel @ R.T) @ B - np.eye(2)
    offset = disp - np.einsum("nij,nj->ni", Jpix, m0)
    a = out0.alpha
    carriers = []
    for cols in (np.concatenate([offset, Jpix[:, 0, :1]], axis=1), np.concatenate([Jpix[:, 0, 1:], Jpix[:, 1, :]], axis=1)):
        c = p0.copy()
        c.color, c.sh1, c.mlp = cols, None, None
        carriers.append(render_params(c, cam, 0.0, background=np.zeros(3), extent=scene.extent).image)
    (o_u, o_v, j00), (j01, j10, j11) = np.moveaxis(carriers[0], 2, 0), np.moveaxis(carriers[1], 2, 0)
    yy, xx = np.mgrid[0:a.shape[0], 0:a.shape[1]].astype(np.float64)
    covered = a > 1e-6
    safe = np.where(covered, a, 1.0)
    u = np.where(covered, (o_u + j00 * xx + j01 * yy) / safe, 0.0)
    v = np.where(covered, (o_v + j10 * xx + j11 * yy) / safe, 0.0)
    return u, v


def generate(spec: SynthSpec) -> SynthResult:
    gs = make_gaussians(spec)
    cams = make_cameras(spec)
    scene = Scene(gs, DeformationField.zeros(), cams, np.zeros(3), 1.0)
    times = normalized_times(spec.n_times)
    res = SynthResult(spec, scene, None, {}, (None, None))
    frames, flows = {}, {}
    params_t = [res.time_params(float(t)) for t in times]
    for ci, cam in enumerate(cams):
        for ti in range(len(times)):
            frames[(ci, ti)] = _render(params_t[ti], cam, scene).image
            if ti + 1 < len(times):
                flows[(ci, ti)] = analytic_flow(params_t[ti], params_t[ti + 1], cam, scene)
    res.dataset = MultiViewDataset(cams, times, frames)
    res.flows = flows
    rng = np.random.default_rng(spec.seed + 1)
    pts = np.asarray(gs.mu, dtype=np.float64) + rng.normal(0, 0.02, size=(len(gs), 3))
    res.point_cloud = (pts, np.asarray(gs.color, dtype=np.float64))
    return res


def style_texture(size: int, seed: int) -> np.ndarray:
    """Saturated painterly color blobs (blob scale size/16) used as the default style image."""
    rng = np.random.default_rng(seed)
    sigma = size / 16
    x = gaussian_filter(rng.random((size, size, 3)), (sigma, sigma, 0))
    x = (x - x.mean(axis=(0, 1))) / x.std(axis=(0, 1))
    return 1.0 / (1.0 + np.exp(-2.0 * x))


def write_run_dir(result: SynthResult, out, style=None) -> None:
    """Emit the evaluation layout plus a Neu3D-style copy of the frames.

    ``originals/`` holds per-camera folders and ``cameras.txt`` (loadable by
    :func:`dynstyle.dataset.load_neu3d_style`); ``frames/`` repeats them as
    the frames under evaluation; ``flows/`` holds the analytic flow.
    """
    root = Path(out)
    for (ci, ti), im in sorted(result.dataset.frames.items()):
        for sub in ("originals", "frames"):
            write_image(root / sub / str(ci) / f"{ti:04d}.imgf32", im)
        write_png(root / "originals" / str(ci) / f"{ti:04d}.png", im)
    for (ci, ti), (u, v) in sorted(result.flows.items()):
        write_flo(root / "flows" / str(ci) / f"{ti:04d}.flo", u, v)
    write_camera_file(root / "cameras.txt", result.dataset.cameras)
    write_camera_file(root / "originals" / "cameras.txt", result.dataset.cameras)
    if style is None:
        style = style_texture(result.spec.resolution, result.spec.seed + 7)
    write_image(root / "style.imgf32", style)
