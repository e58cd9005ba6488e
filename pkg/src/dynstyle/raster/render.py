"""Differentiable rendering: deformation -> projection -> tiled compositing.

Per pixel ``p`` with contributors sorted front to back::

    c(p) = sum_i (c_i + d_rgb_i) * a_i * prod_{j<i} (1 - a_j) + T_final * background
    a_i  = sigmoid(logit(o_i) + d_logit_i) * exp(-0.5 * d^T cov2d^-1 d)

where ``(d_rgb_i, d_logit_i)`` come from Gaussian i's tiny MLP evaluated at
(time, peak depth along the pixel ray / scene extent), and are zero when the
scene carries no MLPs.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..deformation import DeformationField, deform_arrays, deform_backward
from . import kernels as K
from .project import Projection, project_arrays, project_backward, view_colors, view_colors_backward

TILE = 16


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


@dataclass
class GaussianParams:
    """Float64 working copy of a Gaussian set (the optimizer's view).

    ``rot`` need not be unit-norm; ``logit`` is the opacity logit.
    """

    mu: np.ndarray
    rot: np.ndarray
    scale: np.ndarray
    logit: np.ndarray
    color: np.ndarray
    sh1: np.ndarray | None = None
    mlp: np.ndarray | None = None

    @classmethod
    def from_set(cls, gs) -> "GaussianParams":
        f = lambda a: None if a is None else np.asarray(a, dtype=np.float64).copy()
        return cls(f(gs.mu), f(gs.rot), f(gs.scale), logit(gs.opacity), f(gs.color), f(gs.sh1), f(gs.mlp))

    def to_set(self):
        from ..scene import GaussianSet

        q = self.rot / np.linalg.norm(self.rot, axis=1, keepdims=True)
        opacity = np.clip(sigmoid(self.logit), 1e-6, 1 - 1e-6)
        return GaussianSet(self.mu, q, self.scale, opacity, self.color, self.sh1, self.mlp)

    def copy(self) -> "GaussianParams":
        f = lambda a: None if a is None else a.copy()
        return GaussianParams(*(f(getattr(self, n)) for n in ("mu", "rot", "scale", "logit", "color", "sh1", "mlp")))

    def __len__(self):
        return len(self.mu)


@dataclass
class SplatBatch:
    """Visible splats in compositing order (front to back)."""

    index: np.ndarray    # original Gaussian indices
    depth: np.ndarray
    mean2d: np.ndarray
    conic: np.ndarray
    logit: np.ndarray
    color: np.ndarray
    xcam: np.ndarray
    A: np.ndarray        # (M, 9)
    mlp: np.ndarray | None
    radius: np.ndarray


@dataclass
class RenderOutput:
    image: np.ndarray           # (H, W, 3)
    alpha: np.ndarray           # (H, W) accumulated opacity
    transmittance: np.ndarray   # (H, W) residual transmittance
    n_contrib: np.ndarray       # (H, W) contributors per pixel (prefix of the tile list)
    splats: SplatBatch | None = None
    ctx: dict = field(default_factory=dict, repr=False)


def _tile_lists(splats: SplatBatch, W: int, H: int, tile: int):
    tiles_x = (W + tile - 1) // tile
    tiles_y = (H + tile - 1) // tile
    n_tiles = tiles_x * tiles_y
    m = len(splats.index)
    if m == 0:
        return np.zeros(n_tiles + 1, np.int64), np.zeros(0, np.int64)
    r = splats.radius
    x0 = np.clip(np.floor((splats.mean2d[:, 0] - r + 0.5) / tile), 0, tiles_x - 1).astype(np.int64)
    x1 = np.clip(np.floor((splats.mean2d[:, 0] + r + 0.5) / tile), 0, tiles_x - 1).astype(np.int64)
    y0 = np.clip(np.floor((splats.mean2d[:, 1] - r + 0.5) / tile), 0, tiles_y - 1).astype(np.int64)
    y1 = np.clip(np.floor((splats.mean2d[:, 1] + r + 0.5) / tile), 0, tiles_y - 1).astype(np.int64)
    nx, ny = x1 - x0 + 1, y1 - y0 + 1
    counts = nx * ny
    rank = np.repeat(np.arange(m), counts)
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    tx = x0[rank] + local % nx[rank]
    ty = y0[rank] + local // nx[rank]
    tile_id = ty * tiles_x + tx
    order = np.argsort(tile_id, kind="stable")
    entries = rank[order].astype(np.int64)
    offsets = np.zeros(n_tiles + 1, np.int64)
    np.cumsum(np.bincount(tile_id, minlength=n_tiles), out=offsets[1:])
    return offsets, entries


def check_sorted(depth, index) -> None:
    if len(depth) < 2:
        return
    dz = np.diff(depth)
    bad = (dz < 0) | ((dz == 0) & (np.diff(index) <= 0))
    if np.any(bad):
        k = int(np.argmax(bad))
        raise ValueError(f"splats not sorted front to back: depth inversion at position {k + 1}")


def composite(splats: SplatBatch, cam, t: float, *, background, extent: float = 1.0,
              tile: int = TILE) -> RenderOutput:
    """Alpha-composite pre-sorted splats over every pixel of ``cam``."""
    check_sorted(splats.depth, splats.index)
    W, H = cam.width, cam.height
    offsets, entries = _tile_lists(splats, W, H, tile)
    has_mlp = splats.mlp is not None
    m = len(splats.index)
    mlp = splats.mlp if has_mlp else np.zeros((max(m, 1), 32))
    rays = cam.pixel_rays_cam() if has_mlp else np.zeros((1, 1, 3))
    bg = np.asarray(background, dtype=np.float64)
    image = np.empty((H, W, 3))
    alpha = np.empty((H, W))
    trans = np.empty((H, W))
    ncontrib = np.empty((H, W), np.int64)
    args = (H, W, tile, bg, has_mlp, float(t), 1.0 / float(extent),
            _c(splats.mean2d, 2), _c(splats.conic, 3), _c1(splats.logit), _c(splats.color, 3),
            _c(splats.xcam, 3), _c(splats.A, 9), np.ascontiguousarray(mlp, dtype=np.float64), rays, offsets, entries)
    K.forward_kernel(*args, image, alpha, trans, ncontrib)
    return RenderOutput(image, alpha, trans, ncontrib, splats,
                        {"args": args, "cam": cam})


def _c(a, w):
    a = np.asarray(a, dtype=np.float64).reshape(-1, w)
    return np.ascontiguousarray(a) if len(a) else np.zeros((1, w))


def _c1(a):
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    return np.ascontiguousarray(a) if len(a) else np.zeros(1)


def composite_backward(out: RenderOutput, dL_dimage) -> dict:
    """Per-splat gradients (rows follow ``out.splats`` order)."""
    if "args" not in out.ctx:
        raise ValueError("render output carries no forward state for backward")
    args = out.ctx["args"]
    entries = args[-1]
    m = len(out.splats.index)
    dimg = np.ascontiguousarray(dL_dimage, dtype=np.float64)
    if dimg.shape != out.image.shape:
        raise ValueError(f"upstream gradient shape {dimg.shape} != image shape {out.image.shape}")
    entry_grad = np.zeros((len(entries), K.G_WIDTH))
    if len(entries):
        K.backward_kernel(*args, out.n_contrib, dimg, entry_grad)
    g = K.reduce_entries(entries, entry_grad, max(m, 1))[:m]
    return {
        "mean2d": g[:, K.G_MEAN:K.G_MEAN + 2],
        "conic": g[:, K.G_CONIC:K.G_CONIC + 3],
        "logit": g[:, K.G_LOGIT],
        "color": g[:, K.G_COLOR:K.G_COLOR + 3],
        "xcam": g[:, K.G_XCAM:K.G_XCAM + 3],
        "A": g[:, K.G_A:K.G_A + 9],
        "mlp": g[:, K.G_MLP:K.G_MLP + 32],
    }


def sort_visible(proj: Projection):
    vis = np.flatnonzero(proj.visible)
    order = vis[np.argsort(proj.x[vis, 2], kind="stable")]
    return order


def render_params(params: GaussianParams, cam, t: float, *, background, extent: float = 1.0,
                  deformation: DeformationField | None = None, deform_params=None,
                  tile: int = TILE) -> RenderOutput:
    """Render ``params`` (canonical, deformed by ``deformation`` if given) at time ``t``."""
    if deformation is not None:
        mu, rot, scale, dcache = deform_arrays(params.mu, params.rot, params.scale, deformation, t, deform_params)
    else:
        mu, rot, scale, dcache = params.mu, params.rot, params.scale, None
    proj = project_arrays(mu, rot, scale, cam)
    colors, sh_state = view_colors(mu, params.color, params.sh1, cam)
    order = sort_visible(proj)
    splats = SplatBatch(
        index=order, depth=proj.x[order, 2], mean2d=proj.mean2d[order], conic=proj.conic[order],
        logit=np.asarray(params.logit, dtype=np.float64)[order], color=colors[order], xcam=proj.x[order],
        A=proj.A[order].reshape(-1, 9), mlp=None if params.mlp is None else params.mlp[order],
        radius=proj.radius[order],
    )
    out = composite(splats, cam, t, background=background, extent=extent, tile=tile)
    out.ctx.update(proj=proj, logit=np.asarray(params.logit, dtype=np.float64), sh_state=sh_state, dcache=dcache, n=len(params), has_sh=params.sh1 is not None,
                   deformed=deformation is not None)
    return out


def render_backward(out: RenderOutput, dL_dimage) -> dict:
    """Gradients wrt every parameter group of :func:`render_params`.

    Keys: mu, rot, scale, logit, opacity, color, sh1, mlp, deform.
    """
    if "proj" not in out.ctx:
        raise ValueError("render output carries no forward state for backward")
    n = out.ctx["n"]
    sg = composite_backward(out, dL_dimage)
    order = out.splats.index
    proj: Projection = out.ctx["proj"]
    cam = out.ctx["cam"]

    def scatter(rows, width):
        full = np.zeros((n, width))
        full[order] = rows.reshape(len(order), width)
        return full

    g_mean = scatter(sg["mean2d"], 2)
    g_conic = scatter(sg["conic"], 3)
    has_mlp = out.splats.mlp is not None
    g_x = scatter(sg["xcam"], 3) if has_mlp else None
    g_A = scatter(sg["A"], 9) if has_mlp else None
    g_color_view = scatter(sg["color"], 3)
    g_mu, g_rot, g_scale = project_backward(proj, cam, g_mean, g_conic, g_x, g_A)
    grads = {"color": g_color_view, "sh1": None, "mlp": None, "deform": None}
    if out.ctx["has_sh"]:
        g_mu_sh, g_sh1 = view_colors_backward(out.ctx["sh_state"], g_color_view)
        g_mu = g_mu + g_mu_sh
        grads["sh1"] = g_sh1
    g_logit = scatter(sg["logit"], 1)[:, 0]
    if has_mlp:
        grads["mlp"] = scatter(sg["mlp"], 32)
    dcache = out.ctx["dcache"]
    if dcache is not None:
        g_mu, g_rot, g_scale, grads["deform"] = deform_backward(dcache, g_mu, g_rot, g_scale)
    s = sigmoid(out.ctx["logit"])
    grads.update(mu=g_mu, rot=g_rot, scale=g_scale, logit=g_logit, opacity=g_logit / (s * (1 - s)))
    return grads


def render_scene(scene, cam, t: float, *, use_mlp: bool = True, tile: int = TILE) -> RenderOutput:
    params = GaussianParams.from_set(scene.gaussians)
    if not use_mlp:
        params.mlp = None
    return render_params(params, cam, t, background=scene.background, extent=scene.extent,
                         deformation=scene.deformation, tile=tile)


def render_trajectory(scene, cameras, times, *, use_mlp: bool = True) -> list[np.ndarray]:
    cameras, times = list(cameras), list(times)
    if not cameras or not times:
        raise ValueError("render_trajectory needs at least one camera and one time")
    if len(cameras) != len(times):
        raise ValueError(f"{len(cameras)} cameras but {len(times)} times")
    return [render_scene(scene, c, t, use_mlp=use_mlp).image for c, t in zip(cameras, times)]
