"""Pyramidal Lucas-Kanade flow, bilinear warping and the temporal warp loss.

Convention: the flow F attached to a pair (I_t, I_t+1) gives, for every
pixel x of frame t, where that content sits in frame t+1, so that
``warp(I_t+1, F)(x) = I_t+1(x + F(x))`` reproduces ``I_t(x)``. For a pair
with ``I_t+1(x) = I_t(x + 2)``, sampling I_t+1 at x + u must return
I_t(x) = I_t+1(x - 2), hence u = -2.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

LK_LEVELS = 3
LK_WINDOW = 7
LK_ITERS = 3
LK_REG = 1e-6
LK_MIN_EIG = 1e-5      # untextured windows (smaller structure-tensor eigenvalue) keep their flow
MIN_SIZE = 32


@dataclass
class FlowField:
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.u.shape != self.v.shape or self.u.ndim != 2:
            raise ValueError("flow components must be matching 2-D maps")
        if not (np.all(np.isfinite(self.u)) and np.all(np.isfinite(self.v))):
            raise ValueError("flow contains non-finite values")


def _gray(im):
    im = np.asarray(im, dtype=np.float64)
    if im.ndim == 3:
        return im @ np.array([0.299, 0.587, 0.114]) if im.shape[2] == 3 else im.mean(axis=2)
    return im


def _sample(im, ys, xs):
    """Bilinear sample with clamped coordinates (estimation only)."""
    return ndimage.map_coordinates(im, [ys, xs], order=1, mode="nearest")


def _down(im):
    return ndimage.gaussian_filter(im, 1.0, mode="nearest")[::2, ::2]


def estimate_flow(I_t, I_t1) -> FlowField:
    """3-level iterative Lucas-Kanade (7x7 window, 3 warps per level).

    Windows whose structure tensor is near-singular get no update at that
    level, which keeps flat background from producing unbounded flow.
    """
    a, b = _gray(I_t), _gray(I_t1)
    if a.shape != b.shape:
        raise ValueError(f"frame shapes differ: {a.shape} vs {b.shape}")
    if min(a.shape) < MIN_SIZE:
        raise ValueError(f"frames must be at least {MIN_SIZE}px on each side for flow estimation")
    pyr_a, pyr_b = [a], [b]
    for _ in range(LK_LEVELS - 1):
        pyr_a.append(_down(pyr_a[-1]))
        pyr_b.append(_down(pyr_b[-1]))
    u = np.zeros(pyr_a[-1].shape)
    v = np.zeros(pyr_a[-1].shape)
    for lvl in range(LK_LEVELS - 1, -1, -1):
        A, B = pyr_a[lvl], pyr_b[lvl]
        if u.shape != A.shape:
            u = 2.0 * ndimage.zoom(u, 2, order=1, mode="nearest")[:A.shape[0], :A.shape[1]]
            v = 2.0 * ndimage.zoom(v, 2, order=1, mode="nearest")[:A.shape[0], :A.shape[1]]
        yy, xx = np.mgrid[0:A.shape[0], 0:A.shape[1]].astype(np.float64)
        gy_a, gx_a = np.gradient(A)
        for _ in range(LK_ITERS):
            Bw = _sample(B, yy + v, xx + u)
            gy_b, gx_b = np.gradient(Bw)
            ix, iy = 0.5 * (gx_a + gx_b), 0.5 * (gy_a + gy_b)
            it = Bw - A
            box = lambda z: ndimage.uniform_filter(z, LK_WINDOW, mode="nearest")
            sxx, syy, sxy = box(ix * ix) + LK_REG, box(iy * iy) + LK_REG, box(ix * iy)
            sxt, syt = box(ix * it), box(iy * it)
            det = sxx * syy - sxy * sxy
            min_eig = 0.5 * (sxx + syy - np.sqrt((sxx - syy) ** 2 + 4 * sxy * sxy))
            ok = min_eig > LK_MIN_EIG
            du = np.where(ok, (-syy * sxt + sxy * syt) / det, 0.0)
            dv = np.where(ok, (sxy * sxt - sxx * syt) / det, 0.0)
            u, v = u + du, v + dv
    return FlowField(u, v)


def warp(I_t1, flow: FlowField) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear ``I_t+1(x + F(x))``; returns (warped, valid mask). Out-of-bounds samples are invalid."""
    im = np.asarray(I_t1, dtype=np.float64)
    h, w = im.shape[:2]
    if flow.u.shape != (h, w):
        raise ValueError(f"flow shape {flow.u.shape} does not match frame {(h, w)}")
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    xs, ys = xx + flow.u, yy + flow.v
    valid = (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)
    xs_c = np.clip(xs, 0, w - 1)
    ys_c = np.clip(ys, 0, h - 1)
    x0 = np.floor(xs_c).astype(np.int64)
    y0 = np.floor(ys_c).astype(np.int64)
    fx, fy = xs_c - x0, ys_c - y0
    x1, y1 = np.minimum(x0 + 1, w - 1), np.minimum(y0 + 1, h - 1)
    if im.ndim == 3:
        fx, fy = fx[..., None], fy[..., None]
    out = ((1 - fx) * (1 - fy) * im[y0, x0] + fx * (1 - fy) * im[y0, x1]
           + (1 - fx) * fy * im[y1, x0] + fx * fy * im[y1, x1])
    return out, valid


def pair_warp_error(I_t, I_t1, flow: FlowField) -> float:
    warped, valid = warp(I_t1, flow)
    if not valid.any():
        raise ValueError("warp loss undefined: every warped pixel is out of bounds")
    diff = np.abs(warped - np.asarray(I_t, dtype=np.float64))
    if diff.ndim == 3:
        diff = diff.mean(axis=2)
    return float(diff[valid].mean())


def warp_loss(frames, flows=None) -> float:
    """Mean over consecutive pairs of the valid-pixel mean |warp(I_t+1, F_t) - I_t|.

    ``flows[t]`` is a FlowField or (u, v) for pair (t, t+1); missing flows are estimated.
    """
    frames = list(frames)
    if len(frames) < 2:
        raise ValueError("warp loss needs at least two frames")
    total = 0.0
    for t in range(len(frames) - 1):
        f = None if flows is None else flows[t]
        if f is None:
            f = estimate_flow(frames[t], frames[t + 1])
        elif not isinstance(f, FlowField):
            f = FlowField(*f)
        total += pair_warp_error(frames[t], frames[t + 1], f)
    return total / (len(frames) - 1)
