"""Per-pixel compositing kernels (forward and exact adjoint).

Tiles run in parallel; each tile owns the gradient rows of its own entry
list, and the final per-Gaussian reduction walks entries serially in list
order, so output is bit-identical for any thread count.
"""
import math

import numba
import numpy as np
from numba import njit, prange

numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

T_EPS = 1e-4

# entry-gradient row layout
G_MEAN = 0      # 2
G_CONIC = 2     # 3 (a, b, c)
G_LOGIT = 5     # 1
G_COLOR = 6     # 3
G_XCAM = 9      # 3
G_A = 12        # 9, row-major full matrix
G_MLP = 21      # 32
G_WIDTH = 53


@njit(inline="always")
def _depth_at(A, x, g, d0, d1, d2):
    ad0 = A[g, 0] * d0 + A[g, 1] * d1 + A[g, 2] * d2
    ad1 = A[g, 3] * d0 + A[g, 4] * d1 + A[g, 5] * d2
    ad2 = A[g, 6] * d0 + A[g, 7] * d1 + A[g, 8] * d2
    den = d0 * ad0 + d1 * ad1 + d2 * ad2
    num = ad0 * x[g, 0] + ad1 * x[g, 1] + ad2 * x[g, 2]
    return num, den, ad0, ad1, ad2


@njit(parallel=True, cache=True)
def forward_kernel(H, W, tile, bg, has_mlp, t_in, inv_extent, mean2d, conic, logit, color,
                   xcam, A, mlp, rays, offsets, entries, image, alpha, trans, ncontrib):
    tiles_x = (W + tile - 1) // tile
    n_tiles = tiles_x * ((H + tile - 1) // tile)
    for ti in prange(n_tiles):
        ty = ti // tiles_x
        tx = ti - ty * tiles_x
        start = offsets[ti]
        end = offsets[ti + 1]
        for py in range(ty * tile, min(H, (ty + 1) * tile)):
            for px in range(tx * tile, min(W, (tx + 1) * tile)):
                T = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                acc = 0.0
                k = start
                while k < end:
                    g = entries[k]
                    dx = px - mean2d[g, 0]
                    dy = py - mean2d[g, 1]
                    power = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) - conic[g, 1] * dx * dy
                    fall = math.exp(power)
                    e0 = 0.0
                    e1 = 0.0
                    e2 = 0.0
                    eo = 0.0
                    if has_mlp:
                        num, den, _, _, _ = _depth_at(A, xcam, g, rays[py, px, 0], rays[py, px, 1], rays[py, px, 2])
                        pt = num / den
                        if pt < 0.0:
                            pt = 0.0
                        u1 = pt * inv_extent
                        for j in range(4):
                            h = mlp[g, 2 * j] * t_in + mlp[g, 2 * j + 1] * u1 + mlp[g, 8 + j]
                            if h > 0.0:
                                e0 += mlp[g, 12 + j] * h
                                e1 += mlp[g, 16 + j] * h
                                e2 += mlp[g, 20 + j] * h
                                eo += mlp[g, 24 + j] * h
                        e0 += mlp[g, 28]
                        e1 += mlp[g, 29]
                        e2 += mlp[g, 30]
                        eo += mlp[g, 31]
                    s = 1.0 / (1.0 + math.exp(-(logit[g] + eo)))
                    a = s * fall
                    w = a * T
                    c0 += (color[g, 0] + e0) * w
                    c1 += (color[g, 1] + e1) * w
                    c2 += (color[g, 2] + e2) * w
                    acc += w
                    T = T * (1.0 - a)
                    k += 1
                    # the saturating splat still contributes; only those behind it are skipped
                    if T < T_EPS:
                        break
                image[py, px, 0] = c0 + T * bg[0]
                image[py, px, 1] = c1 + T * bg[1]
                image[py, px, 2] = c2 + T * bg[2]
                alpha[py, px] = acc
                trans[py, px] = T
                ncontrib[py, px] = k - start


@njit(parallel=True, cache=True)
def backward_kernel(H, W, tile, bg, has_mlp, t_in, inv_extent, mean2d, conic, logit, color,
                    xcam, A, mlp, rays, offsets, entries, ncontrib, dimage, entry_grad):
    tiles_x = (W + tile - 1) // tile
    n_tiles = tiles_x * ((H + tile - 1) // tile)
    for ti in prange(n_tiles):
        ty = ti // tiles_x
        tx = ti - ty * tiles_x
        start = offsets[ti]
        end = offsets[ti + 1]
        n_max = end - start
        a_buf = np.empty(n_max)
        t_buf = np.empty(n_max)
        s_buf = np.empty(n_max)
        f_buf = np.empty(n_max)
        c_buf = np.empty((n_max, 3))
        pre_buf = np.empty((n_max, 4))
        u_buf = np.empty(n_max)
        pt_buf = np.empty(n_max)
        for py in range(ty * tile, min(H, (ty + 1) * tile)):
            for px in range(tx * tile, min(W, (tx + 1) * tile)):
                n = ncontrib[py, px]
                g0 = dimage[py, px, 0]
                g1 = dimage[py, px, 1]
                g2 = dimage[py, px, 2]
                if n == 0 or (g0 == 0.0 and g1 == 0.0 and g2 == 0.0):
                    continue
                d0 = rays[py, px, 0]
                d1 = rays[py, px, 1]
                d2 = rays[py, px, 2]
                T = 1.0
                for i in range(n):
                    g = entries[start + i]
                    dx = px - mean2d[g, 0]
                    dy = py - mean2d[g, 1]
                    power = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) - conic[g, 1] * dx * dy
                    fall = math.exp(power)
                    e0 = 0.0
                    e1 = 0.0
                    e2 = 0.0
                    eo = 0.0
                    if has_mlp:
                        num, den, _, _, _ = _depth_at(A, xcam, g, d0, d1, d2)
                        pt = num / den
                        pt_buf[i] = pt
                        if pt < 0.0:
                            pt = 0.0
                        u1 = pt * inv_extent
                        u_buf[i] = u1
                        for j in range(4):
                            h = mlp[g, 2 * j] * t_in + mlp[g, 2 * j + 1] * u1 + mlp[g, 8 + j]
                            pre_buf[i, j] = h
                            if h > 0.0:
                                e0 += mlp[g, 12 + j] * h
                                e1 += mlp[g, 16 + j] * h
                                e2 += mlp[g, 20 + j] * h
                                eo += mlp[g, 24 + j] * h
                        e0 += mlp[g, 28]
                        e1 += mlp[g, 29]
                        e2 += mlp[g, 30]
                        eo += mlp[g, 31]
                    s = 1.0 / (1.0 + math.exp(-(logit[g] + eo)))
                    a = s * fall
                    a_buf[i] = a
                    t_buf[i] = T
                    s_buf[i] = s
                    f_buf[i] = fall
                    c_buf[i, 0] = color[g, 0] + e0
                    c_buf[i, 1] = color[g, 1] + e1
                    c_buf[i, 2] = color[g, 2] + e2
                    T = T * (1.0 - a)
                r0 = bg[0]
                r1 = bg[1]
                r2 = bg[2]
                for i in range(n - 1, -1, -1):
                    k = start + i
                    g = entries[k]
                    a = a_buf[i]
                    T = t_buf[i]
                    w = a * T
                    dc0 = w * g0
                    dc1 = w * g1
                    dc2 = w * g2
                    da = T * ((c_buf[i, 0] - r0) * g0 + (c_buf[i, 1] - r1) * g1 + (c_buf[i, 2] - r2) * g2)
                    r0 = c_buf[i, 0] * a + (1.0 - a) * r0
                    r1 = c_buf[i, 1] * a + (1.0 - a) * r1
                    r2 = c_buf[i, 2] * a + (1.0 - a) * r2
                    s = s_buf[i]
                    fall = f_buf[i]
                    dz = da * fall * s * (1.0 - s)
                    dpow = da * s * fall
                    dx = px - mean2d[g, 0]
                    dy = py - mean2d[g, 1]
                    entry_grad[k, G_MEAN + 0] += dpow * (conic[g, 0] * dx + conic[g, 1] * dy)
                    entry_grad[k, G_MEAN + 1] += dpow * (conic[g, 1] * dx + conic[g, 2] * dy)
                    entry_grad[k, G_CONIC + 0] += -0.5 * dx * dx * dpow
                    entry_grad[k, G_CONIC + 1] += -dx * dy * dpow
                    entry_grad[k, G_CONIC + 2] += -0.5 * dy * dy * dpow
                    entry_grad[k, G_LOGIT] += dz
                    entry_grad[k, G_COLOR + 0] += dc0
                    entry_grad[k, G_COLOR + 1] += dc1
                    entry_grad[k, G_COLOR + 2] += dc2
                    if has_mlp:
                        dout0 = dc0
                        dout1 = dc1
                        dout2 = dc2
                        dout3 = dz
                        entry_grad[k, G_MLP + 28] += dout0
                        entry_grad[k, G_MLP + 29] += dout1
                        entry_grad[k, G_MLP + 30] += dout2
                        entry_grad[k, G_MLP + 31] += dout3
                        du1 = 0.0
                        for j in range(4):
                            h = pre_buf[i, j]
                            if h > 0.0:
                                entry_grad[k, G_MLP + 12 + j] += dout0 * h
                                entry_grad[k, G_MLP + 16 + j] += dout1 * h
                                entry_grad[k, G_MLP + 20 + j] += dout2 * h
                                entry_grad[k, G_MLP + 24 + j] += dout3 * h
                                dh = (mlp[g, 12 + j] * dout0 + mlp[g, 16 + j] * dout1
                                      + mlp[g, 20 + j] * dout2 + mlp[g, 24 + j] * dout3)
                                entry_grad[k, G_MLP + 2 * j] += dh * t_in
                                entry_grad[k, G_MLP + 2 * j + 1] += dh * u_buf[i]
                                entry_grad[k, G_MLP + 8 + j] += dh
                                du1 += dh * mlp[g, 2 * j + 1]
                        if pt_buf[i] > 0.0 and du1 != 0.0:
                            dpt = du1 * inv_extent
                            num, den, ad0, ad1, ad2 = _depth_at(A, xcam, g, d0, d1, d2)
                            entry_grad[k, G_XCAM + 0] += dpt * ad0 / den
                            entry_grad[k, G_XCAM + 1] += dpt * ad1 / den
                            entry_grad[k, G_XCAM + 2] += dpt * ad2 / den
                            q = num / (den * den)
                            x0 = xcam[g, 0]
                            x1 = xcam[g, 1]
                            x2 = xcam[g, 2]
                            dd0 = d0
                            for r in range(3):
                                if r == 0:
                                    dr = d0
                                elif r == 1:
                                    dr = d1
                                else:
                                    dr = d2
                                entry_grad[k, G_A + 3 * r + 0] += dpt * (dr * x0 / den - q * dr * dd0)
                                entry_grad[k, G_A + 3 * r + 1] += dpt * (dr * x1 / den - q * dr * d1)
                                entry_grad[k, G_A + 3 * r + 2] += dpt * (dr * x2 / den - q * dr * d2)


@njit(cache=True)
def reduce_entries(entries, entry_grad, n_gauss):
    out = np.zeros((n_gauss, entry_grad.shape[1]))
    for k in range(entries.shape[0]):
        g = entries[k]
        for c in range(entry_grad.shape[1]):
            out[g, c] += entry_grad[k, c]
    return out
