"""EWA projection of 3D Gaussians, ray/Gaussian peak depth, and their adjoints."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NEAR = 0.2
COV2D_FLOOR = 0.3
SH_C1 = 0.4886025119029199


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """(N, 4) unit quaternions (w, x, y, z) -> (N, 3, 3)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    return np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=1).reshape(-1, 3, 3)


def quat_to_rotmat_backward(q: np.ndarray, g: np.ndarray) -> np.ndarray:
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g = g.reshape(-1, 9)
    gw = 2 * (-z * g[:, 1] + y * g[:, 2] + z * g[:, 3] - x * g[:, 5] - y * g[:, 6] + x * g[:, 7])
    gx = 2 * (y * g[:, 1] + z * g[:, 2] + y * g[:, 3] - 2 * x * g[:, 4] - w * g[:, 5]
              + z * g[:, 6] + w * g[:, 7] - 2 * x * g[:, 8])
    gy = 2 * (-2 * y * g[:, 0] + x * g[:, 1] + w * g[:, 2] + x * g[:, 3] + z * g[:, 5]
              - w * g[:, 6] + z * g[:, 7] - 2 * y * g[:, 8])
    gz = 2 * (-2 * z * g[:, 0] - w * g[:, 1] + x * g[:, 2] + w * g[:, 3] - 2 * z * g[:, 4]
              + y * g[:, 5] + x * g[:, 6] + y * g[:, 7])
    return np.stack([gw, gx, gy, gz], axis=1)


def normalize_backward(v: np.ndarray, g: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v, axis=1, keepdims=True)
    u = v / n
    return (g - u * np.sum(u * g, axis=1, keepdims=True)) / n


@dataclass(frozen=True)
class Splat2D:
    gaussian_index: int
    mean2d: np.ndarray
    cov2d: np.ndarray
    view_depth: float
    intersect_depth: float | None = None


@dataclass
class Projection:
    """Per-Gaussian projection quantities (all N Gaussians, float64)."""

    x: np.ndarray          # camera-space means (N, 3)
    mean2d: np.ndarray     # (N, 2)
    cov3d_cam: np.ndarray  # (N, 3, 3)
    cov2d: np.ndarray      # (N, 2, 2)
    conic: np.ndarray      # (N, 3) = (a, b, c) of the inverse 2D covariance
    A: np.ndarray          # (N, 3, 3) inverse camera-space 3D covariance
    radius: np.ndarray     # (N,) 3-sigma pixel radius
    visible: np.ndarray    # (N,) bool
    # backward state
    q_unit: np.ndarray
    Rq: np.ndarray
    Q: np.ndarray
    M: np.ndarray
    J: np.ndarray
    scale: np.ndarray
    q_raw: np.ndarray


def project_arrays(mu, rot, scale, cam) -> Projection:
    mu = np.asarray(mu, dtype=np.float64)
    q_raw = np.asarray(rot, dtype=np.float64)
    scale = np.asarray(scale, dtype=np.float64)
    R, T = cam.R, cam.T
    q = q_raw / np.linalg.norm(q_raw, axis=1, keepdims=True)
    Rq = quat_to_rotmat(q)
    M = Rq * scale[:, None, :]
    Q = R @ Rq
    x = mu @ R.T + T
    z = x[:, 2]
    safe_z = np.where(z > NEAR, z, 1.0)
    Mc = Q * scale[:, None, :]
    cov3d_cam = Mc @ Mc.transpose(0, 2, 1)
    n = len(mu)
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = cam.fx / safe_z
    J[:, 0, 2] = -cam.fx * x[:, 0] / safe_z ** 2
    J[:, 1, 1] = cam.fy / safe_z
    J[:, 1, 2] = -cam.fy * x[:, 1] / safe_z ** 2
    cov2d = J @ cov3d_cam @ J.transpose(0, 2, 1) + COV2D_FLOOR * np.eye(2)
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    conic = np.stack([cov2d[:, 1, 1] / det, -cov2d[:, 0, 1] / det, cov2d[:, 0, 0] / det], axis=1)
    mean2d = np.stack([cam.fx * x[:, 0] / safe_z + cam.cx, cam.fy * x[:, 1] / safe_z + cam.cy], axis=1)
    A = (Q / scale[:, None, :] ** 2) @ Q.transpose(0, 2, 1)
    mid = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1])
    lam = mid + np.sqrt(np.maximum(mid ** 2 - det, 0.1))
    radius = np.ceil(3.0 * np.sqrt(lam))
    W, H = cam.width, cam.height
    visible = (
        (z > NEAR)
        & (mean2d[:, 0] + radius >= -0.5) & (mean2d[:, 0] - radius <= W - 0.5)
        & (mean2d[:, 1] + radius >= -0.5) & (mean2d[:, 1] - radius <= H - 0.5)
    )
    return Projection(x, mean2d, cov3d_cam, cov2d, conic, A, radius, visible, q, Rq, Q, M, J, scale, q_raw)


def project_backward(p: Projection, cam, g_mean2d, g_conic, g_x_extra=None, g_A=None):
    """Chain projection-space gradients back to (mu, rot, scale).

    ``g_conic`` is wrt the (a, b, c) parametrization where b appears twice in
    the quadratic form; ``g_A`` is wrt the full 3x3 matrix.
    """
    R = cam.R
    fx, fy = cam.fx, cam.fy
    x = p.x
    z = np.where(x[:, 2] > NEAR, x[:, 2], 1.0)
    n = len(x)
    ci = np.empty((n, 2, 2))
    ci[:, 0, 0], ci[:, 0, 1], ci[:, 1, 0], ci[:, 1, 1] = p.conic[:, 0], p.conic[:, 1], p.conic[:, 1], p.conic[:, 2]
    G = np.empty((n, 2, 2))
    G[:, 0, 0], G[:, 1, 1] = g_conic[:, 0], g_conic[:, 2]
    G[:, 0, 1] = G[:, 1, 0] = 0.5 * g_conic[:, 1]
    g_cov2d = -ci @ G @ ci
    g_cov3d_cam = p.J.transpose(0, 2, 1) @ g_cov2d @ p.J
    g_J = (g_cov2d + g_cov2d.transpose(0, 2, 1)) @ p.J @ p.cov3d_cam
    g_x = np.zeros((n, 3))
    g_x[:, 0] = -fx / z ** 2 * g_J[:, 0, 2] + fx / z * g_mean2d[:, 0]
    g_x[:, 1] = -fy / z ** 2 * g_J[:, 1, 2] + fy / z * g_mean2d[:, 1]
    g_x[:, 2] = (-fx / z ** 2 * g_J[:, 0, 0] + 2 * fx * x[:, 0] / z ** 3 * g_J[:, 0, 2]
                 - fy / z ** 2 * g_J[:, 1, 1] + 2 * fy * x[:, 1] / z ** 3 * g_J[:, 1, 2]
                 - fx * x[:, 0] / z ** 2 * g_mean2d[:, 0] - fy * x[:, 1] / z ** 2 * g_mean2d[:, 1])
    if g_x_extra is not None:
        g_x = g_x + g_x_extra
    g_cov3d = R.T @ g_cov3d_cam @ R
    g_M = (g_cov3d + g_cov3d.transpose(0, 2, 1)) @ p.M
    g_Rq = g_M * p.scale[:, None, :]
    g_scale = np.einsum("nij,nij->nj", g_M, p.Rq)
    if g_A is not None:
        g_A = g_A.reshape(n, 3, 3)
        inv_s2 = 1.0 / p.scale ** 2
        g_Q = (g_A + g_A.transpose(0, 2, 1)) @ p.Q * inv_s2[:, None, :]
        g_inv_s2 = np.einsum("nij,nik,njk->nk", g_A, p.Q, p.Q)
        g_scale = g_scale + g_inv_s2 * (-2.0 / p.scale ** 3)
        g_Rq = g_Rq + R.T @ g_Q
    g_q = normalize_backward(p.q_raw, quat_to_rotmat_backward(p.q_unit, g_Rq))
    g_mu = g_x @ R
    return g_mu, g_q, g_scale


def view_colors(mu, color, sh1, cam):
    """Base color plus the degree-1 view-dependent term (if present)."""
    color = np.asarray(color, dtype=np.float64)
    if sh1 is None:
        return color, None
    v = np.asarray(mu, dtype=np.float64) - cam.center
    d = v / np.linalg.norm(v, axis=1, keepdims=True)
    s = np.asarray(sh1, dtype=np.float64).reshape(-1, 3, 3)
    out = color + SH_C1 * (-d[:, 1:2] * s[:, 0] + d[:, 2:3] * s[:, 1] - d[:, 0:1] * s[:, 2])
    return out, (v, d, s)


def view_colors_backward(state, g_color):
    """Returns (g_mu, g_sh1) for the degree-1 term."""
    v, d, s = state
    g_sh = np.stack([-SH_C1 * d[:, 1:2] * g_color, SH_C1 * d[:, 2:3] * g_color,
                     -SH_C1 * d[:, 0:1] * g_color], axis=1)
    g_d = np.stack([
        -SH_C1 * np.sum(s[:, 2] * g_color, axis=1),
        -SH_C1 * np.sum(s[:, 0] * g_color, axis=1),
        SH_C1 * np.sum(s[:, 1] * g_color, axis=1),
    ], axis=1)
    return normalize_backward(v, g_d), g_sh.reshape(-1, 9)


def project(g, cam) -> Splat2D | None:
    """Project one Gaussian; ``None`` when culled."""
    p = project_arrays(g.mu[None], g.rot[None], g.scale[None], cam)
    if not p.visible[0]:
        return None
    return Splat2D(0, p.mean2d[0], p.cov2d[0], float(p.x[0, 2]))


def intersect_depth(origin, direction, mu, rot, scale) -> float:
    """Ray parameter of peak Gaussian density along ``origin + s * direction``.

    Closed form in the Gaussian's whitened frame, clamped to >= 0.
    """
    d = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(d) - 1.0) > 1e-6:
        raise ValueError("ray direction must be normalized")
    q = np.asarray(rot, dtype=np.float64)[None]
    Rq = quat_to_rotmat(q / np.linalg.norm(q))[0]
    s = np.asarray(scale, dtype=np.float64)
    o_g = (Rq.T @ (np.asarray(origin, dtype=np.float64) - np.asarray(mu, dtype=np.float64))) / s
    d_g = (Rq.T @ d) / s
    dd = float(d_g @ d_g)
    if not dd > 1e-300:
        raise ValueError("degenerate ray direction after whitening")
    return max(0.0, -float(o_g @ d_g) / dd)
