"""Central finite-difference checks for every hand-written backward pass.

Error measure per checked coordinate: |analytic - fd| / max(|analytic|, |fd|, 1e-3),
i.e. relative error with an absolute floor of 1e-6 once the tolerance 1e-3
is applied.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import losses as L
from .camera import look_at
from .deformation import DeformationField
from .raster.render import GaussianParams, render_backward, render_params
from .style_mlp import N_PARAMS, mlp_backward, mlp_forward, mlp_init_batch, unflatten

TOL = 1e-3
MAG_FLOOR = 1e-3


def rel_err(a, f) -> float:
    return float(abs(a - f) / max(abs(a), abs(f), MAG_FLOOR))


@dataclass
class SuiteResult:
    name: str
    instances: int
    checked: int
    max_rel_err: float

    @property
    def ok(self) -> bool:
        return self.max_rel_err < TOL


# ---------------------------------------------------------------------------
# rasterizer


def random_render_problem(seed: int, n: int = 8, size: int = 16, *, mlp: bool = True, sh: bool = True,
                          deform: bool = True):
    rng = np.random.default_rng(seed)
    cam = look_at(np.array([0.3, -0.2, -3.0]) + rng.normal(0, 0.1, 3), np.zeros(3), fx=18.0, fy=18.0,
                  width=size, height=size)
    p = GaussianParams(
        mu=rng.uniform(-0.6, 0.6, (n, 3)),
        rot=rng.normal(size=(n, 4)),
        scale=rng.uniform(0.12, 0.35, (n, 3)),
        logit=rng.normal(0.0, 1.0, n),
        color=rng.random((n, 3)),
        sh1=rng.normal(0, 0.2, (n, 9)) if sh else None,
        mlp=None,
    )
    if mlp:
        m = mlp_init_batch(n, seed)
        m[:, 12:] = rng.normal(0, 0.3, (n, 20))
        p.mlp = m
    field = DeformationField.initialized(seed) if deform else None
    if field is not None:
        prm = field.params.astype(np.float64) + rng.normal(0, 0.05, field.params.shape)
        field = DeformationField(prm.astype(np.float32))
    t = float(rng.uniform(0.1, 0.9))
    upstream = rng.normal(size=(size, size, 3))
    return p, cam, field, t, upstream


def _render_loss(p, cam, field, t, upstream, dparams=None):
    out = render_params(p, cam, t, background=np.array([0.1, 0.2, 0.3]), extent=1.5, deformation=field,
                        deform_params=dparams)
    return float(np.sum(out.image * upstream)), out


def check_rasterizer(seed: int, samples: int = 6, h: float = 1e-6) -> tuple[float, int]:
    p, cam, field, t, up = random_render_problem(seed)
    dparams = field.params.astype(np.float64)
    _, out = _render_loss(p, cam, field, t, up, dparams)
    g = render_backward(out, up)
    rng = np.random.default_rng(seed + 7919)
    worst, checked = 0.0, 0
    groups = ["mu", "rot", "scale", "logit", "color", "sh1", "mlp", "deform"]
    for name in groups:
        base = dparams if name == "deform" else getattr(p, name)
        grad = g[name]
        flat_idx = rng.choice(base.size, size=min(samples, base.size), replace=False)
        for fi in flat_idx:
            idx = np.unravel_index(fi, base.shape)
            vals = []
            for sgn in (1.0, -1.0):
                q = p.copy()
                dp = dparams.copy()
                tgt = dp if name == "deform" else getattr(q, name)
                tgt[idx] += sgn * h
                vals.append(_render_loss(q, cam, field, t, up, dp)[0])
            fd = (vals[0] - vals[1]) / (2 * h)
            worst = max(worst, rel_err(grad[idx], fd))
            checked += 1
    return worst, checked


# ---------------------------------------------------------------------------
# style MLP


def check_mlp(seed: int, h: float = 1e-6) -> tuple[float, int]:
    rng = np.random.default_rng(seed)
    flat = rng.normal(0, 0.7, N_PARAMS)
    t, depth = float(rng.random()), float(rng.uniform(0.1, 2.0))
    up = rng.normal(size=4)

    def f(v, tt, dd):
        rgb, op, _ = mlp_forward(unflatten(v), tt, dd, return_cache=True)
        return float(np.dot(np.append(rgb, op), up))

    _, _, cache = mlp_forward(unflatten(flat), t, depth, return_cache=True)
    g_p, g_in = mlp_backward(cache, up)
    worst, checked = 0.0, 0
    for i in range(N_PARAMS):
        e = np.zeros(N_PARAMS)
        e[i] = h
        worst = max(worst, rel_err(g_p[i], (f(flat + e, t, depth) - f(flat - e, t, depth)) / (2 * h)))
        checked += 1
    for j, (dt, dd) in enumerate(((h, 0.0), (0.0, h))):
        fd = (f(flat, t + dt, depth + dd) - f(flat, t - dt, depth - dd)) / (2 * h)
        worst = max(worst, rel_err(g_in[j], fd))
        checked += 1
    return worst, checked


# ---------------------------------------------------------------------------
# stylization objective


def random_style_problem(seed: int, size: int = 16):
    rng = np.random.default_rng(seed)
    content, style, image = rng.random((size, size, 3)), rng.random((size, size, 3)), rng.random((size, size, 3))
    return image, L.prepare_targets(content, style, id_value=rng.random(), illum_value=rng.random())


def check_hgst(seed: int, samples: int = 12, h: float = 1e-6) -> tuple[float, int]:
    image, targets = random_style_problem(seed)
    w = L.LossWeights()
    _, _, g = L.total_hgst_loss(image, targets, w, seed=seed, need_grad=True)
    rng = np.random.default_rng(seed + 104729)
    worst = 0.0
    idx_all = rng.choice(image.size, size=samples, replace=False)
    for fi in idx_all:
        idx = np.unravel_index(fi, image.shape)
        a, b = image.copy(), image.copy()
        a[idx] += h
        b[idx] -= h
        fd = (L.total_hgst_loss(a, targets, w, seed=seed)[0] - L.total_hgst_loss(b, targets, w, seed=seed)[0]) / (2 * h)
        worst = max(worst, rel_err(g[idx], fd))
    # one random direction over all pixels
    d = rng.normal(size=image.shape)
    fd = (L.total_hgst_loss(image + h * d, targets, w, seed=seed)[0]
          - L.total_hgst_loss(image - h * d, targets, w, seed=seed)[0]) / (2 * h)
    worst = max(worst, rel_err(float(np.sum(g * d)), fd))
    return worst, samples + 1


SUITES = {"rasterizer": check_rasterizer, "style_mlp": check_mlp, "hgst_loss": check_hgst}


def run_suites(seed: int = 0, instances: int = 20) -> list[SuiteResult]:
    results = []
    for name, fn in SUITES.items():
        worst, checked = 0.0, 0
        for i in range(instances):
            w, c = fn(seed * 1000 + i)
            worst, checked = max(worst, w), checked + c
        results.append(SuiteResult(name, instances, checked, worst))
    return results
