"""Stylization and reconstruction losses with analytic pixel gradients.

Conventions: squared-norm terms are per-element means, except the AdaIN
statistic loss which sums over channels. Perceptual terms read the fixed
feature pyramid from :mod:`dynstyle.features`; levels are 0-based in code, so
"levels 3-5" are indices 2..4.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp, softmax

from . import features as F

CONSISTENCY_LEVELS = (2, 3, 4)
STYLE_LEVELS = (0, 1, 2, 3, 4)
ZERO_NORM = 1e-12


@dataclass(frozen=True)
class LossWeights:
    consistency: float = 3.0
    style: float = 18.0
    id: float = 7.0
    illum: float = 1e-5
    ins: float = 1.0
    tau: float = 0.07
    n_samples: int = 64
    illum_sigma: float = 0.01

    def __post_init__(self):
        for name in ("consistency", "style", "id", "illum", "ins", "illum_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")
        if not self.tau > 0:
            raise ValueError("tau must be > 0")
        if int(self.n_samples) < 1:
            raise ValueError("n_samples must be a positive integer")


def _levels(p, default: Sequence[int]):
    if isinstance(p, F.FeaturePyramid):
        return [p.levels[i] for i in default]
    return [np.asarray(x, dtype=np.float64) for x in p]


def _check_pair(a, b, what):
    if len(a) != len(b) or any(x.shape != y.shape for x, y in zip(a, b)):
        raise ValueError(f"{what}: shape mismatch")


def _mse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


# ---------------------------------------------------------------------------
# style statistics


def style_loss(pyr_cs, pyr_s) -> float:
    """Sum over levels of ||mu(cs) - mu(s)||^2 + ||sigma(cs) - sigma(s)||^2 (channel sums)."""
    a, b = _levels(pyr_cs, STYLE_LEVELS), _levels(pyr_s, STYLE_LEVELS)
    _check_pair(a, b, "style_loss")
    total = 0.0
    for x, y in zip(a, b):
        sx, sy = F.stats(x), F.stats(y)
        total += float(np.sum((sx.mean - sy.mean) ** 2) + np.sum((sx.std - sy.std) ** 2))
    return total


def _style_level_grad(x, target: F.FeatureStats):
    c = x.shape[0]
    flat = x.reshape(c, -1)
    n = flat.shape[1]
    st = F.stats(x)
    g = 2.0 * (st.mean - target.mean)[:, None] / n
    ok = st.std > 0
    coef = np.where(ok, 2.0 * (st.std - target.std) / (n * np.where(ok, st.std, 1.0)), 0.0)
    g = g + coef[:, None] * (flat - st.mean[:, None])
    return g.reshape(x.shape)


# ---------------------------------------------------------------------------
# identity / illumination


def identity_loss(I_cc, I_c, I_ss, I_s) -> float:
    return _mse(I_cc, I_c) + _mse(I_ss, I_s)


def illumination_loss(stylize_fn: Callable, I_c, I_s, seed: int, sigma: float = 0.01) -> float:
    """MSE between G(I_c, I_s) and G(I_c + eps, I_s), eps ~ N(0, sigma^2) from ``seed``."""
    I_c = np.asarray(I_c, dtype=np.float64)
    eps = np.random.default_rng(seed).normal(0.0, 1.0, size=I_c.shape) * sigma
    return _mse(stylize_fn(I_c, I_s), stylize_fn(I_c + eps, I_s))


# ---------------------------------------------------------------------------
# inner-channel similarity


def _unit_columns(x):
    """Cross-channel vectors per position, L2-normalized; zero vectors -> e1."""
    c = x.shape[0]
    v = x.reshape(c, -1).T
    norm = np.linalg.norm(v, axis=1)
    zero = norm < ZERO_NORM
    u = v / np.where(zero, 1.0, norm)[:, None]
    u[zero] = 0.0
    u[zero, 0] = 1.0
    return v, u, norm, zero


def inner_channel_loss(level) -> float:
    """(1/hw) * min_i sum_j (1 - cos(f_i, f_j)) over spatial positions."""
    x = np.asarray(level, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty feature map")
    _, u, _, _ = _unit_columns(x)
    n = u.shape[0]
    s = u.sum(axis=0)
    scores = n - u @ s
    # every pair term 1 - cos is >= 0; clamp the rounding residue
    return max(0.0, float(np.min(scores))) / n


def _inner_channel_grad(x):
    v, u, norm, zero = _unit_columns(x)
    n = u.shape[0]
    s = u.sum(axis=0)
    scores = n - u @ s
    i = int(np.argmin(scores))
    g_u = np.tile(-u[i], (n, 1))
    g_u[i] -= s
    g_u /= n
    g_v = (g_u - u * np.sum(u * g_u, axis=1, keepdims=True)) / np.where(zero, 1.0, norm)[:, None]
    g_v[zero] = 0.0
    return max(0.0, float(scores[i])) / n, g_v.T.reshape(x.shape)


# ---------------------------------------------------------------------------
# local contrastive


@dataclass
class LocalDifferenceSet:
    anchors: np.ndarray     # (N, 2) (y, x)
    neighbors: np.ndarray   # (N, 8, 2)
    diffs_g: np.ndarray     # (8N, C)
    diffs_c: np.ndarray     # (8N, C)

    def __post_init__(self):
        if len(self.diffs_g) != len(self.diffs_c) or len(self.diffs_g) != 8 * len(self.anchors):
            raise ValueError("a local difference set needs 8 diffs per anchor on both maps")


_OFFSETS = np.array([(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0)])


def sample_indices(h: int, w: int, n: int, seed) -> tuple[np.ndarray, np.ndarray]:
    """Seeded anchors and their 8 jittered neighbors.

    Anchors are drawn uniformly without replacement from the interior
    [1, h-2] x [1, w-2] (at most (h-2)(w-2) of them). Neighbor k sits at
    base offset k plus a {-1, 0, 1}^2 jitter, clamped to the map; a jittered
    position that hits the anchor or an earlier neighbor of the same anchor
    falls back to the first free base offset, so every anchor has 8 distinct
    neighbors.
    """
    if h < 3 or w < 3:
        raise ValueError(f"map {h}x{w} too small for a one-cell sampling margin")
    rng = np.random.default_rng(seed)
    iw = w - 2
    pick = rng.choice((h - 2) * iw, size=min(n, (h - 2) * iw), replace=False)
    anchors = np.stack([pick // iw + 1, pick % iw + 1], axis=1)
    jitter = rng.integers(-1, 2, size=(len(anchors), 8, 2))
    nb = np.empty((len(anchors), 8, 2), dtype=np.int64)
    for a, (ay, ax) in enumerate(anchors):
        used = {(int(ay), int(ax))}
        for k in range(8):
            y = min(max(ay + _OFFSETS[k, 0] + jitter[a, k, 0], 0), h - 1)
            x = min(max(ax + _OFFSETS[k, 1] + jitter[a, k, 1], 0), w - 1)
            if (y, x) in used:
                for oy, ox in _OFFSETS:
                    if (ay + oy, ax + ox) not in used:
                        y, x = ay + oy, ax + ox
                        break
            used.add((int(y), int(x)))
            nb[a, k] = (y, x)
    return anchors, nb


def _gather_diffs(m, anchors, nb):
    a = m[:, anchors[:, 0], anchors[:, 1]].T            # (N, C)
    b = m[:, nb[..., 0], nb[..., 1]]                    # (C, N, 8)
    return (a[:, None, :] - np.moveaxis(b, 0, -1)).reshape(-1, m.shape[0])


def sample_local_differences(map_g, map_c, n: int, seed) -> LocalDifferenceSet:
    map_g = np.asarray(map_g, dtype=np.float64)
    map_c = np.asarray(map_c, dtype=np.float64)
    if map_g.shape[1:] != map_c.shape[1:]:
        raise ValueError("maps must share spatial shape")
    anchors, nb = sample_indices(map_g.shape[1], map_g.shape[2], n, seed)
    return LocalDifferenceSet(anchors, nb, _gather_diffs(map_g, anchors, nb), _gather_diffs(map_c, anchors, nb))


def _normalize_rows(d):
    norm = np.linalg.norm(d, axis=1)
    zero = norm < ZERO_NORM
    u = d / np.where(zero, 1.0, norm)[:, None]
    u[zero] = 0.0
    u[zero, 0] = 1.0
    return u, norm, zero


def _lcl(dg, dc, tau, need_grad=False):
    ug, ng, zg = _normalize_rows(dg)
    uc, _, _ = _normalize_rows(dc)
    s = ug @ uc.T / tau
    m = len(s)
    loss = float(np.mean(logsumexp(s, axis=1) - np.diag(s)))
    if not need_grad:
        return loss, None
    p = softmax(s, axis=1)
    p[np.arange(m), np.arange(m)] -= 1.0
    g_ug = p @ uc / (tau * m)
    g_dg = (g_ug - ug * np.sum(ug * g_ug, axis=1, keepdims=True)) / np.where(zg, 1.0, ng)[:, None]
    g_dg[zg] = 0.0
    return loss, g_dg


def local_contrastive_loss(ds: LocalDifferenceSet, tau: float = 0.07) -> float:
    """InfoNCE over aligned local differences, averaged over the 8N rows."""
    return _lcl(ds.diffs_g, ds.diffs_c, tau)[0]


def _lcl_map_grad(g_d, m_shape, anchors, nb):
    c = m_shape[0]
    g = np.zeros(m_shape)
    gd = g_d.reshape(len(anchors), 8, c)
    np.add.at(g, (slice(None), anchors[:, 0], anchors[:, 1]), gd.sum(axis=1).T)
    np.add.at(g, (slice(None), nb[..., 0].ravel(), nb[..., 1].ravel()), -gd.reshape(-1, c).T)
    return g


# ---------------------------------------------------------------------------
# content / consistency


def content_loss(pyr_cs, pyr_c) -> float:
    """Mean over the given levels of per-element MSE (levels 3-5 for a pyramid)."""
    a, b = _levels(pyr_cs, CONSISTENCY_LEVELS), _levels(pyr_c, CONSISTENCY_LEVELS)
    _check_pair(a, b, "content_loss")
    return float(sum(_mse(x, y) for x, y in zip(a, b)) / len(a))


def lcl_levels(att_cs, att_c, n: int, seed, tau: float) -> float:
    total = 0.0
    for k, (x, y) in enumerate(zip(att_cs, att_c)):
        if min(x.shape[1:]) < 3:
            continue
        ds = sample_local_differences(x, y, n, (seed, k))
        total += local_contrastive_loss(ds, tau)
    return total


def consistency_loss(pyr_cs, pyr_c, n: int = 64, seed=0, tau: float = 0.07) -> tuple[float, float, float]:
    """L_lcl + L_content on attended levels 3-5; returns (total, lcl, content)."""
    att_cs = [F.attend(x) for x in _levels(pyr_cs, CONSISTENCY_LEVELS)]
    att_c = [F.attend(x) for x in _levels(pyr_c, CONSISTENCY_LEVELS)]
    lcl = lcl_levels(att_cs, att_c, n, seed, tau)
    cont = content_loss(att_cs, att_c)
    return lcl + cont, lcl, cont


# ---------------------------------------------------------------------------
# image-space terms


def tv_loss(image) -> float:
    """mean |dI/dx| + mean |dI/dy| over valid finite-difference positions."""
    im = np.asarray(image, dtype=np.float64)
    if im.shape[0] < 2 or im.shape[1] < 2:
        raise ValueError("tv_loss needs H, W >= 2")
    return float(np.mean(np.abs(np.diff(im, axis=1))) + np.mean(np.abs(np.diff(im, axis=0))))


def tv_grad(image) -> np.ndarray:
    im = np.asarray(image, dtype=np.float64)
    g = np.zeros_like(im)
    sx = np.sign(np.diff(im, axis=1)) / np.diff(im, axis=1).size
    sy = np.sign(np.diff(im, axis=0)) / np.diff(im, axis=0).size
    g[:, 1:] += sx
    g[:, :-1] -= sx
    g[1:] += sy
    g[:-1] -= sy
    return g


def reconstruction_loss(render, target) -> float:
    r = np.asarray(render, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if r.shape != t.shape:
        raise ValueError(f"shape mismatch {r.shape} vs {t.shape}")
    return float(np.mean(np.abs(r - t))) + tv_loss(r)


def reconstruction_loss_grad(render, target) -> tuple[float, float, np.ndarray]:
    """Returns (l1, tv, dL/drender)."""
    r = np.asarray(render, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if r.shape != t.shape:
        raise ValueError(f"shape mismatch {r.shape} vs {t.shape}")
    l1 = float(np.mean(np.abs(r - t)))
    return l1, tv_loss(r), np.sign(r - t) / r.size + tv_grad(r)


# ---------------------------------------------------------------------------
# Gram


def gram(fmap) -> np.ndarray:
    f = np.asarray(fmap, dtype=np.float64)
    if f.size == 0:
        raise ValueError("empty feature map")
    flat = f.reshape(f.shape[0], -1)
    return flat @ flat.T / f.size


def gram_style_distance(pyr_a, pyr_b) -> float:
    a, b = _levels(pyr_a, STYLE_LEVELS), _levels(pyr_b, STYLE_LEVELS)
    _check_pair(a, b, "gram_style_distance")
    return float(sum(_mse(gram(x), gram(y)) for x, y in zip(a, b)))


# ---------------------------------------------------------------------------
# total objective


COMPONENTS = ("consistency", "style", "id", "illum", "ins")


def weighted_total(components: dict, w: LossWeights) -> float:
    return sum(getattr(w, k) * float(components[k]) for k in COMPONENTS)


@dataclass
class HgstTargets:
    """Everything the stylization objective needs besides the optimized image."""

    content: np.ndarray
    style: np.ndarray
    pyr_c: F.FeaturePyramid
    pyr_s: F.FeaturePyramid
    att_c: list
    style_stats: list
    id_value: float = 0.0
    illum_value: float = 0.0


def prepare_targets(content, style, id_value: float = 0.0, illum_value: float = 0.0) -> HgstTargets:
    content = np.asarray(content, dtype=np.float64)
    style = np.asarray(style, dtype=np.float64)
    pyr_c, pyr_s = F.extract(content), F.extract(style)
    att_c = [F.attend(pyr_c.levels[i]) for i in CONSISTENCY_LEVELS]
    return HgstTargets(content, style, pyr_c, pyr_s, att_c, [F.stats(lv) for lv in pyr_s.levels],
                       float(id_value), float(illum_value))


def total_hgst_loss(image, targets: HgstTargets, w: LossWeights, seed=0, need_grad: bool = False):
    """Weighted stylization objective for image ``I_cs``.

    Returns (total, components, pixel_grad); ``pixel_grad`` is None unless
    ``need_grad``. The identity and illumination terms are constants wrt
    ``I_cs`` and enter only the value.
    """
    pyr, cache = F.extract(image, return_cache=True)
    level_grads = [None] * F.N_LEVELS
    comp = {"id": targets.id_value, "illum": targets.illum_value}

    style = 0.0
    for i in STYLE_LEVELS:
        st, tg = F.stats(pyr.levels[i]), targets.style_stats[i]
        style += float(np.sum((st.mean - tg.mean) ** 2) + np.sum((st.std - tg.std) ** 2))
        if need_grad and w.style:
            level_grads[i] = w.style * _style_level_grad(pyr.levels[i], tg)
    comp["style"] = style

    lcl = cont = ins = 0.0
    n_lv = len(CONSISTENCY_LEVELS)
    for k, i in enumerate(CONSISTENCY_LEVELS):
        x = pyr.levels[i]
        a, acache = F.attend(x, return_cache=True)
        b = targets.att_c[k]
        cont += _mse(a, b) / n_lv
        g_a = 2.0 * (a - b) / (a.size * n_lv) * w.consistency
        if min(a.shape[1:]) >= 3:
            anchors, nb = sample_indices(a.shape[1], a.shape[2], int(w.n_samples), (seed, k))
            l, g_d = _lcl(_gather_diffs(a, anchors, nb), _gather_diffs(b, anchors, nb), w.tau, need_grad)
            lcl += l
            if need_grad:
                g_a = g_a + w.consistency * _lcl_map_grad(g_d, a.shape, anchors, nb)
        val, g_ins = _inner_channel_grad(x)
        ins += val
        if need_grad:
            g = F.attend_backward(acache, g_a)
            if w.ins:
                g = g + w.ins * g_ins
            level_grads[i] = g if level_grads[i] is None else level_grads[i] + g
    comp["consistency"] = lcl + cont
    comp["lcl"] = lcl
    comp["content"] = cont
    comp["ins"] = ins
    total = weighted_total(comp, w)
    grad = F.extract_backward(cache, level_grads) if need_grad else None
    return total, comp, grad


# ---------------------------------------------------------------------------
# logging


@dataclass
class LossLog:
    """Append-only JSON-lines log of (step, component, value) records."""

    path: Path
    _fh: object = field(default=None, repr=False)

    def write(self, step: int, components: dict) -> None:
        if self._fh is None:
            Path(self.path).parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "a", encoding="utf-8")
        for name in sorted(components):
            self._fh.write(json.dumps({"step": int(step), "component": name,
                                       "value": float(components[name])}) + "\n")
        self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None
