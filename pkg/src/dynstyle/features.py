"""Fixed random-weight feature pyramid, channel statistics and parameter-free attention.

The extractor is a frozen cascade of 3x3 conv + ReLU blocks with 2x average
pooling between levels; its weights are drawn once from seed 42. It stands in
for a pretrained VGG19 in every perceptual loss: all the losses only assume
generic multi-channel maps.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .imageio import read_imgf32

CHANNELS = (8, 16, 32, 64, 64)
N_LEVELS = 5
WEIGHT_SEED = 42


@lru_cache(maxsize=1)
def extractor_weights() -> tuple:
    rng = np.random.default_rng(WEIGHT_SEED)
    weights, c_in = [], 3
    for c_out in CHANNELS:
        w = rng.normal(0.0, np.sqrt(2.0 / (9 * c_in)), size=(c_out, c_in, 3, 3)).astype(np.float32)
        b = rng.normal(0.0, 0.01, size=c_out).astype(np.float32)
        w.setflags(write=False)
        b.setflags(write=False)
        weights.append((w, b))
        c_in = c_out
    return tuple(weights)


@dataclass
class FeaturePyramid:
    levels: list

    def __post_init__(self):
        if len(self.levels) != N_LEVELS:
            raise ValueError(f"a feature pyramid has exactly {N_LEVELS} levels")
        for lv in self.levels:
            if not np.all(np.isfinite(lv)):
                raise ValueError("non-finite feature values")

    def __getitem__(self, i):
        return self.levels[i]


@dataclass
class FeatureStats:
    mean: np.ndarray
    std: np.ndarray


@dataclass
class _PyramidCache:
    inputs: list      # conv input per level (C, H, W)
    pre: list         # pre-activation per level


def _conv3x3(x, w, b):
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # (Cin, H, W, 3, 3)
    return np.tensordot(w.astype(np.float64), win, axes=([1, 2, 3], [0, 3, 4])) + b[:, None, None]


def _conv3x3_backward_input(g, w):
    gp = np.pad(g, ((0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(gp, (3, 3), axis=(1, 2))  # (Cout, H, W, 3, 3)
    wf = w[:, :, ::-1, ::-1].astype(np.float64)
    return np.tensordot(wf, win, axes=([0, 2, 3], [0, 3, 4]))


def _pool(x):
    c, h, w = x.shape
    return x.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))


def _pool_backward(g):
    return np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25


def _check_dims(image):
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {image.shape}")
    h, w = image.shape[:2]
    if h < 16 or w < 16 or h % 16 or w % 16:
        raise ValueError(f"image dimensions must be multiples of 16 and >= 16, got {h}x{w}")


def extract(image, return_cache: bool = False):
    """(H, W, 3) image -> 5-level pyramid of (C, H / 2^i, W / 2^i) maps."""
    image = np.asarray(image, dtype=np.float64)
    _check_dims(image)
    x = np.moveaxis(image, -1, 0)
    levels, inputs, pres = [], [], []
    for i, (w, b) in enumerate(extractor_weights()):
        if i > 0:
            x = _pool(x)
        inputs.append(x)
        pre = _conv3x3(x, w, b)
        pres.append(pre)
        x = np.maximum(pre, 0.0)
        levels.append(x)
    pyr = FeaturePyramid(levels)
    if return_cache:
        return pyr, _PyramidCache(inputs, pres)
    return pyr


def extract_backward(cache: _PyramidCache, level_grads) -> np.ndarray:
    """Pixel gradient (H, W, 3) given per-level gradients (``None`` = zero)."""
    weights = extractor_weights()
    g_next = None
    for i in range(N_LEVELS - 1, -1, -1):
        g = np.zeros_like(cache.pre[i])
        if level_grads[i] is not None:
            g = g + level_grads[i]
        if g_next is not None:
            g = g + g_next
        g_pre = g * (cache.pre[i] > 0)
        g_in = _conv3x3_backward_input(g_pre, weights[i][0])
        g_next = _pool_backward(g_in) if i > 0 else g_in
    return np.moveaxis(g_next, 0, -1)


def stats(level: np.ndarray) -> FeatureStats:
    """Per-channel spatial mean and population standard deviation."""
    f = np.asarray(level, dtype=np.float64)
    if f.size == 0:
        raise ValueError("empty feature map")
    flat = f.reshape(f.shape[0], -1)
    mean = flat.mean(axis=1)
    std = np.sqrt(np.mean((flat - mean[:, None]) ** 2, axis=1))
    return FeatureStats(mean, std)


# ---------------------------------------------------------------------------
# attention


def _zscore(v, axis=None):
    m = v.mean(axis=axis, keepdims=True)
    s = np.sqrt(np.mean((v - m) ** 2, axis=axis, keepdims=True))
    ok = s > 1e-12
    z = np.where(ok, (v - m) / np.where(ok, s, 1.0), 0.0)
    return z, s, ok


def _zscore_backward(z, s, ok, g, axis=None):
    gm = g.mean(axis=axis, keepdims=True)
    gz = (g * z).mean(axis=axis, keepdims=True)
    return np.where(ok, (g - gm - z * gz) / np.where(ok, s, 1.0), 0.0)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def attend(level: np.ndarray, return_cache: bool = False):
    """Parameter-free channel + spatial saliency gating.

    Channel gate: sigmoid(z(spatial mean) + z(spatial max)), z-scored across
    channels. Spatial gate: sigmoid(z(channel mean) + z(channel max)),
    z-scored across positions. Zero-variance statistics z-score to 0.
    Output is ``x * channel_gate * spatial_gate``.
    """
    x = np.asarray(level, dtype=np.float64)
    c, h, w = x.shape
    flat = x.reshape(c, -1)
    c_mean, c_arg = flat.mean(axis=1), flat.argmax(axis=1)
    c_max = flat[np.arange(c), c_arg]
    zc1, sc1, okc1 = _zscore(c_mean)
    zc2, sc2, okc2 = _zscore(c_max)
    gate_c = _sigmoid(zc1 + zc2)
    s_mean, s_arg = flat.mean(axis=0), flat.argmax(axis=0)
    s_max = flat[s_arg, np.arange(h * w)]
    zs1, ss1, oks1 = _zscore(s_mean)
    zs2, ss2, oks2 = _zscore(s_max)
    gate_s = _sigmoid(zs1 + zs2)
    out = (flat * gate_c[:, None] * gate_s[None, :]).reshape(c, h, w)
    if return_cache:
        cache = (x, c_arg, s_arg, gate_c, gate_s, (zc1, sc1, okc1), (zc2, sc2, okc2), (zs1, ss1, oks1), (zs2, ss2, oks2))
        return out, cache
    return out


def attend_backward(cache, g_out: np.ndarray) -> np.ndarray:
    x, c_arg, s_arg, gate_c, gate_s, zc1, zc2, zs1, zs2 = cache
    c, h, w = x.shape
    flat = x.reshape(c, -1)
    g = g_out.reshape(c, -1)
    g_flat = g * gate_c[:, None] * gate_s[None, :]
    g_gate_c = np.sum(g * flat * gate_s[None, :], axis=1)
    g_gate_s = np.sum(g * flat * gate_c[:, None], axis=0)
    g_pre_c = g_gate_c * gate_c * (1 - gate_c)
    g_pre_s = g_gate_s * gate_s * (1 - gate_s)
    g_c_mean = _zscore_backward(*zc1, g_pre_c)
    g_c_max = _zscore_backward(*zc2, g_pre_c)
    g_s_mean = _zscore_backward(*zs1, g_pre_s)
    g_s_max = _zscore_backward(*zs2, g_pre_s)
    g_flat = g_flat + g_c_mean[:, None] / (h * w) + g_s_mean[None, :] / c
    np.add.at(g_flat, (np.arange(c), c_arg), g_c_max)
    np.add.at(g_flat, (s_arg, np.arange(h * w)), g_s_max)
    return g_flat.reshape(c, h, w)


def load_external_pyramid(directory) -> FeaturePyramid:
    """Read ``level1.imgf32`` .. ``level5.imgf32`` (each (C, H, W))."""
    d = Path(directory)
    missing = [f"level{i}.imgf32" for i in range(1, N_LEVELS + 1) if not (d / f"level{i}.imgf32").exists()]
    if missing:
        raise FileNotFoundError(f"{d}: missing external feature files {', '.join(missing)}")
    return FeaturePyramid([read_imgf32(d / f"level{i}.imgf32").astype(np.float64) for i in range(1, N_LEVELS + 1)])
