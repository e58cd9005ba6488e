"""Learnable deformation field: (canonical position, time) -> (d_mu, d_rot, d_scale).

A two-hidden-layer ReLU coordinate network on a sinusoidal encoding of
(x, y, z, t). The output layer starts at zero, so a fresh field is the
identity map and training begins from the static scene.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

N_COORD = 4
N_OUT = 10  # d_mu (3), d_rot (4), d_scale (3)


def encoded_width(frequencies: int) -> int:
    return N_COORD + 2 * N_COORD * frequencies


def layer_shapes(frequencies: int, width: int) -> list[tuple[int, ...]]:
    d_in = encoded_width(frequencies)
    return [(width, d_in), (width,), (width, width), (width,), (N_OUT, width), (N_OUT,)]


def param_count(frequencies: int, width: int) -> int:
    return sum(int(np.prod(s)) for s in layer_shapes(frequencies, width))


@dataclass(frozen=True, eq=False)
class DeformationField:
    params: np.ndarray
    encoding_frequencies: int = 4
    width: int = 32

    def __post_init__(self):
        p = np.asarray(self.params, dtype=np.float32).ravel()
        if self.encoding_frequencies < 1:
            raise ValueError("encoding_frequencies must be positive")
        expected = param_count(self.encoding_frequencies, self.width)
        if p.size != expected:
            raise ValueError(f"deformation field expects {expected} params, got {p.size}")
        object.__setattr__(self, "params", p)

    def __eq__(self, other):
        if not isinstance(other, DeformationField):
            return NotImplemented
        return (self.encoding_frequencies, self.width) == (other.encoding_frequencies, other.width) and \
            np.array_equal(self.params, other.params)

    @classmethod
    def zeros(cls, frequencies: int = 4, width: int = 32) -> "DeformationField":
        return cls(np.zeros(param_count(frequencies, width), np.float32), frequencies, width)

    @classmethod
    def initialized(cls, seed: int, frequencies: int = 4, width: int = 32) -> "DeformationField":
        """He-initialized hidden layers, zero output layer."""
        rng = np.random.default_rng(seed)
        chunks = []
        for i, shape in enumerate(layer_shapes(frequencies, width)):
            if i >= 4 or len(shape) == 1:
                chunks.append(np.zeros(shape))
            else:
                chunks.append(rng.normal(0.0, np.sqrt(2.0 / shape[1]), size=shape))
        return cls(np.concatenate([c.ravel() for c in chunks]).astype(np.float32), frequencies, width)


def unpack(params: np.ndarray, frequencies: int, width: int) -> list[np.ndarray]:
    out, k = [], 0
    for shape in layer_shapes(frequencies, width):
        n = int(np.prod(shape))
        out.append(params[k:k + n].reshape(shape))
        k += n
    return out


def encode(coords: np.ndarray, frequencies: int) -> np.ndarray:
    """(N, 4) -> (N, 4 + 8F): identity, then sin/cos at 2^k * pi."""
    scales = np.pi * 2.0 ** np.arange(frequencies)
    arg = coords[:, :, None] * scales  # (N, 4, F)
    return np.concatenate(
        [coords, np.sin(arg).reshape(len(coords), -1), np.cos(arg).reshape(len(coords), -1)], axis=1
    )


def _encode_backward(coords, g_enc, frequencies):
    n = len(coords)
    scales = np.pi * 2.0 ** np.arange(frequencies)
    arg = coords[:, :, None] * scales
    w = N_COORD * frequencies
    g_sin = g_enc[:, N_COORD:N_COORD + w].reshape(n, N_COORD, frequencies)
    g_cos = g_enc[:, N_COORD + w:].reshape(n, N_COORD, frequencies)
    return g_enc[:, :N_COORD] + ((g_sin * np.cos(arg) - g_cos * np.sin(arg)) * scales).sum(axis=2)


@dataclass
class DeformCache:
    coords: np.ndarray
    enc: np.ndarray
    pre1: np.ndarray
    h1: np.ndarray
    pre2: np.ndarray
    h2: np.ndarray
    rot_sum: np.ndarray
    rot_norm: np.ndarray
    scale: np.ndarray
    exp_ds: np.ndarray
    params: np.ndarray
    frequencies: int
    width: int


def field_forward(params, frequencies, width, mu, t):
    params = np.asarray(params, dtype=np.float64)
    W1, b1, W2, b2, W3, b3 = unpack(params, frequencies, width)
    coords = np.concatenate([mu, np.full((len(mu), 1), float(t))], axis=1)
    enc = encode(coords, frequencies)
    pre1 = enc @ W1.T + b1
    h1 = np.maximum(pre1, 0.0)
    pre2 = h1 @ W2.T + b2
    h2 = np.maximum(pre2, 0.0)
    out = h2 @ W3.T + b3
    return out, (coords, enc, pre1, h1, pre2, h2)


def deform_arrays(mu, rot, scale, field: DeformationField, t: float, params=None):
    """Deform N Gaussians at time ``t``.

    ``params`` overrides ``field.params`` (float64 training copy).
    Returns ``(mu', rot', scale', cache)`` where rot' is unit-norm.
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"time {t} outside [0, 1]")
    p = field.params if params is None else params
    mu = np.asarray(mu, dtype=np.float64)
    rot = np.asarray(rot, dtype=np.float64)
    scale = np.asarray(scale, dtype=np.float64)
    out, (coords, enc, pre1, h1, pre2, h2) = field_forward(p, field.encoding_frequencies, field.width, mu, t)
    bad = ~np.all(np.isfinite(out), axis=1)
    if bad.any():
        raise FloatingPointError(f"deformation field produced non-finite output for Gaussian {int(np.argmax(bad))}")
    rot_sum = rot + out[:, 3:7]
    rot_norm = np.linalg.norm(rot_sum, axis=1, keepdims=True)
    if np.any(rot_norm == 0.0):
        raise FloatingPointError(f"degenerate quaternion after deformation for Gaussian {int(np.argmin(rot_norm))}")
    exp_ds = np.exp(out[:, 7:10])
    cache = DeformCache(coords, enc, pre1, h1, pre2, h2, rot_sum, rot_norm, scale, exp_ds,
                        np.asarray(p, dtype=np.float64), field.encoding_frequencies, field.width)
    return mu + out[:, :3], rot_sum / rot_norm, scale * exp_ds, cache


def deform_backward(cache: DeformCache, g_mu, g_rot, g_scale):
    """Gradients wrt canonical (mu, rot, scale) and the flat field parameters."""
    q = cache.rot_sum / cache.rot_norm
    g_rot_sum = (g_rot - q * np.sum(q * g_rot, axis=1, keepdims=True)) / cache.rot_norm
    g_out = np.concatenate([g_mu, g_rot_sum, g_scale * cache.scale * cache.exp_ds], axis=1)
    W1, b1, W2, b2, W3, b3 = unpack(cache.params, cache.frequencies, cache.width)
    g_W3 = g_out.T @ cache.h2
    g_b3 = g_out.sum(0)
    g_pre2 = (g_out @ W3) * (cache.pre2 > 0)
    g_W2 = g_pre2.T @ cache.h1
    g_b2 = g_pre2.sum(0)
    g_pre1 = (g_pre2 @ W2) * (cache.pre1 > 0)
    g_W1 = g_pre1.T @ cache.enc
    g_b1 = g_pre1.sum(0)
    g_enc = g_pre1 @ W1
    g_coords = _encode_backward(cache.coords, g_enc, cache.frequencies)
    g_params = np.concatenate([a.ravel() for a in (g_W1, g_b1, g_W2, g_b2, g_W3, g_b3)])
    return g_mu + g_coords[:, :3], g_rot_sum, g_scale * cache.exp_ds, g_params
