"""Per-Gaussian tiny MLP: (time, depth) -> (rgb delta, opacity-logit delta).

Flat parameter layout (32 values, row-major):

    [0:8)    w1  (4 x 2)
    [8:12)   b1  (4,)
    [12:28)  w2  (4 x 4)
    [28:32)  b2  (4,)
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

N_IN = 2
N_HIDDEN = 4
N_OUT = 4
N_PARAMS = N_HIDDEN * N_IN + N_HIDDEN + N_OUT * N_HIDDEN + N_OUT

_W1 = slice(0, 8)
_B1 = slice(8, 12)
_W2 = slice(12, 28)
_B2 = slice(28, 32)


@dataclass(frozen=True)
class TinyMlpParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        shapes = {"w1": (N_HIDDEN, N_IN), "b1": (N_HIDDEN,), "w2": (N_OUT, N_HIDDEN), "b2": (N_OUT,)}
        for name, shape in shapes.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
            object.__setattr__(self, name, arr)

    def flatten(self) -> np.ndarray:
        return flatten(self)


@dataclass
class MlpCache:
    params: TinyMlpParams
    inputs: np.ndarray
    pre: np.ndarray
    hidden: np.ndarray


def flatten(p: TinyMlpParams) -> np.ndarray:
    return np.concatenate([p.w1.ravel(), p.b1, p.w2.ravel(), p.b2])


def unflatten(v) -> TinyMlpParams:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (N_PARAMS,):
        raise ValueError(f"expected a flat vector of {N_PARAMS} values, got shape {v.shape}")
    return TinyMlpParams(
        w1=v[_W1].reshape(N_HIDDEN, N_IN),
        b1=v[_B1].copy(),
        w2=v[_W2].reshape(N_OUT, N_HIDDEN),
        b2=v[_B2].copy(),
    )


def mlp_init(seed: int) -> TinyMlpParams:
    """First layer uniform in +-1/sqrt(fan_in); output layer exactly zero."""
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(N_IN)
    return TinyMlpParams(
        w1=rng.uniform(-bound, bound, size=(N_HIDDEN, N_IN)),
        b1=rng.uniform(-bound, bound, size=N_HIDDEN),
        w2=np.zeros((N_OUT, N_HIDDEN)),
        b2=np.zeros(N_OUT),
    )


def mlp_init_batch(n: int, seed: int) -> np.ndarray:
    """(n, N_PARAMS) array of independently initialized flat parameter vectors."""
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(N_IN)
    out = np.zeros((n, N_PARAMS))
    out[:, _W1] = rng.uniform(-bound, bound, size=(n, N_HIDDEN * N_IN))
    out[:, _B1] = rng.uniform(-bound, bound, size=(n, N_HIDDEN))
    return out


def mlp_forward(p: TinyMlpParams, t: float, depth: float, return_cache: bool = False):
    x = np.array([t, depth], dtype=np.float64)
    pre = p.w1 @ x + p.b1
    hidden = np.maximum(pre, 0.0)
    out = p.w2 @ hidden + p.b2
    rgb_delta, opacity_delta = out[:3], float(out[3])
    if return_cache:
        return rgb_delta, opacity_delta, MlpCache(p, x, pre, hidden)
    return rgb_delta, opacity_delta


def mlp_backward(cache: MlpCache | None, upstream) -> tuple[np.ndarray, np.ndarray]:
    """Adjoint of :func:`mlp_forward`.

    Returns the gradient over the flat parameter vector (same layout as
    :func:`flatten`) and over the two inputs ``(t, depth)``.
    """
    if cache is None:
        raise ValueError("mlp_backward needs the cache from mlp_forward(..., return_cache=True)")
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != (N_OUT,):
        raise ValueError(f"upstream must have shape ({N_OUT},)")
    p = cache.params
    d_w2 = np.outer(g, cache.hidden)
    d_hidden = p.w2.T @ g
    d_pre = d_hidden * (cache.pre > 0.0)
    d_w1 = np.outer(d_pre, cache.inputs)
    d_inputs = p.w1.T @ d_pre
    grad = np.concatenate([d_w1.ravel(), d_pre, d_w2.ravel(), g])
    return grad, d_inputs
