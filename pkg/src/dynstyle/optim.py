"""Adam over named parameter groups and log-linear learning-rate schedules."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-15
STATE_MAGIC = b"S4DA"


class NonFiniteGradient(FloatingPointError):
    pass


def exp_schedule(step: int, total: int, lr_init: float, lr_final: float,
                 delay_mult: float = 1.0, delay_steps: int = 0) -> float:
    """exp(lerp(ln lr_init, ln lr_final, step / total)) times the warm-up delay factor.

    The endpoints return ``lr_init`` / ``lr_final`` exactly (times the factor).
    """
    if step < 0 or step > total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if delay_steps > 0:
        factor = delay_mult + (1 - delay_mult) * math.sin(0.5 * math.pi * min(max(step / delay_steps, 0.0), 1.0))
    else:
        factor = 1.0
    if step == 0 or lr_init == lr_final:
        return lr_init * factor
    if step == total:
        return lr_final * factor
    u = step / total
    return math.exp((1 - u) * math.log(lr_init) + u * math.log(lr_final)) * factor


def lr_at(step: int, cfg, total: int | None = None) -> float:
    """Style-MLP learning rate at ``step`` of a stage of length ``total``."""
    if total is None:
        total = cfg.iterations_geom + cfg.iterations_style
    return exp_schedule(step, total, cfg.lr_init, cfg.lr_final, cfg.lr_delay_mult, cfg.lr_delay_steps)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        for k in self.m:
            if k not in self.v or self.m[k].shape != self.v[k].shape:
                raise ValueError(f"moment shapes differ for group '{k}'")

    def __eq__(self, other):
        if not isinstance(other, AdamState):
            return NotImplemented
        return (self.step == other.step and self.m.keys() == other.m.keys()
                and all(np.array_equal(self.m[k], other.m[k]) and np.array_equal(self.v[k], other.v[k])
                        for k in self.m))


def adam_step(params: dict, grads: dict, state: AdamState, lr) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update; ``lr`` is a float or a per-group dict.

    Groups absent from ``grads`` (or with a ``None`` grad) are left untouched.
    """
    for name in sorted(grads):
        g = grads[name]
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient in parameter group '{name}'")
    step = state.step + 1
    new_params = dict(params)
    m, v = dict(state.m), dict(state.v)
    c1 = 1 - BETA1 ** step
    c2 = 1 - BETA2 ** step
    for name in sorted(grads):
        g = grads[name]
        if g is None:
            continue
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for '{name}'")
        mk = m.get(name, np.zeros_like(p))
        vk = v.get(name, np.zeros_like(p))
        mk = BETA1 * mk + (1 - BETA1) * g
        vk = BETA2 * vk + (1 - BETA2) * g * g
        rate = lr[name] if isinstance(lr, dict) else lr
        new_params[name] = p - rate * (mk / c1) / (np.sqrt(vk / c2) + EPS)
        m[name], v[name] = mk, vk
    return new_params, AdamState(m, v, step)


def save_adam_state(state: AdamState, path) -> None:
    """Deterministic little-endian sidecar: magic, u64 step, u32 groups, then per group
    (u32 name length, name, u32 ndim, u64 dims, f64 m, f64 v)."""
    out = [STATE_MAGIC, struct.pack("<QI", state.step, len(state.m))]
    for name in sorted(state.m):
        raw = name.encode()
        m = np.ascontiguousarray(state.m[name], dtype="<f8")
        out += [struct.pack("<I", len(raw)), raw, struct.pack("<I", m.ndim),
                struct.pack(f"<{m.ndim}Q", *m.shape), m.tobytes(),
                np.ascontiguousarray(state.v[name], dtype="<f8").tobytes()]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(b"".join(out))


def load_adam_state(path) -> AdamState:
    data = Path(path).read_bytes()
    if data[:4] != STATE_MAGIC:
        raise ValueError(f"{path}: not an optimizer state file")
    pos = 4
    try:
        step, n = struct.unpack_from("<QI", data, pos)
        pos += 12
        m, v = {}, {}
        for _ in range(n):
            (ln,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + ln].decode()
            pos += ln
            (ndim,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}Q", data, pos)
            pos += 8 * ndim
            count = int(np.prod(shape)) if ndim else 1
            for store in (m, v):
                if pos + 8 * count > len(data):
                    raise ValueError("truncated")
                store[name] = np.frombuffer(data, "<f8", count, pos).reshape(shape).copy()
                pos += 8 * count
    except (struct.error, ValueError) as exc:
        raise ValueError(f"{path}: truncated optimizer state ({exc})") from None
    if pos != len(data):
        raise ValueError(f"{path}: trailing bytes in optimizer state")
    return AdamState(m, v, step)
