"""Helical camera trajectories for temporal-consistency renders."""
from __future__ import annotations

import configparser
from dataclasses import dataclass

import numpy as np

from ..camera import helix_poses


@dataclass(frozen=True)
class HelixSpec:
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 4.0
    turns: float = 1.0
    n: int = 30
    height_span: float = 1.0
    fx: float = 80.0
    fy: float = 80.0
    width: int = 64
    height: int = 64

    @classmethod
    def from_text(cls, text: str) -> "HelixSpec":
        """Parse ``key = value`` lines (an optional ``[helix]`` section header)."""
        cp = configparser.ConfigParser()
        cp.read_string(text if text.lstrip().startswith("[") else "[helix]\n" + text)
        sec = cp["helix"]
        kw = {}
        for key, val in sec.items():
            if key == "center":
                kw[key] = tuple(float(v) for v in val.replace(",", " ").split())
            elif key in ("n", "width", "height"):
                kw[key] = int(val)
            elif key in cls.__dataclass_fields__:
                kw[key] = float(val)
            else:
                raise ValueError(f"unknown helix key {key!r}")
        return cls(**kw)


def helix_trajectory(spec: HelixSpec):
    """Cameras and normalized times (linear over [0, 1]) for a helix render."""
    cams, _ = helix_poses(spec.center, spec.radius, spec.turns, spec.n, height_span=spec.height_span,
                          fx=spec.fx, fy=spec.fy, width=spec.width, height=spec.height)
    times = np.linspace(0.0, 1.0, spec.n) if spec.n > 1 else np.zeros(1)
    return cams, times
