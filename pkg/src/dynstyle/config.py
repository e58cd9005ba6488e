"""Sectioned ``key = value`` run configuration.

Sections: [synth], [train], [loss], [stylize], [helix], [pipeline]. Every
key has a default; ``dump_defaults()`` prints them all.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields

from .losses import LossWeights
from .raster.trajectory import HelixSpec
from .synth import SynthSpec
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


STYLE_SEED_OFFSET = 7             # default style_seed is the one seed 0 maps to


@dataclass(frozen=True)
class StylizeSettings:
    iterations: int = 300
    step_size: float = 0.02
    seed: int = 0
    style_seed: int = STYLE_SEED_OFFSET   # seed of the built-in style texture when no style image is given

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.step_size > 0:
            raise ValueError("step_size must be > 0")


@dataclass(frozen=True)
class PipelineSettings:
    n_gaussians: int = 200         # initialization budget for train-geom
    style_mlp: bool = True
    init: str = "points"           # points: synthetic point cloud; random: uniform ball

    def __post_init__(self):
        if self.n_gaussians < 1:
            raise ValueError("n_gaussians must be >= 1")
        if self.init not in ("points", "random"):
            raise ValueError("init must be 'points' or 'random'")


@dataclass(frozen=True)
class RunConfig:
    synth: SynthSpec = field(default_factory=SynthSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    stylize: StylizeSettings = field(default_factory=StylizeSettings)
    helix: HelixSpec = field(default_factory=HelixSpec)
    pipeline: PipelineSettings = field(default_factory=PipelineSettings)

    def with_seed(self, seed: int) -> "RunConfig":
        """One seed for the whole problem instance: scene, training, stylization and built-in style."""
        return dataclasses.replace(
            self,
            synth=dataclasses.replace(self.synth, seed=seed),
            train=dataclasses.replace(self.train, seed=seed),
            stylize=dataclasses.replace(self.stylize, seed=seed, style_seed=seed + STYLE_SEED_OFFSET),
        )

    def replace(self, section: str, **kw) -> "RunConfig":
        return dataclasses.replace(self, **{section: dataclasses.replace(getattr(self, section), **kw)})

    def snapshot(self) -> dict:
        return {name: {f.name: _plain(getattr(getattr(self, name), f.name)) for f in fields(getattr(self, name))}
                for name in SECTIONS}

    def to_text(self) -> str:
        lines = []
        for sec, items in self.snapshot().items():
            lines.append(f"[{sec}]")
            for k, v in items.items():
                lines.append(f"{k} = {_render(v)}")
            lines.append("")
        return "\n".join(lines)


SECTIONS = ("synth", "train", "loss", "stylize", "helix", "pipeline")


def _plain(v):
    if isinstance(v, tuple):
        return [float(x) for x in v]
    if isinstance(v, float):
        return float(v)
    return v


def _render(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, list):
        return ", ".join(repr(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(float(x) for x in raw.replace(",", " ").split())
    return raw


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"{source}: malformed config: {str(e).splitlines()[0]}") from None
    base = RunConfig()
    for sec in cp.sections():
        if sec not in SECTIONS:
            raise ConfigError(f"{source}: unknown section [{sec}] (expected one of {', '.join(SECTIONS)})")
    kw = {}
    for sec in SECTIONS:
        current = getattr(base, sec)
        if not cp.has_section(sec):
            continue
        known = {f.name for f in fields(current)}
        updates = {}
        for key, raw in cp.items(sec):
            if key not in known:
                raise ConfigError(f"{source}: unknown key '{key}' in [{sec}]")
            try:
                updates[key] = _parse_value(raw, getattr(current, key))
            except ValueError as e:
                raise ConfigError(f"{source}: [{sec}] {key}: {e}") from None
        try:
            kw[sec] = dataclasses.replace(current, **updates)
        except (ValueError, TypeError) as e:
            raise ConfigError(f"{source}: [{sec}]: {e}") from None
    return dataclasses.replace(base, **kw)


def dump_defaults() -> str:
    return RunConfig().to_text()
