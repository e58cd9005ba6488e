"""Two-stage training: geometry from content frames, then style attributes from stylized frames."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import losses as L
from .deformation import DeformationField
from .metrics.quality import psnr
from .optim import AdamState, adam_step, exp_schedule, lr_at, save_adam_state
from .raster.render import GaussianParams, render_backward, render_params
from .scene import GaussianSet, Scene, save_scene
from .style_mlp import mlp_init_batch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    iterations_geom: int = 4000
    iterations_style: int = 10000
    batch_size: int = 2
    lr_init: float = 1e-4          # style MLP schedule
    lr_final: float = 1e-5
    lr_delay_mult: float = 0.02
    lr_delay_steps: int = 0
    seed: int = 0
    coarse_fraction: float = 0.25
    tv_weight: float = 1.0
    lr_position_init: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_deform_init: float = 1.6e-3
    lr_deform_final: float = 1.6e-4
    lr_color: float = 2.5e-3
    lr_opacity: float = 0.05
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    checkpoint_every: int = 0
    log_every: int = 50

    def __post_init__(self):
        if self.iterations_geom < 1 or self.iterations_style < 1:
            raise ValueError("iteration counts must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr_final <= self.lr_init:
            raise ValueError("lr_final must not exceed lr_init")
        if not 0 <= self.coarse_fraction <= 1:
            raise ValueError("coarse_fraction must lie in [0, 1]")

    @classmethod
    def from_mapping(cls, items) -> "TrainConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for key, val in dict(items).items():
            if key not in types:
                raise ValueError(f"unknown [train] key '{key}'")
            kw[key] = int(val) if types[key] == "int" else float(val)
        return cls(**kw)


@dataclass
class TrainResult:
    scene: Scene
    log: list
    state: AdamState
    final_l1: float = float("nan")


@dataclass
class _Run:
    """Shared loop state for one training stage."""

    stage: str
    out_dir: Path | None
    log_path: Path | None
    records: list = field(default_factory=list)

    def __post_init__(self):
        if self.log_path is not None and self.log_path.exists():
            self.log_path.unlink()       # a rerun into the same directory starts a fresh log

    def record(self, rec: dict):
        self.records.append(rec)
        if self.log_path is not None:
            self.log_path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _batches(keys, batch_size, iterations, seed):
    rng = np.random.default_rng(seed)
    keys = list(keys)
    b = min(batch_size, len(keys))
    for _ in range(iterations):
        idx = rng.choice(len(keys), size=b, replace=False)
        yield [keys[i] for i in np.sort(idx)]


def _checkpoint(run: _Run, scene: Scene, state: AdamState, tag: str):
    if run.out_dir is None:
        return
    base = run.out_dir / "checkpoints" / f"{run.stage}_{tag}"
    base.parent.mkdir(parents=True, exist_ok=True)
    save_scene(scene, base.with_suffix(".s4ds"))
    save_adam_state(state, base.with_suffix(".adam"))


def _accumulate(grads, g, w):
    for k, v in g.items():
        if v is None:
            continue
        grads[k] = w * v if k not in grads else grads[k] + w * v


def evaluate_l1(scene: Scene, targets: dict, dataset, use_mlp: bool = True) -> tuple[float, float]:
    """Mean L1 and mean PSNR of the scene's renders against ``targets`` over all keys."""
    params = GaussianParams.from_set(scene.gaussians)
    if not use_mlp:
        params.mlp = None
    l1s, ps = [], []
    for key in sorted(targets):
        cam, ti = key
        out = render_params(params, dataset.cameras[cam], float(dataset.times[ti]), background=scene.background,
                            extent=scene.extent, deformation=scene.deformation)
        l1s.append(float(np.mean(np.abs(out.image - targets[key]))))
        ps.append(psnr(np.clip(out.image, 0, 1), targets[key]))
    return float(np.mean(l1s)), float(np.mean(ps))


def train_geometry(scene: Scene, dataset, cfg: TrainConfig, *, targets: dict | None = None,
                   iterations: int | None = None, out_dir=None, stage: str = "geom") -> TrainResult:
    """Fit Gaussians + deformation to ``targets`` (default: the dataset frames) under L1 + TV.

    The first ``coarse_fraction`` of iterations is static: the deformation
    field is neither applied nor updated.
    """
    targets = dataset.frames if targets is None else targets
    if not targets:
        raise ValueError("train_geometry needs a non-empty dataset")
    iters = cfg.iterations_geom if iterations is None else iterations
    out_dir = Path(out_dir) if out_dir is not None else None
    run = _Run(stage, out_dir, out_dir / f"{stage}_log.jsonl" if out_dir else None)
    gp = GaussianParams.from_set(scene.gaussians)
    params = {"mu": gp.mu, "rot": gp.rot, "log_scale": np.log(gp.scale), "logit": gp.logit, "color": gp.color,
              "deform": scene.deformation.params.astype(np.float64)}
    if gp.sh1 is not None:
        params["sh1"] = gp.sh1
    field_shape = scene.deformation
    coarse_until = int(round(cfg.coarse_fraction * iters))
    state = AdamState()
    bg = scene.background
    for step, batch in enumerate(_batches(sorted(targets), cfg.batch_size, iters, cfg.seed)):
        fine = step >= coarse_until
        work = GaussianParams(params["mu"], params["rot"], np.exp(params["log_scale"]), params["logit"],
                              params["color"], params.get("sh1"), None)
        grads: dict = {}
        l1_sum = tv_sum = 0.0
        w = 1.0 / len(batch)
        for cam, ti in batch:
            out = render_params(work, dataset.cameras[cam], float(dataset.times[ti]), background=bg,
                                extent=scene.extent, deformation=field_shape if fine else None,
                                deform_params=params["deform"] if fine else None)
            l1, tv, g_img = L.reconstruction_loss_grad(out.image, targets[(cam, ti)])
            if cfg.tv_weight != 1.0:
                g_img = g_img - (1.0 - cfg.tv_weight) * L.tv_grad(out.image)
            l1_sum += l1
            tv_sum += tv
            g = render_backward(out, g_img)
            _accumulate(grads, {"mu": g["mu"], "rot": g["rot"], "log_scale": g["scale"] * work.scale,
                                "logit": g["logit"], "color": g["color"], "sh1": g["sh1"],
                                "deform": g["deform"] if fine else None}, w)
        lr = {
            "mu": exp_schedule(step, iters, cfg.lr_position_init, cfg.lr_position_final),
            "deform": exp_schedule(step, iters, cfg.lr_deform_init, cfg.lr_deform_final),
            "color": cfg.lr_color, "sh1": cfg.lr_color / 20, "logit": cfg.lr_opacity,
            "log_scale": cfg.lr_scale, "rot": cfg.lr_rotation,
        }
        params, state = adam_step(params, grads, state, lr)
        if step % cfg.log_every == 0 or step == iters - 1:
            rec = {"stage": stage, "step": step, "l1": l1_sum * w, "tv": tv_sum * w,
                   "loss": (l1_sum + cfg.tv_weight * tv_sum) * w, "lr": lr["mu"]}
            run.record(rec)
            log.debug("%s step %d l1 %.5f", stage, step, rec["l1"])
        if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0 and step + 1 < iters:
            _checkpoint(run, _geom_scene(scene, params), state, f"{step + 1:06d}")
    result = _geom_scene(scene, params)
    _checkpoint(run, result, state, "final")
    l1, p = evaluate_l1(result, targets, dataset)
    run.record({"stage": stage, "step": iters, "final_l1": l1, "psnr": p})
    return TrainResult(result, run.records, state, l1)


def _geom_scene(scene: Scene, params: dict) -> Scene:
    gp = GaussianParams(params["mu"], params["rot"], np.exp(params["log_scale"]), params["logit"],
                        params["color"], params.get("sh1"), None)
    field_ = DeformationField(params["deform"].astype(np.float32), scene.deformation.encoding_frequencies,
                              scene.deformation.width)
    return scene.replace(gaussians=gp.to_set(), deformation=field_)


def train_style(scene: Scene, stylized: dict, dataset, cfg: TrainConfig, *, use_mlp: bool = True,
                iterations: int | None = None, out_dir=None, stage: str = "style") -> TrainResult:
    """Attach zero-output MLPs and fit colors, opacities and MLPs to stylized frames.

    Positions, rotations, scales and the deformation field are frozen and
    copied through unchanged.
    """
    missing = [k for k in dataset.keys() if k not in stylized]
    if missing:
        raise ValueError(f"stylized frames missing for keys {missing[:5]}{' ...' if len(missing) > 5 else ''}")
    iters = cfg.iterations_style if iterations is None else iterations
    out_dir = Path(out_dir) if out_dir is not None else None
    run = _Run(stage, out_dir, out_dir / f"{stage}_log.jsonl" if out_dir else None)
    gs = scene.gaussians
    gp = GaussianParams.from_set(gs)
    n = len(gs)
    params = {"logit": gp.logit, "color": gp.color}
    if use_mlp:
        params["mlp"] = mlp_init_batch(n, cfg.seed).astype(np.float64)
    if gp.sh1 is not None:
        params["sh1"] = gp.sh1
    state = AdamState()
    keys = sorted(stylized)
    # frozen geometry: one deformed copy per time, reused across steps
    for step, batch in enumerate(_batches(keys, cfg.batch_size, iters, cfg.seed)):
        work = GaussianParams(gp.mu, gp.rot, gp.scale, params["logit"], params["color"], params.get("sh1"),
                              params.get("mlp"))
        grads: dict = {}
        l1_sum = tv_sum = 0.0
        w = 1.0 / len(batch)
        for cam, ti in batch:
            out = render_params(work, dataset.cameras[cam], float(dataset.times[ti]), background=scene.background,
                                extent=scene.extent, deformation=scene.deformation)
            l1, tv, g_img = L.reconstruction_loss_grad(out.image, stylized[(cam, ti)])
            if cfg.tv_weight != 1.0:
                g_img = g_img - (1.0 - cfg.tv_weight) * L.tv_grad(out.image)
            l1_sum += l1
            tv_sum += tv
            g = render_backward(out, g_img)
            _accumulate(grads, {"logit": g["logit"], "color": g["color"], "mlp": g["mlp"], "sh1": g["sh1"]}, w)
        lr = {"logit": cfg.lr_opacity, "color": cfg.lr_color, "sh1": cfg.lr_color / 20,
              "mlp": lr_at(step, cfg, iters)}
        params, state = adam_step(params, grads, state, lr)
        if step % cfg.log_every == 0 or step == iters - 1:
            run.record({"stage": stage, "step": step, "l1": l1_sum * w, "tv": tv_sum * w,
                        "loss": (l1_sum + cfg.tv_weight * tv_sum) * w, "lr": lr["mlp"]})
        if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0 and step + 1 < iters:
            _checkpoint(run, _style_scene(scene, params), state, f"{step + 1:06d}")
    result = _style_scene(scene, params)
    _checkpoint(run, result, state, "final")
    l1, p = evaluate_l1(result, stylized, dataset)
    run.record({"stage": stage, "step": iters, "final_l1": l1, "psnr": p})
    return TrainResult(result, run.records, state, l1)


def _style_scene(scene: Scene, params: dict) -> Scene:
    gs = scene.gaussians
    opacity = np.clip(1.0 / (1.0 + np.exp(-params["logit"])), 1e-6, 1 - 1e-6)
    new = GaussianSet(gs.mu, gs.rot, gs.scale, opacity, params["color"], params.get("sh1", gs.sh1),
                      params.get("mlp"))
    return scene.replace(gaussians=new)


def random_init_scene(n: int, cameras, *, extent: float = 1.0, seed: int = 0, background=(0.0, 0.0, 0.0)) -> Scene:
    """Gaussians scattered uniformly in a ball of radius ``extent`` (no point cloud)."""
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    mu = extent * d * rng.random(n)[:, None] ** (1 / 3)
    scale = np.full((n, 3), 0.1 * extent)
    gs = GaussianSet(mu, np.tile([1.0, 0, 0, 0], (n, 1)), scale, np.full(n, 0.5), rng.random((n, 3)))
    return Scene(gs, DeformationField.initialized(seed), list(cameras), background, extent)


def train_single_stage(dataset, stylized: dict, cfg: TrainConfig, n_gaussians: int, *, out_dir=None) -> TrainResult:
    """Baseline: all attributes fit directly to stylized frames from a random initialization,
    with the same total iteration budget as the two stages combined."""
    scene = random_init_scene(n_gaussians, dataset.cameras, seed=cfg.seed)
    return train_geometry(scene, dataset, cfg, targets=stylized,
                          iterations=cfg.iterations_geom + cfg.iterations_style, out_dir=out_dir, stage="single")
