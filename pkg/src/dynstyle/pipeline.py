"""End-to-end orchestration: synth/load -> train-geom -> stylize -> train-style -> render -> eval.

Every stage reads its inputs back from the run directory, so the pipeline
and the individual CLI subcommands see byte-identical data.

Run directory layout::

    data/                      synthetic scene (originals/, flows/, style.imgf32, points.txt)
    checkpoints/               {geom,style,single}_final.{s4ds,adam}
    {geom,style,single}_log.jsonl
    stylized/<cam>/<t>.{imgf32,png}
    render/test/frames/<cam>/<t>.{imgf32,png}
    render/helix/frames/0/<i>.{imgf32,png}
    report.json, report.csv
"""
from __future__ import annotations

import logging
import shutil
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .dataset import MultiViewDataset, load_neu3d_style
from .imageio import read_image, write_image, write_png
from .manifest import sha256_path
from .metrics.bench import BenchReport, evaluate
from .raster.render import render_scene
from .raster.trajectory import helix_trajectory
from .scene import Scene, init_from_points, load_scene
from .stylizer import StylizeJob, load_stylized, save_stylized, stylize_sequence
from .synth import generate, style_texture, write_run_dir
from .trainer import TrainResult, evaluate_l1, random_init_scene, train_geometry, train_single_stage, train_style

log = logging.getLogger(__name__)

GEOM_CKPT = "checkpoints/geom_final.s4ds"
STYLE_CKPT = "checkpoints/style_final.s4ds"
SINGLE_CKPT = "checkpoints/single_final.s4ds"


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}': {cause}")
        self.stage = stage
        self.cause = cause


@contextmanager
def stage(name: str):
    log.info("stage %s", name)
    try:
        yield
    except StageError:
        raise
    except Exception as e:  # noqa: BLE001 - re-raised with the stage attached
        raise StageError(name, e) from e


@dataclass(frozen=True)
class PipelineOptions:
    use_mlp: bool = True
    single_stage: bool = False
    data: Path | None = None               # Neu3D-style dataset; None -> synthesize from [synth]
    style_image: Path | None = None
    external_stylized: Path | None = None
    external_flow: Path | None = None


@dataclass
class PipelineResult:
    report: BenchReport
    scene: Scene
    train: TrainResult
    geom: TrainResult | None


# ---------------------------------------------------------------------------
# data


def write_points(path, points, colors) -> None:
    """``x y z r g b`` per line with round-trip float formatting."""
    pts = np.asarray(points, dtype=np.float64)
    cols = np.asarray(colors, dtype=np.float64)
    lines = [" ".join(repr(float(v)) for v in (*p, *c)) for p, c in zip(pts, cols)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_points(path) -> tuple[np.ndarray, np.ndarray]:
    rows = []
    for i, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        vals = line.split()
        if len(vals) != 6:
            raise ValueError(f"{path}:{i}: expected 'x y z r g b', got {len(vals)} values")
        rows.append([float(v) for v in vals])
    if not rows:
        raise ValueError(f"{path}: no points")
    a = np.asarray(rows)
    return a[:, :3], a[:, 3:]


def synthesize(cfg: RunConfig, data_dir) -> None:
    res = generate(cfg.synth)
    write_run_dir(res, data_dir, style=style_texture(cfg.synth.resolution, cfg.stylize.style_seed))
    write_points(Path(data_dir) / "points.txt", *res.point_cloud)


def load_dataset(data_dir) -> MultiViewDataset:
    root = Path(data_dir)
    return load_neu3d_style(root / "originals" if (root / "originals").is_dir() else root)


def load_style(cfg: RunConfig, data_dir, style_image=None) -> np.ndarray:
    if style_image is not None:
        return read_image(style_image)
    candidate = Path(data_dir) / "style.imgf32" if data_dir is not None else None
    if candidate is not None and candidate.exists():
        return read_image(candidate)
    return style_texture(cfg.synth.resolution, cfg.stylize.style_seed)


def initial_scene(cfg: RunConfig, dataset: MultiViewDataset, points_path=None) -> Scene:
    n = cfg.pipeline.n_gaussians
    if cfg.pipeline.init == "points" and points_path is not None and Path(points_path).exists():
        pts, cols = read_points(points_path)
        return init_from_points(pts, cols, n, seed=cfg.train.seed, cameras=dataset.cameras)
    return random_init_scene(n, dataset.cameras, seed=cfg.train.seed)


# ---------------------------------------------------------------------------
# stages


def run_stylize(cfg: RunConfig, dataset: MultiViewDataset, style: np.ndarray, out_dir, external=None) -> dict:
    """Stylize (or ingest) every dataset frame into ``out_dir/stylized``; returns frames as read back."""
    dest = Path(out_dir) / "stylized"
    if external is not None:
        frames = load_stylized(external, dataset.keys(), dataset.shape)
    else:
        if style.shape != dataset.shape:
            raise ValueError(f"style image shape {style.shape} differs from frame shape {dataset.shape}")
        job = StylizeJob(dict(dataset.frames), style, cfg.loss, cfg.stylize.iterations,
                         cfg.stylize.step_size, cfg.stylize.seed)
        frames = stylize_sequence(job)
    save_stylized(frames, dest)
    return load_stylized(dest, dataset.keys(), dataset.shape)


def render_views(scene: Scene, cameras, times, out_dir, *, single_camera: bool = False) -> None:
    """Render (camera, time) pairs; ``single_camera`` pairs cameras[i] with times[i] under camera index 0."""
    frames = Path(out_dir) / "frames"
    if single_camera:
        jobs = [(0, i, cam, t) for i, (cam, t) in enumerate(zip(cameras, times))]
    else:
        jobs = [(ci, ti, cam, t) for ci, cam in enumerate(cameras) for ti, t in enumerate(times)]
    for ci, ti, cam, t in jobs:
        im = render_scene(scene, cam, float(t)).image
        write_image(frames / str(ci) / f"{ti:04d}.imgf32", im)
        write_png(frames / str(ci) / f"{ti:04d}.png", im)


def render_trajectories(cfg: RunConfig, scene: Scene, dataset: MultiViewDataset, style: np.ndarray, out_dir):
    out = Path(out_dir)
    test_dir, helix_dir = out / "render" / "test", out / "render" / "helix"
    for d in (test_dir, helix_dir):
        if d.exists():
            shutil.rmtree(d)
    render_views(scene, dataset.cameras, dataset.times, test_dir)
    cams, times = helix_trajectory(cfg.helix)
    render_views(scene, cams, times, helix_dir, single_camera=True)
    for d in (test_dir, helix_dir):
        write_image(d / "style.imgf32", style)
    return test_dir, helix_dir


def evaluate_run(cfg: RunConfig, test_dir, helix_dir, originals_dir, *, flows_dir=None, provenance=None,
                 sections=None) -> BenchReport:
    report = evaluate(test_dir, originals_dir=originals_dir, flows_dir=flows_dir, provenance=provenance)
    helix = evaluate(helix_dir, require_originals=False, use_external_flow=False)
    report.sections["helix"] = {"aggregates": helix.aggregates, "n_frames": len(helix.frames),
                                "spec": cfg.snapshot()["helix"]}
    report.sections.update(sections or {})
    return report


def _stage_summary(result: TrainResult, dataset, targets, use_mlp=True) -> dict:
    l1, p = evaluate_l1(result.scene, targets, dataset, use_mlp=use_mlp)
    return {"final_l1": l1, "psnr": p, "steps": int(result.state.step)}


def run_pipeline(cfg: RunConfig, out_dir, opts: PipelineOptions = PipelineOptions()) -> PipelineResult:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if opts.data is None:
        data_dir = out / "data"
        with stage("synth"):
            synthesize(cfg, data_dir)
    else:
        data_dir = Path(opts.data)
    with stage("load"):
        dataset = load_dataset(data_dir)
        style = load_style(cfg, data_dir, opts.style_image)
    points = data_dir / "points.txt"
    tcfg = cfg.train
    geom = None
    if not opts.single_stage:
        with stage("train-geom"):
            geom = train_geometry(initial_scene(cfg, dataset, points), dataset, tcfg, out_dir=out)
    with stage("stylize"):
        stylized = run_stylize(cfg, dataset, style, out, opts.external_stylized)
    use_mlp = opts.use_mlp and cfg.pipeline.style_mlp
    if opts.single_stage:
        with stage("train-single"):
            train = train_single_stage(dataset, stylized, tcfg, cfg.pipeline.n_gaussians, out_dir=out)
        ckpt = SINGLE_CKPT
    else:
        with stage("train-style"):
            train = train_style(load_scene(out / GEOM_CKPT), stylized, dataset, tcfg, use_mlp=use_mlp, out_dir=out)
        ckpt = STYLE_CKPT
    scene = load_scene(out / ckpt)
    with stage("render"):
        test_dir, helix_dir = render_trajectories(cfg, scene, dataset, style, out)
    with stage("eval"):
        flows = opts.external_flow
        if flows is None and (data_dir / "flows").is_dir():
            flows = data_dir / "flows"
        training = {"mode": "single-stage" if opts.single_stage else "two-stage", "style_mlp": use_mlp,
                    "final": _stage_summary(train, dataset, stylized)}
        if geom is not None:
            training["geometry"] = _stage_summary(geom, dataset, dataset.frames)
        prov = {"scene_sha256": sha256_path(out / ckpt),
                "trajectory": {"test": {"cameras": len(dataset.cameras), "times": [float(t) for t in dataset.times]},
                               "helix": cfg.snapshot()["helix"]},
                "seeds": {"synth": cfg.synth.seed, "train": tcfg.seed, "stylize": cfg.stylize.seed},
                "flow_source": "external" if flows is not None else "lucas-kanade"}
        report = evaluate_run(cfg, test_dir, helix_dir, data_dir, flows_dir=flows, provenance=prov,
                              sections={"training": training})
        report.write(out)
    return PipelineResult(report, scene, train, geom)


# ---------------------------------------------------------------------------
# ablation (in memory, shares synth/geometry/stylization between variants)


def run_ablation(cfg: RunConfig, work_dir) -> dict:
    """Final reconstruction L1 against the stylized frames for the three training variants."""
    work = Path(work_dir)
    data_dir = work / "data"
    synthesize(cfg, data_dir)
    dataset = load_dataset(data_dir)
    style = load_style(cfg, data_dir)
    geom = train_geometry(initial_scene(cfg, dataset, data_dir / "points.txt"), dataset, cfg.train)
    stylized = run_stylize(cfg, dataset, style, work)
    with_mlp = train_style(geom.scene, stylized, dataset, cfg.train, use_mlp=True)
    without = train_style(geom.scene, stylized, dataset, cfg.train, use_mlp=False)
    single = train_single_stage(dataset, stylized, cfg.train, cfg.pipeline.n_gaussians)
    return {"two_stage_mlp": with_mlp.final_l1, "two_stage_no_mlp": without.final_l1,
            "single_stage": single.final_l1}
