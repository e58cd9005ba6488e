"""Per-frame stylization by direct Adam optimization.

Produces the stylized supervision frames for the style stage. The image is
parametrized as ``clip(init + blur(r))`` with a 1 px Gaussian blur on the
optimized residual ``r``: the frozen random-feature losses do not see
pixel-level noise, and plain per-pixel Adam fills that null space with it.
Local-contrastive samples are redrawn each iteration from a seeded
generator, so a run is a pure function of (inputs, seed).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import losses as L
from .imageio import read_image, write_image, write_png

log = logging.getLogger(__name__)

LR = 0.02
BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
AUX_ITERS = 25
SMOOTH_SIGMA = 1.0


class StylizeError(RuntimeError):
    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = trace or []


@dataclass
class StylizeResult:
    image: np.ndarray
    trace: list                    # per-iteration component dicts (value before the step)
    initial_loss: float
    final_loss: float
    id_value: float = 0.0
    illum_value: float = 0.0


def _run(init, targets, weights, iterations, seed, lr, smooth=None):
    smooth = SMOOTH_SIGMA if smooth is None else smooth
    base = np.clip(np.asarray(init, dtype=np.float64), 0.0, 1.0)
    # zero padding keeps the symmetric blur self-adjoint, so blur(g) is the exact residual gradient
    blur = (lambda a: gaussian_filter(a, (smooth, smooth, 0), mode="constant")) if smooth > 0 else (lambda a: a)
    r = np.zeros_like(base)
    m = np.zeros_like(base)
    v = np.zeros_like(base)
    b1, b2 = BETAS
    trace = []
    x = base
    for it in range(iterations):
        raw = base + blur(r)
        x = np.clip(raw, 0.0, 1.0)
        total, comp, g = L.total_hgst_loss(x, targets, weights, seed=(seed, it), need_grad=True)
        rec = dict(comp, total=total, iteration=it)
        trace.append(rec)
        if not (np.isfinite(total) and np.all(np.isfinite(g))):
            raise StylizeError(f"non-finite stylization loss at iteration {it}", trace)
        g = blur(g * ((raw >= 0.0) & (raw <= 1.0)))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** (it + 1))
        vhat = v / (1 - b2 ** (it + 1))
        r = r - lr * mhat / (np.sqrt(vhat) + ADAM_EPS)
    x = np.clip(base + blur(r), 0.0, 1.0)
    return x, trace


def _aux_generate(content, style, weights, seed, iterations=AUX_ITERS, lr=LR):
    """Short-budget generator G(content, style) used by the identity and illumination terms."""
    aux_w = L.LossWeights(**{**weights.__dict__, "id": 0.0, "illum": 0.0})
    targets = L.prepare_targets(content, style)
    return _run(content, targets, aux_w, iterations, seed, lr)[0]


def auxiliary_terms(content, style, weights: L.LossWeights, seed) -> tuple[float, float]:
    """Constant L_id and L_illum values for one (content, style) pair."""
    id_value = illum_value = 0.0
    if weights.id:
        i_cc = _aux_generate(content, content, weights, seed)
        i_ss = _aux_generate(style, style, weights, seed)
        id_value = L.identity_loss(i_cc, content, i_ss, style)
    if weights.illum and weights.illum_sigma > 0:
        def gen(c, s):
            return _aux_generate(c, s, weights, seed)
        illum_value = L.illumination_loss(gen, content, style, seed, weights.illum_sigma)
    return id_value, illum_value


def stylize_frame(content, style, weights: L.LossWeights | None = None, iterations: int = 300,
                  seed=0, *, lr: float = LR, init=None) -> StylizeResult:
    weights = weights or L.LossWeights()
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    content = np.asarray(content, dtype=np.float64)
    style = np.asarray(style, dtype=np.float64)
    if content.shape != style.shape:
        raise ValueError(f"content {content.shape} and style {style.shape} must share a shape")
    id_value, illum_value = auxiliary_terms(content, style, weights, seed)
    targets = L.prepare_targets(content, style, id_value, illum_value)
    start = content if init is None else init
    image, trace = _run(start, targets, weights, iterations, seed, lr)
    final, comp, _ = L.total_hgst_loss(image, targets, weights, seed=(seed, 0))
    if not np.isfinite(final):
        raise StylizeError("non-finite final stylization loss", trace)
    return StylizeResult(image, trace, trace[0]["total"], final, id_value, illum_value)


@dataclass
class StylizeJob:
    content_frames: dict           # (camera, time_index) -> (H, W, 3) image
    style_image: np.ndarray
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    iterations: int = 300
    step_size: float = LR
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        shapes = {np.shape(im) for im in self.content_frames.values()}
        if len(shapes) > 1:
            raise ValueError(f"content frames have mixed resolutions {sorted(shapes)}")


def stylize_sequence(job: StylizeJob) -> dict:
    """Stylize every frame; warm-start along time per camera, cold-start across cameras.

    A frame whose content is byte-identical to its predecessor reuses the
    predecessor's result: the subproblem is the same.
    """
    out = {}
    by_cam: dict = {}
    for cam, t in sorted(job.content_frames):
        by_cam.setdefault(cam, []).append(t)
    for cam in sorted(by_cam):
        prev_content = prev = None
        for t in by_cam[cam]:
            content = np.asarray(job.content_frames[(cam, t)], dtype=np.float64)
            if prev is not None and np.array_equal(content, prev_content):
                out[(cam, t)] = prev
                continue
            res = stylize_frame(content, job.style_image, job.weights, job.iterations,
                                seed=job.seed * 1000003 + cam * 1009 + t, lr=job.step_size, init=prev)
            log.debug("stylized cam %d t %d: %.4f -> %.4f", cam, t, res.initial_loss, res.final_loss)
            prev, prev_content = res.image, content
            out[(cam, t)] = res.image
    return out


def save_stylized(frames: dict, out_dir) -> None:
    root = Path(out_dir)
    for (cam, t), im in sorted(frames.items()):
        write_image(root / str(cam) / f"{t:04d}.imgf32", im)
        write_png(root / str(cam) / f"{t:04d}.png", im)


def load_stylized(directory, keys, shape) -> dict:
    """Read ``<dir>/<cam>/<t>.imgf32`` (or .png) for every key, checking shapes."""
    root = Path(directory)
    frames, problems = {}, []
    for cam, t in sorted(keys):
        base = root / str(cam) / f"{t:04d}"
        path = base.with_suffix(".imgf32")
        if not path.exists():
            path = base.with_suffix(".png")
        if not path.exists():
            problems.append(f"missing {base}.imgf32")
            continue
        im = read_image(path)
        if im.shape != tuple(shape):
            problems.append(f"{path}: shape {im.shape} != {tuple(shape)}")
            continue
        frames[(cam, t)] = im
    if problems:
        raise ValueError("external stylized frames invalid: " + "; ".join(problems))
    return frames
