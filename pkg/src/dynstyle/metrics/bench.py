"""Benchmark report over a run directory.

Layout::

    run/frames/<cam>/<t>.imgf32      frames under evaluation
    run/originals/<cam>/<t>.imgf32   content references
    run/style.imgf32                 style image
    run/flows/<cam>/<t>.flo          optional flow for pair (t, t+1)
    run/external_metrics.csv         optional externally computed metrics

Frames without a reference (e.g. helical renders) may be evaluated with
``require_originals=False``; full-reference metrics are then reported as
skipped.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import features as F
from ..imageio import read_flo, read_image
from ..losses import gram
from .flow import FlowField, estimate_flow, pair_warp_error
from .quality import psnr, ssim, uiqm

EXTERNAL_METRICS = ("lpips", "dists", "dino", "ckdn", "clip_iqa", "musiq", "qalign")
UNAVAILABLE = "unavailable: requires external model"
NO_ORIGINAL = "skipped: no original"
WARP_UNDEFINED = "undefined: flow maps every pixel out of bounds"
FRAME_METRICS = ("ssim", "mse", "psnr", "style_gram", "uiqm", "uicm", "uism", "uiconm", "warp")
REPORT_VERSION = 1


class LayoutError(ValueError):
    pass


@dataclass
class BenchReport:
    frames: list                     # per-frame dicts
    aggregates: dict                 # metric -> {"mean", "std", "count"}
    provenance: dict
    external: dict = field(default_factory=dict)
    sections: dict = field(default_factory=dict)   # extra named blocks (training summary, other trajectories)

    def to_json(self) -> str:
        doc = {"version": REPORT_VERSION, "frames": self.frames, "aggregates": self.aggregates,
               "provenance": self.provenance, "external": self.external, **self.sections}
        return json.dumps(_canon(doc), sort_keys=True, indent=1) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = ["cam", "t", *FRAME_METRICS]
        w.writerow(cols)
        for row in self.frames:
            w.writerow([_fmt(row.get(c, "")) for c in cols])
        return buf.getvalue()

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(self.to_json())
        (out / "report.csv").write_text(self.to_csv())


def _fmt(x):
    if isinstance(x, float):
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return format(x, ".10g")
    return x


def _canon(x):
    if isinstance(x, dict):
        return {str(k): _canon(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_canon(v) for v in x]
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if not math.isfinite(x):
            return _fmt(x)
        return float(format(x, ".10g"))
    if isinstance(x, np.integer):
        return int(x)
    return x


def _numeric_dirs(root: Path):
    if not root.is_dir():
        return []
    return sorted((p for p in root.iterdir() if p.is_dir() and p.name.isdigit()), key=lambda p: int(p.name))


def _index_frames(root: Path) -> dict:
    out = {}
    for d in _numeric_dirs(root):
        for p in d.glob("*.imgf32"):
            if p.stem.isdigit():
                out[(int(d.name), int(p.stem))] = p
    return out


def hash_inputs(paths) -> str:
    h = hashlib.sha256()
    for p in sorted(paths, key=str):
        h.update(str(p.name).encode())
        h.update(Path(p).read_bytes())
    return h.hexdigest()


def read_external_metrics(path) -> dict:
    """``metric,value`` rows (optionally ``cam,t`` columns); values kept verbatim as strings."""
    out: dict = {}
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for i, row in enumerate(rows, 2):
        if "metric" not in row or "value" not in row:
            raise LayoutError(f"{path}:{i}: expected 'metric' and 'value' columns")
        name = row["metric"].strip().lower()
        if row.get("cam") not in (None, "") and row.get("t") not in (None, ""):
            out.setdefault(name, {})[f"{int(row['cam'])}/{int(row['t'])}"] = row["value"].strip()
        else:
            out.setdefault(name, {})["all"] = row["value"].strip()
    return out


def _agg(values):
    """Mean/std over numeric entries; skipped (string) entries and NaN are excluded, +inf propagates."""
    vals = [v for v in values if isinstance(v, float) and not math.isnan(v)]
    if not vals:
        return {"mean": float("nan"), "std": float("nan"), "count": 0}
    a = np.asarray(vals)
    if not np.all(np.isfinite(a)):
        return {"mean": float(a.mean()), "std": float("nan"), "count": len(vals)}
    return {"mean": float(a.mean()), "std": float(a.std()), "count": len(vals)}


def _load_flow(path: Path) -> FlowField:
    return FlowField(*read_flo(path))


def evaluate(run_dir, *, originals_dir=None, flows_dir=None, provenance: dict | None = None,
             use_external_flow: bool = True, style_features_dir=None, require_originals: bool = True) -> BenchReport:
    run = Path(run_dir)
    if originals_dir is None:
        # frames must never serve as their own reference
        orig_root = run / "originals"
    else:
        orig_root = Path(originals_dir)
        orig_root = orig_root / "originals" if (orig_root / "originals").is_dir() else orig_root / "frames"
    flow_root = Path(flows_dir) if flows_dir is not None else run / "flows"
    problems = []
    frames = _index_frames(run / "frames")
    originals = _index_frames(orig_root) if orig_root is not None else {}
    style_path = run / "style.imgf32"
    if not frames:
        problems.append(f"{run / 'frames'}: no <cam>/<t>.imgf32 files")
    if not style_path.exists():
        problems.append(f"{style_path}: missing style image")
    for key in sorted(frames):
        if key not in originals and require_originals:
            problems.append(f"{orig_root}/{key[0]}/{key[1]:04d}.imgf32: missing original for frame {key}")
    if problems:
        raise LayoutError("; ".join(problems))

    style = read_image(style_path)
    if style_features_dir is not None:
        style_grams = [gram(lv) for lv in F.load_external_pyramid(style_features_dir).levels]
    else:
        style_grams = [gram(lv) for lv in F.extract(style).levels]

    rows = []
    by_cam: dict = {}
    for key in sorted(frames):
        by_cam.setdefault(key[0], []).append(key[1])
    images = {k: read_image(p) for k, p in frames.items()}
    for cam in sorted(by_cam):
        ts = by_cam[cam]
        for i, t in enumerate(ts):
            im = images[(cam, t)]
            pyr = F.extract(np.clip(im, 0, 1))
            q = uiqm(np.clip(im, 0, 1))
            row = {"cam": cam, "t": t,
                   "style_gram": float(sum(np.mean((gram(lv) - g) ** 2) for lv, g in zip(pyr.levels, style_grams))),
                   "uiqm": q.uiqm, "uicm": q.uicm, "uism": q.uism, "uiconm": q.uiconm}
            if (cam, t) in originals:
                ref = read_image(originals[(cam, t)])
                if im.shape != ref.shape:
                    raise LayoutError(f"frame {(cam, t)} shape {im.shape} != original {ref.shape}")
                row.update(ssim=ssim(im, ref), mse=float(np.mean((im - ref) ** 2)), psnr=psnr(im, ref))
            else:
                row.update(ssim=NO_ORIGINAL, mse=NO_ORIGINAL, psnr=NO_ORIGINAL)
            if i + 1 < len(ts):
                nxt = images[(cam, ts[i + 1])]
                flow_path = flow_root / str(cam) / f"{t:04d}.flo"
                if use_external_flow and flow_path.exists():
                    flow, src = _load_flow(flow_path), "external"
                else:
                    flow, src = estimate_flow(im, nxt), "lucas-kanade"
                try:
                    row["warp"] = pair_warp_error(im, nxt, flow)
                except ValueError:
                    row["warp"] = WARP_UNDEFINED
                row["warp_flow"] = src
            else:
                row["warp"] = "skipped: last frame of camera"
            rows.append(row)

    aggregates = {m: _agg([r[m] for r in rows]) for m in FRAME_METRICS}
    external = {name: UNAVAILABLE for name in EXTERNAL_METRICS}
    ext_path = run / "external_metrics.csv"
    if ext_path.exists():
        external.update(read_external_metrics(ext_path))
    inputs = list(frames.values()) + [originals[k] for k in sorted(frames) if k in originals] + [style_path]
    prov = {"input_sha256": hash_inputs(inputs), "n_frames": len(rows), "n_cameras": len(by_cam)}
    prov.update(provenance or {})
    return BenchReport(rows, aggregates, prov, external)
