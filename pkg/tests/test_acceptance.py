"""Acceptance suite: one test per criterion, each reported as a PASS/FAIL line in the terminal summary."""
import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import random_scene, record_acceptance
from dynstyle import features as F
from dynstyle import losses as L
from dynstyle.config import RunConfig, parse_config
from dynstyle.gradcheck import TOL, run_suites
from dynstyle.metrics.flow import FlowField, estimate_flow, warp_loss
from dynstyle.metrics.quality import ssim
from dynstyle.optim import lr_at
from dynstyle.pipeline import initial_scene, load_dataset, run_ablation, synthesize
from dynstyle.raster.render import render_scene
from dynstyle.scene import Scene
from dynstyle.style_mlp import mlp_init_batch
from dynstyle.stylizer import stylize_frame
from dynstyle.synth import style_texture
from dynstyle.trainer import TrainConfig, evaluate_l1, train_geometry

TOY = Path(__file__).resolve().parents[1] / "configs" / "toy.cfg"


def _with_mlp(scene: Scene, seed: int) -> Scene:
    gs = scene.gaussians
    return Scene(type(gs)(gs.mu, gs.rot, gs.scale, gs.opacity, gs.color, gs.sh1, mlp_init_batch(len(gs), seed)),
                 scene.deformation, scene.cameras, scene.background, scene.extent)


def test_1_gradient_suite():
    t0 = time.perf_counter()
    results = run_suites(0, 20)
    elapsed = time.perf_counter() - t0
    ok = all(r.instances >= 20 and r.ok for r in results) and elapsed < 60
    detail = ", ".join(f"{r.name} {r.max_rel_err:.1e}" for r in results) + f"; {elapsed:.1f} s"
    record_acceptance(1, f"gradients match central differences (rel < {TOL:g}, 20 instances per suite, < 60 s)",
                      ok, detail)
    assert ok, detail


def test_2_zero_init_mlps_leave_renders_bit_identical():
    mismatches = 0
    for seed in range(10):
        scene = random_scene(seed, sh=True, deform_noise=0.05)
        styled = _with_mlp(scene, seed)
        for t in (0.0, 0.37, 1.0):
            a = render_scene(scene, scene.cameras[0], t).image
            b = render_scene(styled, styled.cameras[0], t).image
            mismatches += a.tobytes() != b.tobytes()
    record_acceptance(2, "zero-init style MLPs leave renders byte-identical (10 scenes)", mismatches == 0,
                      f"{mismatches} mismatching renders")
    assert mismatches == 0


def test_3_alpha_plus_transmittance_is_one():
    worst = 0.0
    for seed in range(100):
        scene = random_scene(seed, n=6 + seed % 5, deform_noise=0.02 * (seed % 3))
        out = render_scene(scene, scene.cameras[0], (seed % 7) / 6)
        worst = max(worst, float(np.max(np.abs(out.alpha + out.transmittance - 1.0))))
    ok = worst <= 1e-6
    record_acceptance(3, "alpha + T = 1 within 1e-6 on 100 renders", ok, f"max deviation {worst:.2e}")
    assert ok


def test_4_loss_identities():
    rng = np.random.default_rng(0)
    img = rng.random((32, 32, 3))
    style = style_texture(32, 1)
    pyr = F.extract(img)
    const = np.full((16, 16, 3), 0.4)
    total, lcl, cont = L.consistency_loss(pyr, pyr, n=16, seed=0)
    w = L.LossWeights()
    cases = {
        "L_style(p, p)": (L.style_loss(pyr, pyr), 0.0),
        "L_style(style, style)": (L.style_loss(F.extract(style), F.extract(style)), 0.0),
        "L_id(I_c, I_c, I_s, I_s)": (L.identity_loss(img, img, style, style), 0.0),
        "L_content(p, p)": (L.content_loss(pyr, pyr), 0.0),
        "L_consistency content term": (cont, 0.0),
        "L_consistency = L_lcl + L_content": (total - (lcl + cont), 0.0),
        "L_consistency(0, 0) weighted": (L.weighted_total(dict.fromkeys(L.COMPONENTS, 0.0), w), 0.0),
        "L_lcl single pair": (L._lcl(np.array([[0.3, -0.2, 0.9]]), np.array([[0.3, -0.2, 0.9]]), 0.07)[0], 0.0),
        "L_ins identical positions": (L.inner_channel_loss(np.ones((4, 3, 3))), 0.0),
        "tv(constant)": (L.tv_loss(const), 0.0),
        "tv(flip) - tv": (L.tv_loss(img[:, ::-1]) - L.tv_loss(img), 0.0),
        "reconstruction(const, const)": (L.reconstruction_loss(const, const), 0.0),
        "gram_style_distance(p, p)": (L.gram_style_distance(pyr.levels, pyr.levels), 0.0),
        "warp_loss(static, zero flow)": (warp_loss([img] * 3, [FlowField(np.zeros((32, 32)), np.zeros((32, 32)))] * 2),
                                         0.0),
        "1 - ssim(x, x)": (1.0 - ssim(img, img), 0.0),
        "1 - ssim(const, const)": (1.0 - ssim(const, const), 0.0),
    }
    bad = [name for name, (got, want) in cases.items() if got != want]
    ok = len(cases) >= 12 and not bad
    record_acceptance(4, f"loss identities hold exactly ({len(cases)} cases)", ok, ", ".join(bad))
    assert ok, bad


def test_5_lcl_alignment():
    violations, compared = [], 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        m = rng.normal(size=(8, 8, 8))
        ds = L.sample_local_differences(m, m, 8, seed)
        aligned = L.local_contrastive_loss(ds)
        perms = [np.arange(len(ds.diffs_c))] + [rng.permutation(len(ds.diffs_c)) for _ in range(10)]
        for perm in perms:
            shuffled = L.LocalDifferenceSet(ds.anchors, ds.neighbors, ds.diffs_g, ds.diffs_c[perm])
            loss = L.local_contrastive_loss(shuffled)
            identity = bool(np.all(perm == np.arange(len(perm))))
            if (identity and loss != aligned) or (not identity and not loss > aligned):
                violations.append((seed, identity))
            compared += 1
    ok = not violations
    record_acceptance(5, "aligned L_lcl beats every permutation, ties only at identity (100 seeds x 10 perms)",
                      ok, f"{len(violations)} violations of {compared}")
    assert ok, violations[:5]


def test_6_warp_oracle():
    t0 = time.perf_counter()
    tex = style_texture(64, 7)
    shifted = np.roll(tex, -2, axis=1)
    exact = warp_loss([tex, shifted], [FlowField(np.full((64, 64), -2.0), np.zeros((64, 64)))])
    lk = warp_loss([tex, shifted], [estimate_flow(tex, shifted)])
    static = warp_loss([tex] * 4)
    elapsed = time.perf_counter() - t0
    ok = exact < 1e-6 and lk < 0.02 and static == 0.0 and elapsed < 10
    record_acceptance(6, "warp oracle: exact < 1e-6, Lucas-Kanade < 0.02, static = 0, < 10 s", ok,
                      f"exact {exact:.1e}, LK {lk:.4f}, static {static}, {elapsed:.1f} s")
    assert ok


@pytest.mark.slow
def test_7_toy_reconstruction(tmp_path):
    t0 = time.perf_counter()
    cfg = RunConfig()
    synthesize(cfg, tmp_path / "data")
    ds = load_dataset(tmp_path / "data")
    res = train_geometry(initial_scene(cfg, ds, tmp_path / "data" / "points.txt"), ds,
                         TrainConfig(iterations_geom=4000))
    _, p = evaluate_l1(res.scene, ds.frames, ds)
    elapsed = time.perf_counter() - t0
    ok = p >= 30.0 and elapsed < 600
    record_acceptance(7, "default synth, 4000 geometry iterations: train PSNR >= 30 dB in < 10 min", ok,
                      f"PSNR {p:.2f} dB, {elapsed:.0f} s")
    assert ok


@pytest.mark.slow
def test_8_ablation_ordering(tmp_path):
    base = parse_config(TOY.read_text(), str(TOY))
    rows = []
    for s in range(3):
        r = run_ablation(base.with_seed(s), tmp_path / str(s))
        rows.append(r)
    a = [r["two_stage_mlp"] <= r["two_stage_no_mlp"] for r in rows]
    b = [r["two_stage_no_mlp"] <= r["single_stage"] for r in rows]
    detail = "; ".join(f"seed {s}: mlp {r['two_stage_mlp']:.5f} no-mlp {r['two_stage_no_mlp']:.5f} "
                       f"single {r['single_stage']:.5f}" for s, r in enumerate(rows))
    ok = all(a) and all(b)
    record_acceptance(8, "ablation: MLP <= no-MLP <= single-stage final L1 (3 seeds)", ok, detail)
    assert all(a), f"(a) failed: {detail}"
    assert all(b), f"(b) failed: {detail}"


def test_9_stylizer_progress():
    w = L.LossWeights()
    ratios, repro = [], True
    for seed in range(5):
        rng = np.random.default_rng(seed)
        content, style = rng.random((64, 64, 3)), rng.random((64, 64, 3))
        res = stylize_frame(content, style, w, iterations=300, seed=seed)
        ratios.append(res.final_loss / res.initial_loss)
        again = stylize_frame(content, style, w, iterations=300, seed=seed)
        repro &= again.image.tobytes() == res.image.tobytes() and again.trace == res.trace
    ok = max(ratios) <= 0.5 and repro
    record_acceptance(9, "stylizer: 300 iterations at 64x64 reach <= 50% of the initial loss, reproducibly", ok,
                      f"final/initial {', '.join(f'{r:.3f}' for r in ratios)}; reproducible {repro}")
    assert ok


def _pipeline(out: Path, threads: int):
    r = subprocess.run([sys.executable, "-m", "dynstyle.cli", "pipeline", "--config", str(TOY), "--out", str(out),
                        "--threads", str(threads)], capture_output=True, text=True, timeout=1800)
    assert r.returncode == 0, r.stderr
    files = [out / "report.json", *sorted((out / "checkpoints").glob("*"))]
    return {f.relative_to(out).as_posix(): f.read_bytes() for f in files}


@pytest.mark.slow
def test_10_determinism_across_threads(tmp_path):
    runs = {"t1a": _pipeline(tmp_path / "t1a", 1), "t1b": _pipeline(tmp_path / "t1b", 1),
            "t8": _pipeline(tmp_path / "t8", 8)}
    ref = runs["t1a"]
    diffs = [f"{name}:{k}" for name, files in runs.items() for k in ref if files.get(k) != ref[k]]
    ok = not diffs and set(runs["t8"]) == set(ref) and len(ref) > 1
    record_acceptance(10, "toy pipeline: byte-identical report.json and checkpoints at --threads 1 and 8", ok,
                      ", ".join(diffs) or f"{len(ref)} files compared")
    assert ok, diffs


def test_11_schedule_endpoints():
    cfg = TrainConfig()
    total = cfg.iterations_geom + cfg.iterations_style
    mid = lr_at(total // 2, cfg)
    rel = abs(mid - math.sqrt(1e-4 * 1e-5)) / math.sqrt(1e-4 * 1e-5)
    ok = lr_at(0, cfg) == 1e-4 and lr_at(total, cfg) == 1e-5 and rel < 1e-12
    record_acceptance(11, "lr_at(0) = 1e-4, lr_at(total) = 1e-5 exactly, midpoint geometric mean", ok,
                      f"midpoint rel err {rel:.1e}")
    assert ok


@pytest.mark.parametrize("t", [0.0, 1.0])
def test_zero_init_equivalence_holds_with_deformation(t):
    # criterion 2 again at the time endpoints with a heavier deformation
    scene = random_scene(99, sh=True, deform_noise=0.2)
    a = render_scene(scene, scene.cameras[0], t).image
    b = render_scene(_with_mlp(scene, 5), scene.cameras[0], t).image
    assert a.tobytes() == b.tobytes()
