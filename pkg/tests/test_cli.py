import json
import subprocess
import sys

import pytest

from dynstyle import cli
from dynstyle.config import RunConfig, parse_config
from dynstyle.manifest import MANIFEST_NAME

TINY = """[synth]
n_gaussians = 20
n_cameras = 2
n_times = 3
resolution = 32
focal = 40
"""


def run(*argv, env=None):
    return subprocess.run([sys.executable, "-m", "dynstyle.cli", *map(str, argv)], capture_output=True, text=True,
                          env=env, timeout=300)


@pytest.fixture
def tiny_cfg(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY)
    return p


def test_dump_defaults_round_trips():
    r = run("--dump-defaults")
    assert r.returncode == 0
    assert parse_config(r.stdout) == RunConfig()


def test_missing_subcommand_and_bad_flags_exit_1():
    assert run().returncode == 1
    assert run("synth").returncode == 1                    # --out is required
    assert run("synth", "--out", "x", "--bogus").returncode == 1
    assert run("synth", "--out", "x", "--threads", "0").returncode == 1


def test_bad_config_exits_1(tmp_path):
    assert run("synth", "--out", tmp_path / "o", "--config", tmp_path / "nope.cfg").returncode == 1
    bad = tmp_path / "bad.cfg"
    bad.write_text("[synth]\nwobble = 3\n")
    r = run("synth", "--out", tmp_path / "o", "--config", bad)
    assert r.returncode == 1 and "wobble" in r.stderr


def test_bad_log_level_exits_1(tmp_path):
    import os

    env = dict(os.environ, S4D_LOG="loud")
    r = run("synth", "--out", tmp_path / "o", env=env)
    assert r.returncode == 1 and "S4D_LOG" in r.stderr


def test_dry_run_writes_nothing(tmp_path, tiny_cfg):
    out = tmp_path / "o"
    r = run("synth", "--out", out, "--config", tiny_cfg, "--seed", "3", "--dry-run")
    assert r.returncode == 0
    doc = json.loads(r.stdout)
    assert doc["command"] == "synth" and doc["seeds"]["synth"] == 3
    assert doc["config"]["synth"]["n_gaussians"] == 20
    assert not out.exists()


def test_synth_then_eval(tmp_path, tiny_cfg):
    out = tmp_path / "scene"
    assert run("synth", "--out", out, "--config", tiny_cfg).returncode == 0
    for rel in ("cameras.txt", "style.imgf32", "points.txt", "originals/0/0002.imgf32", "flows/1/0001.flo",
                MANIFEST_NAME):
        assert (out / rel).exists(), rel
    r = run("eval", "--run", out, "--external-flow", out / "flows", "--out", tmp_path / "rep")
    assert r.returncode == 0, r.stderr
    rep = json.loads((tmp_path / "rep" / "report.json").read_text())
    assert rep["aggregates"]["ssim"]["mean"] == 1.0


def test_eval_layout_error_exits_1(tmp_path):
    (tmp_path / "frames").mkdir()
    r = run("eval", "--run", tmp_path)
    assert r.returncode == 1 and "missing style image" in r.stderr


def test_train_style_without_checkpoint_exits_1(tmp_path):
    r = run("train-style", "--data", tmp_path, "--out", tmp_path / "o")
    assert r.returncode == 1 and "checkpoint" in r.stderr


def test_gradcheck_rejects_zero_instances():
    assert run("gradcheck", "--instances", "0").returncode == 1


def test_numerical_failure_exits_2(tmp_path, monkeypatch):
    from dynstyle import pipeline

    def boom(cfg, out):
        raise FloatingPointError("non-finite render")

    monkeypatch.setattr(pipeline, "synthesize", boom)
    assert cli.main(["synth", "--out", str(tmp_path / "o")]) == 2
