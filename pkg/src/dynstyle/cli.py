"""``dynstyle`` command line: one subcommand per pipeline stage plus ``pipeline`` and ``gradcheck``.

Exit codes: 0 success, 1 validation failure (bad flags, config or inputs),
2 numerical failure (non-finite values, gradient check above tolerance).

Heavy modules are imported only after ``--threads`` has been applied, since
the numba pool size is fixed at import.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class ValidationError(Exception):
    """Bad user input: exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "--spec", dest="config", type=Path, help="sectioned key = value config file")
    common.add_argument("--seed", type=int, help="override the synth, train and stylize seeds")
    common.add_argument("--threads", type=int, default=1, help="numba worker threads (results do not depend on it)")
    common.add_argument("--dry-run", action="store_true", help="validate and print the manifest; write nothing")

    p = _Parser(prog="dynstyle", description=__doc__.splitlines()[0])
    p.add_argument("--dump-defaults", action="store_true", help="print every config default and exit")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic multi-view video")
    s.add_argument("--out", type=Path, required=True)

    s = sub.add_parser("train-geom", parents=[common], help="fit geometry to content frames")
    s.add_argument("--data", type=Path, required=True, help="Neu3D-style dataset directory")
    s.add_argument("--points", type=Path, help="x y z r g b point cloud (default <data>/points.txt)")
    s.add_argument("--out", type=Path, required=True)

    s = sub.add_parser("stylize", parents=[common], help="stylize every content frame into <out>/stylized")
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--style", type=Path, help="style image (default <data>/style.imgf32, else built-in texture)")
    s.add_argument("--external-stylized", type=Path, help="ingest precomputed stylized frames instead")
    s.add_argument("--out", type=Path, required=True)

    s = sub.add_parser("train-style", parents=[common], help="fit style attributes to stylized frames")
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--checkpoint", type=Path, help="geometry checkpoint (default <out>/checkpoints/geom_final.s4ds)")
    s.add_argument("--stylized", type=Path, help="stylized frames (default <out>/stylized)")
    s.add_argument("--no-style-mlp", action="store_true", help="ablation: colors and opacities only")
    s.add_argument("--out", type=Path, required=True)

    s = sub.add_parser("render", parents=[common], help="render test views and the helical trajectory")
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--style", type=Path)
    s.add_argument("--out", type=Path, required=True)

    s = sub.add_parser("eval", parents=[common], help="benchmark a frames/ directory")
    s.add_argument("--run", type=Path, required=True, help="directory with frames/ and style.imgf32")
    s.add_argument("--originals", type=Path, help="directory with originals/ (default: the run directory)")
    s.add_argument("--no-originals", action="store_true", help="skip full-reference metrics (novel views)")
    s.add_argument("--external-flow", type=Path, help="flows/<cam>/<t>.flo to use instead of Lucas-Kanade")
    s.add_argument("--out", type=Path, help="report directory (default: the run directory)")

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every backward pass")
    s.add_argument("--instances", type=int, default=20)

    s = sub.add_parser("pipeline", parents=[common], help="synth/load, train-geom, stylize, train-style, render, eval")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--data", type=Path, help="use this dataset instead of synthesizing one")
    s.add_argument("--style", type=Path)
    s.add_argument("--external-stylized", type=Path)
    s.add_argument("--external-flow", type=Path)
    s.add_argument("--no-style-mlp", action="store_true")
    s.add_argument("--single-stage", action="store_true", help="baseline: train on stylized frames from random init")
    return p


def _setup_logging():
    name = os.environ.get("S4D_LOG", "error").lower()
    if name not in LOG_LEVELS:
        raise ValidationError(f"S4D_LOG must be one of {', '.join(LOG_LEVELS)}, got {name!r}")
    logging.basicConfig(level=LOG_LEVELS[name], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _require(path, what):
    if path is not None and not Path(path).exists():
        raise ValidationError(f"{what} not found: {path}")


def _load_config(args):
    from .config import RunConfig, parse_config

    if args.config is None:
        cfg = RunConfig()
    else:
        _require(args.config, "config file")
        cfg = parse_config(args.config.read_text(), str(args.config))
    return cfg.with_seed(args.seed) if args.seed is not None else cfg


def _manifest(args, cfg, inputs: dict, artifacts: list, **options):
    from .manifest import RunManifest

    m = RunManifest(args.command, cfg.snapshot(),
                    {"synth": cfg.synth.seed, "train": cfg.train.seed, "stylize": cfg.stylize.seed},
                    artifacts=artifacts, options={k: (str(v) if isinstance(v, Path) else v) for k, v in options.items()})
    for label, path in inputs.items():
        if path is not None:
            _require(path, label)
            m.add_input(label, path)
    return m


def _begin(args, manifest, out) -> bool:
    """Emit the manifest; returns False for a dry run (nothing else may be written)."""
    if args.dry_run:
        sys.stdout.write(manifest.to_json())
        return False
    manifest.write(out)
    return True


def _dataset(path):
    from .pipeline import load_dataset

    _require(path, "dataset directory")
    return load_dataset(path)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args, cfg) -> int:
    from . import pipeline as P

    m = _manifest(args, cfg, {}, ["cameras.txt", "originals/", "frames/", "flows/", "style.imgf32", "points.txt"])
    if not _begin(args, m, args.out):
        return 0
    P.synthesize(cfg, args.out)
    print(f"wrote synthetic scene to {args.out}")
    return 0


def cmd_train_geom(args, cfg) -> int:
    from . import pipeline as P
    from .trainer import train_geometry

    dataset = _dataset(args.data)
    points = args.points if args.points is not None else args.data / "points.txt"
    if args.points is not None:
        _require(points, "point cloud")
    m = _manifest(args, cfg, {"data": args.data, "points": points if points.exists() else None},
                  [P.GEOM_CKPT, "checkpoints/geom_final.adam", "geom_log.jsonl"])
    if not _begin(args, m, args.out):
        return 0
    res = train_geometry(P.initial_scene(cfg, dataset, points), dataset, cfg.train, out_dir=args.out)
    print(f"geometry: final L1 {res.final_l1:.6f} -> {args.out / P.GEOM_CKPT}")
    return 0


def cmd_stylize(args, cfg) -> int:
    from . import pipeline as P

    dataset = _dataset(args.data)
    style = P.load_style(cfg, args.data, args.style) if args.style is None or args.style.exists() else None
    if style is None:
        raise ValidationError(f"style image not found: {args.style}")
    if args.external_stylized is not None:
        from .stylizer import load_stylized

        _require(args.external_stylized, "external stylized frames")
        load_stylized(args.external_stylized, dataset.keys(), dataset.shape)
    m = _manifest(args, cfg, {"data": args.data, "style": args.style, "external_stylized": args.external_stylized},
                  ["stylized/"])
    if not _begin(args, m, args.out):
        return 0
    P.run_stylize(cfg, dataset, style, args.out, args.external_stylized)
    print(f"wrote {len(dataset)} stylized frames to {args.out / 'stylized'}")
    return 0


def cmd_train_style(args, cfg) -> int:
    from . import pipeline as P
    from .scene import load_scene
    from .stylizer import load_stylized
    from .trainer import train_style

    ckpt = args.checkpoint if args.checkpoint is not None else args.out / P.GEOM_CKPT
    if not ckpt.exists():
        raise ValidationError(f"geometry checkpoint not found: {ckpt} (run train-geom first or pass --checkpoint)")
    stylized_dir = args.stylized if args.stylized is not None else args.out / "stylized"
    _require(stylized_dir, "stylized frames directory (run stylize first or pass --stylized)")
    dataset = _dataset(args.data)
    stylized = load_stylized(stylized_dir, dataset.keys(), dataset.shape)
    scene = load_scene(ckpt)
    use_mlp = cfg.pipeline.style_mlp and not args.no_style_mlp
    m = _manifest(args, cfg, {"data": args.data, "checkpoint": ckpt, "stylized": stylized_dir},
                  [P.STYLE_CKPT, "checkpoints/style_final.adam", "style_log.jsonl"], style_mlp=use_mlp)
    if not _begin(args, m, args.out):
        return 0
    res = train_style(scene, stylized, dataset, cfg.train, use_mlp=use_mlp, out_dir=args.out)
    print(f"style: final L1 {res.final_l1:.6f} -> {args.out / P.STYLE_CKPT}")
    return 0


def cmd_render(args, cfg) -> int:
    from . import pipeline as P
    from .scene import load_scene

    _require(args.checkpoint, "checkpoint")
    _require(args.style, "style image")
    dataset = _dataset(args.data)
    scene = load_scene(args.checkpoint)
    style = P.load_style(cfg, args.data, args.style)
    m = _manifest(args, cfg, {"data": args.data, "checkpoint": args.checkpoint, "style": args.style},
                  ["render/test/", "render/helix/"])
    if not _begin(args, m, args.out):
        return 0
    test_dir, helix_dir = P.render_trajectories(cfg, scene, dataset, style, args.out)
    print(f"rendered {test_dir} and {helix_dir}")
    return 0


def cmd_eval(args, cfg) -> int:
    from .metrics.bench import evaluate

    _require(args.run, "run directory")
    _require(args.originals, "originals directory")
    _require(args.external_flow, "external flow directory")
    out = args.out if args.out is not None else args.run
    m = _manifest(args, cfg, {"run": args.run, "originals": args.originals, "external_flow": args.external_flow},
                  ["report.json", "report.csv"], require_originals=not args.no_originals)
    # layout problems surface before anything is written
    report = evaluate(args.run, originals_dir=args.originals, flows_dir=args.external_flow,
                      require_originals=not args.no_originals)
    if not _begin(args, m, out):
        return 0
    report.write(out)
    agg = report.aggregates
    print(" ".join(f"{k}={agg[k]['mean']:.6g}" for k in ("ssim", "psnr", "warp", "uiqm")))
    return 0


def cmd_gradcheck(args, cfg) -> int:
    from .gradcheck import TOL, run_suites

    if args.instances < 1:
        raise ValidationError("--instances must be >= 1")
    if args.dry_run:
        return 0
    results = run_suites(args.seed if args.seed is not None else 0, args.instances)
    for r in results:
        print(f"{r.name:12s} instances={r.instances} checked={r.checked} max_rel_err={r.max_rel_err:.3e} "
              f"{'ok' if r.ok else 'FAIL'}")
    ok = all(r.ok for r in results)
    if not ok:
        print(f"gradient check exceeded tolerance {TOL:g}", file=sys.stderr)
    return 0 if ok else 2


def cmd_pipeline(args, cfg) -> int:
    from . import pipeline as P

    for label in ("data", "style", "external_stylized", "external_flow"):
        _require(getattr(args, label), label.replace("_", " "))
    opts = P.PipelineOptions(use_mlp=not args.no_style_mlp, single_stage=args.single_stage, data=args.data,
                             style_image=args.style, external_stylized=args.external_stylized,
                             external_flow=args.external_flow)
    arts = ["data/", "stylized/", "render/", "report.json", "report.csv"]
    arts += ["checkpoints/single_final.s4ds"] if args.single_stage else [P.GEOM_CKPT, P.STYLE_CKPT]
    m = _manifest(args, cfg, {"config": args.config, "data": args.data, "style": args.style,
                              "external_stylized": args.external_stylized, "external_flow": args.external_flow},
                  arts, style_mlp=opts.use_mlp and cfg.pipeline.style_mlp, single_stage=args.single_stage)
    if not _begin(args, m, args.out):
        return 0
    res = P.run_pipeline(cfg, args.out, opts)
    agg = res.report.aggregates
    final = res.report.sections["training"]["final"]
    print(f"pipeline done: final L1 {final['final_l1']:.6f}, test SSIM {agg['ssim']['mean']:.4f}, "
          f"warp {agg['warp']['mean']:.5f} -> {args.out / 'report.json'}")
    return 0


COMMANDS = {"synth": cmd_synth, "train-geom": cmd_train_geom, "stylize": cmd_stylize,
            "train-style": cmd_train_style, "render": cmd_render, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "pipeline": cmd_pipeline}


def _exit_code(exc: BaseException) -> int:
    from .stylizer import StylizeError

    if isinstance(exc, (FloatingPointError, StylizeError)):
        return 2
    return 1


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.dump_defaults:
        from .config import dump_defaults

        sys.stdout.write(dump_defaults())
        return 0
    if args.command is None:
        parser.error("a subcommand is required (or --dump-defaults)")
    try:
        _setup_logging()
        from .runtime import configure_threads

        configure_threads(args.threads)
    except (ValidationError, ValueError) as e:
        print(f"dynstyle: error: {e}", file=sys.stderr)
        return 1

    from .config import ConfigError
    from .pipeline import StageError

    try:
        cfg = _load_config(args)
        return COMMANDS[args.command](args, cfg)
    except StageError as e:
        print(f"dynstyle: error: {e}", file=sys.stderr)
        return _exit_code(e.cause)
    except (ValidationError, ConfigError, OSError, ValueError) as e:
        print(f"dynstyle: error: {e}", file=sys.stderr)
        return 1
    except FloatingPointError as e:
        print(f"dynstyle: numerical failure: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - stylizer and other numerical failures
        code = _exit_code(e)
        if code == 1:
            raise
        print(f"dynstyle: numerical failure: {e}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
