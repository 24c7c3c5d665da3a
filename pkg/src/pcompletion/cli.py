"""Command-line front end: ``pcomplete <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import os
import re
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
from threadpoolctl import threadpool_limits

from . import geometry, pipeline, render, verify
from .nnkit import CheckpointError

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage().strip()}\n{self.prog}: error: {message}")


def _size(text: str):
    m = re.fullmatch(r"(\d+)x(\d+)", text)
    if not m:
        raise argparse.ArgumentTypeError(f"size must look like HxW, got {text!r}")
    return int(m.group(1)), int(m.group(2))


def _view(text: str):
    if text == "all":
        return text
    try:
        v = int(text)
    except ValueError:
        v = -1
    if not 0 <= v <= 7:
        raise argparse.ArgumentTypeError(f"view must be an integer in 0..7 or 'all', got {text!r}")
    return v


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="pcomplete", description="Point cloud completion toolkit.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic (partial, groundtruth) dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--shapes", default=",".join(geometry.SHAPE_KINDS))
    p.add_argument("--per-shape", type=int, default=4)
    p.add_argument("--points", type=int, default=512)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("render", help="render depth maps of a cloud to 16-bit PGM")
    p.add_argument("--in", dest="inp", type=Path, required=True)
    p.add_argument("--view", type=_view, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--size", type=_size, default=(256, 256))
    p.add_argument("--rho", type=float, default=3.0)

    p = sub.add_parser("train", help="train from a config file on a dataset directory")
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("complete", help="complete one partial cloud with a trained checkpoint")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--in", dest="inp", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("eval", help="write a metric report for a checkpoint on a dataset")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--report", type=Path, required=True)
    p.add_argument("--gallery", type=Path)
    p.add_argument("--sequence", type=Path)

    p = sub.add_parser("gradcheck", help="finite-difference verification of all gradients")
    p.add_argument("--scope", choices=verify.SCOPES, default="all")
    p.add_argument("--seed", type=int, default=0)
    return ap


def _require_file(path: Path, what: str):
    if not path.is_file():
        raise UsageError(f"{what} {path} does not exist")


def _require_dir(path: Path, what: str):
    if not path.is_dir():
        raise UsageError(f"{what} {path} is not a directory")


def _require_parent(path: Path):
    parent = path.parent if str(path.parent) else Path(".")
    if not parent.is_dir():
        raise UsageError(f"output directory {parent} does not exist")


def _validate(args):
    """Every path and value is checked here, before any work starts."""
    cmd = args.command
    if cmd == "synth":
        shapes = [s.strip() for s in args.shapes.split(",") if s.strip()]
        bad = [s for s in shapes if s not in geometry.SHAPE_KINDS]
        if not shapes or bad:
            raise UsageError(f"--shapes must list kinds from {', '.join(geometry.SHAPE_KINDS)}")
        if args.per_shape < 1 or args.points < 2:
            raise UsageError("--per-shape must be >= 1 and --points >= 2")
        args.shapes = shapes
    elif cmd == "render":
        _require_file(args.inp, "input cloud")
        _require_parent(args.out)
        h, w = args.size
        if h < 8 or w < 8:
            raise UsageError("--size must be at least 8x8")
        if args.rho <= 0:
            raise UsageError("--rho must be positive")
    elif cmd == "train":
        _require_file(args.config, "config file")
        _require_dir(args.data, "data directory")
        try:
            args.cfg = pipeline.load_config(args.config)
        except pipeline.ConfigError as exc:
            raise UsageError(f"{args.config}: {exc}") from None
    elif cmd == "complete":
        _require_file(args.ckpt, "checkpoint")
        _require_file(args.inp, "input cloud")
        _require_parent(args.out)
    elif cmd == "eval":
        _require_file(args.ckpt, "checkpoint")
        _require_dir(args.data, "data directory")
        _require_parent(args.report)
        if args.gallery is not None:
            _require_dir(args.gallery, "gallery directory")
        if args.sequence is not None:
            _require_dir(args.sequence, "sequence directory")


def _view_paths(out: Path) -> List[Path]:
    return [out.with_name(f"{out.stem}_{i}{out.suffix or '.pgm'}") for i in range(8)]


def _run(args) -> int:
    cmd = args.command
    if cmd == "synth":
        data = pipeline.synthesize_dataset(args.shapes, args.per_shape, args.points, args.seed)
        pipeline.save_dataset(data, args.out)
        print(f"wrote {len(data)} pairs to {args.out}")
    elif cmd == "render":
        cloud = geometry.load_xyz(args.inp)
        cfg = render.RenderConfig(args.size[0], args.size[1], args.rho)
        views = range(8) if args.view == "all" else [args.view]
        paths = _view_paths(args.out) if args.view == "all" else [args.out]
        for v, path in zip(views, paths):
            image, _ = render.render_view(cloud, v, cfg)
            render.write_pgm(image, path)
    elif cmd == "train":
        data = pipeline.load_dataset(args.data)

        def progress(rec):
            if rec.step % 10 == 0:
                print(f"step {rec.step} total {rec.total:.5f} d_loss {rec.losses['d_loss']:.5f}", flush=True)

        pipeline.train(data, args.cfg, args.out, progress)
    elif cmd == "complete":
        model, cfg = pipeline.load_model(args.ckpt)
        partial = geometry.load_xyz(args.inp)
        if len(partial) != cfg.n_partial:
            partial = geometry.resample(partial, cfg.n_partial, np.random.default_rng(0))
        y = pipeline.complete(model, partial, cfg.spec.n_points)[2]
        geometry.save_xyz(y, args.out)
    elif cmd == "eval":
        data = pipeline.load_dataset(args.data)
        gallery = pipeline.load_cloud_dir(args.gallery) if args.gallery else None
        sequence = pipeline.load_cloud_dir(args.sequence) if args.sequence else None
        rows = pipeline.evaluate(args.ckpt, data, gallery, sequence)
        pipeline.write_report(rows, args.report)
    elif cmd == "gradcheck":
        results = verify.run_scope(args.scope, args.seed)
        print(verify.format_table(results))
        if not all(r.passed for r in results):
            return EXIT_RUNTIME
    return EXIT_OK


def _thread_cap() -> Optional[int]:
    raw = os.environ.get("SPARE_THREADS")
    if raw is None or raw == "":
        return None
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"SPARE_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"SPARE_THREADS must be a positive integer, got {raw!r}")
    return n


def run_cli(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _validate(args)
        cap = _thread_cap()
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    try:
        with threadpool_limits(cap):
            return _run(args)
    except (OSError, ValueError, CheckpointError, RuntimeError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"pcomplete {args.command}: {msg}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        sys.stdout.flush()


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
