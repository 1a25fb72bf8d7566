"""
Command-line entry point: ``python -m src <command> ...``.

Exit codes: 0 success, 2 usage / configuration / input, 3 file errors,
4 numerical or graph failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from core import pipeline
from src.models import motion_model
from src.models.camera import Intrinsics
from src.utils import file_io
from src.utils.data_loaders import RunConfig, load_config
from src.utils.errors import ConfigError, FormatError, GraphError, InputError, NumericalError
from src.utils.log import setup_logging

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4


def _synth_intrinsics(args, cfg: RunConfig, depth_dir: Path) -> Intrinsics:
    """--calib, then [camera], then calib.txt next to the depth directory."""
    if args.calib:
        return file_io.read_calib(args.calib)
    intr = cfg.intrinsics()
    if intr is not None:
        return intr
    sibling = depth_dir.parent / "calib.txt"
    if sibling.is_file():
        return file_io.read_calib(sibling)
    raise ConfigError("no intrinsics: pass --calib, set [camera] or put calib.txt next to the depth directory")


def cmd_synth(args, cfg: RunConfig) -> int:
    model = motion_model.load(args.model)
    bounds = cfg.motion_model.bounds()
    if bounds:
        model = model.with_bounds(bounds)

    if args.depth_dir or args.disparity_dir:
        src_dir = Path(args.depth_dir or args.disparity_dir)
        intr = _synth_intrinsics(args, cfg, src_dir)
        depths = pipeline.load_depth_dir(src_dir, intr, disparity=bool(args.disparity_dir))
        sources = [str(src_dir)]
    else:
        run, intr = pipeline.simulate(cfg, args.seed, args.threads)
        depths = run.depths
        sources = ["simulated"]
    manifest = pipeline.run_synth(depths, model, intr, args.count, args.seed, Path(args.out), args.threads, sources)
    print(f"wrote {manifest['count']} training pairs to {args.out}")
    return EXIT_OK


def cmd_fit_motion(args, cfg: RunConfig) -> int:
    motions = pipeline.motions_from_file(Path(args.input), args.strides)
    model = pipeline.run_fit_motion(motions, Path(args.out), cfg.motion_model.bounds())
    for name, params in model.to_params().items():
        print(f"{name}: " + " ".join(f"{k}={v:.6g}" for k, v in params.items()))
    return EXIT_OK


def cmd_vo(args, cfg: RunConfig) -> int:
    seq = pipeline.load_sequence(Path(args.sequence), cfg)
    if args.calib:
        seq.intrinsics = file_io.read_calib(args.calib)
    _, traj = pipeline.run_vo(seq, cfg, Path(args.out), args.threads)
    print(f"integrated {len(traj)} poses, path length {traj.path_length()[-1]:.3f} m")
    return EXIT_OK


def cmd_slam(args, cfg: RunConfig) -> int:
    seq = pipeline.load_sequence(Path(args.sequence), cfg)
    result = pipeline.run_slam(seq, cfg, args.seed, args.threads)
    pipeline.write_slam_outputs(Path(args.out), result, args.seed, cfg)
    print(
        f"{len(result.loops_used)} loop edges, {result.iterations} iterations, chi2 {result.chi2:.6g}"
    )
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    gt = file_io.read_trajectory(args.gt)
    est = file_io.read_trajectory(args.est)
    _, text = pipeline.run_eval(gt, est, args.align, args.delta, args.step)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_simulate(args, cfg: RunConfig) -> int:
    run = pipeline.run_simulate(cfg, Path(args.out), args.seed, args.threads)
    print(f"simulated {len(run.trajectory)} frames into {args.out}")
    return EXIT_OK


def _stride_list(text: str) -> tuple[int, ...]:
    try:
        strides = tuple(int(s) for s in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if any(s < 1 for s in strides):
        raise argparse.ArgumentTypeError(f"strides must be >= 1, got {text!r}")
    return strides


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="run seed (default: [run] seed, else 0)")
    common.add_argument("--threads", type=int, default=None, help="worker threads for data-parallel stages")
    common.add_argument("--config", default=None, help="INI-style run configuration")
    common.add_argument("-v", "--verbose", action="count", default=0, help="-v info, -vv debug")

    parser = argparse.ArgumentParser(prog="python -m src", description="Synthetic-flow VO / SLAM toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="synthesize flow training pairs")
    p.add_argument("--model", required=True, help="motion model file (fit-motion output)")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--depth-dir", help="16-bit depth PNGs (raw / 256 m)")
    src.add_argument("--disparity-dir", help="16-bit disparity PNGs (raw / 256 px)")
    p.add_argument("--calib", help="calibration file (key = value)")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit-motion", parents=[common], help="fit the Student-t motion model")
    p.add_argument("input", help="KITTI/TUM pose file, or motion records (.csv)")
    p.add_argument("--out", required=True)
    p.add_argument(
        "--strides", type=_stride_list, default=(1,), help="frame gaps to pool motions over, e.g. 1,2,3 (pose files only)"
    )
    p.set_defaults(func=cmd_fit_motion)

    p = sub.add_parser("vo", parents=[common], help="frame-to-frame odometry over a sequence")
    p.add_argument("sequence", help="sequence directory")
    p.add_argument("--calib")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_vo)

    p = sub.add_parser("slam", parents=[common], help="odometry + loop closure + pose-graph optimization")
    p.add_argument("sequence", help="sequence directory")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_slam)

    p = sub.add_parser("eval", parents=[common], help="ATE / RPE / KITTI errors")
    p.add_argument("gt")
    p.add_argument("est")
    p.add_argument("--align", choices=("rigid", "none"), default="rigid")
    p.add_argument("--delta", type=int, default=1, help="RPE frame gap")
    p.add_argument("--step", type=int, default=1, help="KITTI start-frame stride")
    p.add_argument("--out", help="also write the report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("simulate", parents=[common], help="render a synthetic sequence")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    setup_logging(args.verbose)

    try:
        cfg = load_config(args.config)
        args.seed = cfg.run.seed if args.seed is None else args.seed
        args.threads = cfg.run.threads if args.threads is None else args.threads
        if args.threads < 1:
            raise ConfigError(f"--threads must be >= 1, got {args.threads}")
        return args.func(args, cfg)
    except (ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericalError, GraphError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
