"""``motiondepth`` command line: generate, train, eval, infer, gradcheck, selftest.

Exit codes: 0 success, 1 invalid input, 2 failure while running.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("motiondepth")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _resolution(text: str) -> tuple[int, int]:
    """``64`` or ``96x64`` (width x height); both multiples of 32."""
    try:
        parts = [int(p) for p in text.lower().split("x")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid resolution {text!r}") from None
    if len(parts) == 1:
        parts = parts * 2
    if len(parts) != 2 or any(p <= 0 or p % 32 for p in parts):
        raise argparse.ArgumentTypeError(f"resolution {text!r} must be positive multiples of 32")
    return parts[0], parts[1]


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="motiondepth", description="Depth from motion with a known displacement magnitude.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="render a synthetic Still Box dataset")
    g.add_argument("--out", required=True, type=Path)
    g.add_argument("--scenes", type=int, default=8)
    g.add_argument("--frames", type=int, default=20)
    g.add_argument("--resolution", type=_resolution, default=(64, 64), help="N or WxH, multiples of 32")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--val-fraction", type=float, default=0.25)

    t = sub.add_parser("train", help="train DepthNet and PoseNet")
    t.add_argument("--data", required=True, type=Path)
    t.add_argument("--out", required=True, type=Path)
    t.add_argument("--config", type=Path, help="JSON training config; flags below override it")
    t.add_argument("--supervise-orientation", action="store_true", help="use ground-truth rotations")
    t.add_argument("--resume", action="store_true")
    t.add_argument("--iterations", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--d0", type=float, help="nominal displacement")
    t.add_argument("--split", choices=["train", "all"], default="train")

    e = sub.add_parser("eval", help="depth metrics on a dataset")
    e.add_argument("--data", required=True, type=Path)
    e.add_argument("--ckpt", type=Path)
    e.add_argument("--baseline", choices=["constant-plane"])
    e.add_argument("--scale-mode", choices=["gt", "p", "none"], default="p")
    e.add_argument("--flip", action="store_true", help="evaluate upside-down inputs")
    e.add_argument("--split", choices=["val", "train", "all"], default="val")
    e.add_argument("--rotation", choices=["gt", "posenet"], default="gt", help="rotation source for stabilization")
    e.add_argument("--cap", type=float, nargs=2, default=(1e-3, 100.0), metavar=("MIN", "MAX"))
    e.add_argument("--out", type=Path, help="directory for report.json and report.txt")
    e.add_argument("--vis", action="store_true", help="also write per-frame depth maps")

    i = sub.add_parser("infer", help="depth map from one image pair")
    i.add_argument("--ckpt", required=True, type=Path)
    i.add_argument("--ref", required=True, type=Path)
    i.add_argument("--target", required=True, type=Path)
    i.add_argument("--displacement", required=True, type=float)
    i.add_argument("--angles", type=float, nargs=3, metavar=("RX", "RY", "RZ"), help="rotation target->ref, radians")
    i.add_argument("--pose-frames", type=Path, nargs="+", help="frames for PoseNet, target last")
    i.add_argument("--focal", type=float, help="focal length in pixels (default width/2)")
    i.add_argument("--out", required=True, type=Path, help="output PFM")
    i.add_argument("--vis", type=Path, help="inverse-depth PPM")

    c = sub.add_parser("gradcheck", help="finite-difference check of all differentiable ops")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--size", type=int, default=8)
    c.add_argument("--probes", type=int, default=100)

    s = sub.add_parser("selftest", help="quick invariant checks")
    s.add_argument("--seed", type=int, default=0)
    return p


# -- commands ----------------------------------------------------------------

def cmd_generate(args) -> int:
    from . import stillbox

    if args.scenes < 1 or args.frames < 2:
        raise UsageError("--scenes must be >= 1 and --frames >= 2")
    width, height = args.resolution
    scenes = stillbox.generate_dataset(args.scenes, args.seed, width=width, height=height, frames=args.frames)
    stillbox.write_dataset(scenes, args.out, val_fraction=args.val_fraction)
    print(f"wrote {args.scenes} scenes to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from . import stillbox, trainer

    if not (args.data / "index.json").is_file():
        raise UsageError(f"no dataset at {args.data}")
    base = trainer.TrainConfig.from_json(args.config).to_dict() if args.config else {}
    overrides = {"iterations": args.iterations, "seed": args.seed, "batch_size": args.batch_size, "lr": args.lr, "d0": args.d0}
    base.update({k: v for k, v in overrides.items() if v is not None})
    if args.supervise_orientation:
        base["supervision"] = "orientation"
    config = trainer.TrainConfig.from_dict(base)
    seqs = stillbox.load_dataset(args.data, None if args.split == "all" else "train")
    log.info("training on %d sequences, supervision=%s", len(seqs), config.supervision)
    trainer.train(seqs, config, args.out, resume=args.resume)
    print(f"checkpoint: {args.out / 'model.ckpt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from . import evaluation, stillbox

    if not (args.data / "index.json").is_file():
        raise UsageError(f"no dataset at {args.data}")
    if args.baseline is None and args.ckpt is None:
        raise UsageError("eval needs --ckpt or --baseline")
    seqs = stillbox.load_dataset(args.data, None if args.split == "all" else args.split)
    if not seqs:
        raise UsageError(f"split {args.split!r} is empty")
    mode = evaluation.ScaleMode(args.scale_mode.upper())
    cap = tuple(args.cap)
    if args.baseline == "constant-plane":
        report = evaluation.constant_plane_baseline(seqs, mode, flip_vertical=args.flip, cap=cap)
    else:
        vis = args.out / "depth" if (args.vis and args.out) else None
        report = evaluation.evaluate(args.ckpt, seqs, mode, args.flip, cap, args.rotation, vis)
    if args.out:
        report.write(args.out)
    print(report.to_table(), end="")
    return EXIT_OK


def cmd_infer(args) -> int:
    from . import evaluation, stillbox
    from .geometry import Intrinsics, rotation_matrix
    from .trainer import Model

    if args.angles is None and not args.pose_frames:
        raise UsageError("infer needs --angles or --pose-frames")
    if not args.displacement > 0:
        raise UsageError("--displacement must be positive")
    ref, target = stillbox.read_ppm(args.ref), stillbox.read_ppm(args.target)
    if ref.shape != target.shape:
        raise UsageError(f"image sizes differ: {ref.shape[1:]} vs {target.shape[1:]}")
    H, W = target.shape[1:]
    K = Intrinsics.centered(W, H, args.focal)
    model = Model.load(args.ckpt)
    rotation = rotation_matrix(args.angles) if args.angles is not None else None
    frames = np.stack([stillbox.read_ppm(f) for f in args.pose_frames]) if args.pose_frames else None
    depth = evaluation.infer_pair(ref, target, K, model, args.displacement, rotation, frames)
    stillbox.write_pfm(args.out, depth.astype(np.float32))
    if args.vis:
        stillbox.write_ppm(args.vis, evaluation.inverse_depth_colormap(depth))
    print(f"depth range {depth.min():.3f} .. {depth.max():.3f}; wrote {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import format_results, run_gradcheck

    if args.size < 8 or args.size % 2:
        raise UsageError("--size must be an even number >= 8")
    results = run_gradcheck(seed=args.seed, size=args.size, probes=args.probes)
    print(format_results(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    results = run_selftest(args.seed)
    width = max(len(name) for name, _, _ in results)
    for name, ok, detail in results:
        print(f"{name.ljust(width)}  {'PASS' if ok else 'FAIL'}  {detail}")
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_RUNTIME


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "gradcheck": cmd_gradcheck,
    "selftest": cmd_selftest,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")

    from .evaluation import EvaluationError
    from .networks import CheckpointError
    from .stillbox import DatasetError
    from .trainer import ConfigError

    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, DatasetError, EvaluationError, CheckpointError, FileNotFoundError) as exc:
        print(f"motiondepth {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"motiondepth {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
