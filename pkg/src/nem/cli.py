"""Command line entry points: generate, train, eval, render.

Exit codes: 0 on success, 1 on runtime failure (aborted training, I/O
errors mid-run), 2 on usage errors (bad flags, bad config, missing or
malformed input files).

Setting NEM_THREADS pins the BLAS thread count; it is applied before
numpy is imported, which is why the heavy modules are imported inside
main() rather than at the top of this file.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys


def _apply_thread_env() -> None:
    raw = os.environ.get("NEM_THREADS", "").strip()
    if not raw:
        return
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, raw)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nem",
        description="Differentiable clustering: dataset generation, training, "
        "evaluation and montage rendering.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, out_help: str, out_required: bool = True):
        p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", required=out_required, help=out_help)

    p = sub.add_parser("generate", help="write train/val/test NEMD datasets")
    common(p, "directory for the dataset files")

    p = sub.add_parser("train", help="train to early stopping, writing checkpoints and a run log")
    common(p, "run directory (checkpoints, runlog.csv)")
    p.add_argument("--data", required=True, help="dataset directory from generate")
    p.add_argument("--resume", default=None, help="continue from a last.nemc checkpoint")

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    common(p, "metrics CSV path (optional)", out_required=False)
    p.add_argument("--checkpoint", required=True, help="NEMC checkpoint to score")
    p.add_argument("--data", required=True, help="NEMD dataset file")
    p.add_argument("--k", type=int, default=None, help="evaluate with this many components")
    p.add_argument("--steps", type=int, default=None, help="evaluate with this many steps")

    p = sub.add_parser("render", help="write a per-step montage image for one sample")
    common(p, "output image (.ppm color, .pgm grayscale)")
    p.add_argument("--checkpoint", required=True, help="NEMC checkpoint to visualize")
    p.add_argument("--data", required=True, help="NEMD dataset file")
    p.add_argument("--index", type=int, default=0, help="sample index (default 0)")
    p.add_argument("--format", choices=("pgm", "ppm"), default=None, dest="fmt",
                   help="image format (default: from the file suffix)")
    p.add_argument("--k", type=int, default=None, help="render with this many components")
    p.add_argument("--steps", type=int, default=None, help="render this many steps")
    return parser


def _load_config(args):
    from .config import load_config

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _cmd_generate(args) -> int:
    from . import harness

    for f in harness.run_generate(_load_config(args), args.out):
        print(f"wrote {f.path}: {f.count} samples, sha256 {f.sha256}")
    return 0


def _cmd_train(args) -> int:
    from . import harness

    res = harness.run_train(_load_config(args), args.data, args.out, resume_from=args.resume)
    print(f"run {res.run_id}: {res.epochs_run} epochs this call")
    print(f"best validation loss {res.best_val} at epoch {res.best_epoch}")
    print(f"checkpoints: {res.best_path} (best), {res.last_path} (resumable)")
    print(f"log: {res.out_dir / 'runlog.csv'}")
    return 0


def _cmd_eval(args) -> int:
    from . import harness

    res = harness.run_eval(
        _load_config(args), args.checkpoint, args.data,
        out_path=args.out, k=args.k, steps=args.steps,
    )
    print(f"loss {res.loss}")
    skipped = f" ({res.ami_skipped} undefined)" if res.ami_skipped else ""
    print(f"AMI {res.ami_mean:.4f} ± {res.ami_std:.4f} over {res.ami_count} samples{skipped}")
    if res.bce_upper is not None:
        print(f"BCE upper bound {res.bce_upper:.4f} (mixture {res.bce_mixture:.4f})")
    shares = ", ".join(f"{m:.3f}" for m in res.component_mass)
    print(f"component mass [{shares}]")
    if args.out:
        print(f"wrote {args.out}")
    return 0


def _cmd_render(args) -> int:
    from . import harness

    path = harness.run_render(
        _load_config(args), args.checkpoint, args.data, args.out,
        index=args.index, fmt=args.fmt, k=args.k, steps=args.steps,
    )
    print(f"wrote {path}")
    return 0


_COMMANDS = {
    "generate": _cmd_generate,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "render": _cmd_render,
}


def main(argv=None) -> int:
    _apply_thread_env()
    args = _build_parser().parse_args(argv)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(message)s")

    from .datasets import FormatError
    from .tensor import ConfigError

    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, FormatError, FileNotFoundError, NotADirectoryError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # runtime failures: aborted training, bad checkpoints
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
