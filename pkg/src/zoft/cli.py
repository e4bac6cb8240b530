"""Command line entry point.

Exit codes: 0 success, 2 config error, 3 numeric divergence, 4 bound violation.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from . import harness
from .config import ExperimentConfig
from .errors import BoundViolationError, CheckpointError, ConfigError, DivergenceError

_COMMANDS = {
    "train-finetuner": harness.cmd_train_finetuner,
    "finetune": harness.cmd_finetune,
    "compare": harness.cmd_compare,
    "sweep-lr": harness.cmd_sweep_lr,
    "ablate": harness.cmd_ablate,
    "verify-bounds": harness.cmd_verify_bounds,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="zoft",
        description="Learned per-block perturbation scales for zeroth-order fine-tuning",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", required=True, help="INI experiment config")
        cmd.add_argument("--out", default="zoft_out", help="output directory")
        cmd.add_argument("--seed", type=int, default=None,
                         help="override the task seed from the config")
        cmd.add_argument("--threads", type=int, default=None,
                         help="worker threads (default: ZOFT_THREADS or 1)")
        cmd.add_argument("--timing", action="store_true",
                         help="record real wall times (output no longer byte-stable)")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    threads = args.threads
    if threads is None:
        threads = int(os.environ.get("ZOFT_THREADS", "1"))
    try:
        cfg = ExperimentConfig.load(args.config)
        if args.seed is not None and cfg.has_section("task"):
            cfg._parser.set("task", "seed", str(args.seed))
        code = _COMMANDS[args.command](cfg, Path(args.out), threads=threads,
                                       timing=args.timing)
    except (ConfigError, CheckpointError, FileNotFoundError) as exc:
        print(f"zoft: config error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"zoft: divergence: {exc}", file=sys.stderr)
        return 3
    except BoundViolationError as exc:
        print(f"zoft: bound violation: {exc}", file=sys.stderr)
        return 4
    if code == 4:
        print("zoft: bound violation (see bounds.csv)", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
