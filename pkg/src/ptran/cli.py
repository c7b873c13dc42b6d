"""``ptran`` command line: train, eval, inspect, synth.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
``PTRAN_THREADS`` caps BLAS/OpenMP threads; it must be read before numpy loads,
which is why the heavy imports below are deferred into the command handlers.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")


def _cap_threads() -> None:
    n = os.environ.get("PTRAN_THREADS")
    if n:
        for var in _THREAD_VARS:
            os.environ[var] = n


_cap_threads()


class UsageError(Exception):
    pass


def _cmd_train(args) -> int:
    from .trainer import load_run_config, train

    run = load_run_config(args.config, args.set or ())
    if args.epochs is not None:
        run.epochs = args.epochs
    result = train(run, resume=args.resume)
    for line in result.history:
        print(json.dumps(line, sort_keys=True))
    print(f"checkpoint: {result.last}")
    return 0


def _cmd_eval(args) -> int:
    from .trainer import evaluate

    print(json.dumps(evaluate(args.ckpt, args.data, args.task, args.split), sort_keys=True))
    return 0


def _cmd_inspect(args) -> int:
    from .trainer import inspect

    if not args.sentence.split():
        raise UsageError("--sentence must contain at least one token")
    for line in inspect(args.ckpt, args.sentence):
        print(line)
    return 0


def _cmd_synth(args) -> int:
    from .synthetic import write_splits

    for split, path in write_splits(args.task, args.out, args.n, args.seed).items():
        print(f"{split}: {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ptran", description="Train and inspect CRF encoders fit by mean field inference.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train from a JSON run config")
    t.add_argument("--config", required=True)
    t.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="dotted-path override, e.g. model.d=32 (repeatable)")
    t.add_argument("--epochs", type=int, help="shorthand for --set epochs=N")
    t.add_argument("--resume", action="store_true", help="continue from <out_dir>/last.ckpt")
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a data file")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--task", required=True, choices=("mlm", "pos", "ner", "cls", "cogs"))
    e.add_argument("--split", default="test")
    e.set_defaults(func=_cmd_eval)

    i = sub.add_parser("inspect", help="print the most probable head of each word per channel")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--sentence", required=True)
    i.set_defaults(func=_cmd_inspect)

    s = sub.add_parser("synth", help="write a generated train/valid/test corpus")
    s.add_argument("--task", required=True, choices=("mlm", "tagging", "ner", "cls", "cogs"))
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=2000)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=_cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .checkpoint import CorruptCheckpoint, IncompatibleCheckpoint
    from .data import CorpusIOError, DataFormatError
    from .model import ConfigError

    try:
        return args.func(args)
    except (UsageError, ConfigError, IncompatibleCheckpoint) as e:
        print(f"ptran: error: {e}", file=sys.stderr)
        return 2
    except (CorruptCheckpoint, CorpusIOError, DataFormatError, RuntimeError, ValueError, OSError) as e:
        print(f"ptran: failed: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
