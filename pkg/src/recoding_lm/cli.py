"""Command-line entry point: ``recoding-lm {train,eval,trace,gradcheck,ablate}``.

Exit codes: 0 success, 1 validation or usage error, 2 numerical divergence.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time

from .checkpoint import CheckpointError, load_checkpoint
from .config import SIGNAL_KINDS, ConfigError, load_config
from .corpus import CorpusError, read_lines
from .harness import ablate, evaluate, trace, train, write_trace_csv
from .lstm import DivergenceError
from .verifier import gradcheck_suite

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad arguments, which is reserved for divergence here
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _int_list(text: str) -> list[int]:
    try:
        values = [int(p) for p in text.split(",") if p.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc
    if any(v < 0 for v in values):
        raise argparse.ArgumentTypeError("step positions must be non-negative")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="recoding-lm", description="LSTM language model with activation recoding")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model and keep the best-validation checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--valid", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics", help="per-batch CSV log (default: <out>.metrics.csv)")

    p = sub.add_parser("eval", help="corpus perplexity")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--mode", choices=("stream", "sentence"), default="stream")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int, help="seed for evaluation-time signal masks")

    p = sub.add_parser("trace", help="per-token surprisal and error-signal CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--sentences", required=True)
    p.add_argument("--recode-at", type=_int_list, help="0-based positions, e.g. 2,5 (default: every step)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="CSV path (default: stdout)")

    p = sub.add_parser("gradcheck", help="finite-difference checks on a toy model")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("ablate", help="evaluate with the recoder stripped or grafted")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--mode", choices=("strip", "graft"), required=True)
    p.add_argument("--signal", choices=SIGNAL_KINDS)
    p.add_argument("--alpha", type=float)
    p.add_argument("--corpus", help="evaluation corpus (required)")
    p.add_argument("--strict", action="store_true", help="refuse to initialise missing ensemble decoders")
    p.add_argument("--seed", type=int)
    return parser


def _cmd_train(args) -> int:
    config = load_config(args.config)
    metrics = args.metrics or f"{args.out}.metrics.csv"
    result = train(config, read_lines(args.train), read_lines(args.valid), out=args.out, metrics_path=metrics)
    print(f"best_epoch={result.best_epoch}")
    print("valid_perplexity=" + ",".join(f"{p:.6f}" for p in result.valid_history))
    print(f"checkpoint={args.out}")
    print(f"metrics={metrics}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    batch = args.batch_size or ckpt.config.eval_batch_size
    seed = ckpt.config.eval_seed if args.seed is None else args.seed
    report = evaluate(ckpt.model, ckpt.vocab, read_lines(args.corpus), batch_size=batch,
                      seq_len=ckpt.config.seq_len, eval_seed=seed, mode=args.mode)
    print(report.summary())
    return EXIT_OK


def _cmd_trace(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    seed = ckpt.config.eval_seed if args.seed is None else args.seed
    records = trace(ckpt.model, ckpt.vocab, read_lines(args.sentences), recode_at=args.recode_at, eval_seed=seed)
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            write_trace_csv(records, fh)
    else:
        write_trace_csv(records, sys.stdout)
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    start = time.perf_counter()
    reports = gradcheck_suite(seed=args.seed, tolerance=args.tol)
    for report in reports:
        print(report.line())
    failed = sum(not r.passed for r in reports)
    print(f"{len(reports) - failed}/{len(reports)} checks passed in {time.perf_counter() - start:.1f}s")
    return EXIT_OK if failed == 0 else EXIT_USAGE


def _cmd_ablate(args) -> int:
    if args.mode == "graft" and args.signal is None:
        raise UsageError("ablate --mode graft needs --signal")
    if args.corpus is None:
        raise UsageError("ablate needs --corpus")
    ckpt = load_checkpoint(args.ckpt)
    seed = ckpt.config.eval_seed if args.seed is None else args.seed
    report = ablate(ckpt.model, ckpt.vocab, read_lines(args.corpus), args.mode, signal=args.signal,
                    alpha=args.alpha, batch_size=ckpt.config.eval_batch_size, seq_len=ckpt.config.seq_len,
                    eval_seed=seed, strict=args.strict)
    print(report.summary())
    return EXIT_OK


COMMANDS = {"train": _cmd_train, "eval": _cmd_eval, "trace": _cmd_trace, "gradcheck": _cmd_gradcheck,
            "ablate": _cmd_ablate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (UsageError, ConfigError, CorpusError, CheckpointError, OSError, ValueError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
