"""Command-line entry point: ``protomoco <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 runtime failure (including
a failing gradient check).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import Sequence

from threadpoolctl import threadpool_limits

from protomoco import pipeline
from protomoco.config import ConfigError, RunConfig, load, parse_values, validate

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
THREADS_ENV = "PROTOMOCO_THREADS"


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # usage errors count as configuration errors
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="protomoco", description="Contrastive pretraining and prototypical few-shot evaluation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name: str, help: str, checkpoint: bool = False) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="config file (section.key = value lines)")
        p.add_argument("--seed", type=int, help="override run.seed")
        p.add_argument("--out", help="override run.out (for synth-data: the dataset directory)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key; repeatable")
        if checkpoint:
            p.add_argument("--checkpoint", help="encoder checkpoint (omit for He initialization)")
        return p

    command("synth-data", "write the synthetic two-class dataset")
    command("pretrain", "momentum-contrast pretraining")
    command("fewshot", "episodic fine-tuning", checkpoint=True)
    command("eval", "group-level k-fold episodic evaluation", checkpoint=True)
    grad = command("gradcheck", "finite-difference check of every differentiable op")
    grad.add_argument("--precision", choices=("float32", "float64"), help="override gradcheck.precision")
    grad.add_argument("--corrupt", metavar="OP", help=argparse.SUPPRESS)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load(args.config)
    text = "".join(f"{item}\n" for item in args.set)
    if args.seed is not None:
        text += f"run.seed = {args.seed}\n"
    if args.out is not None and args.command != "synth-data":
        text += f"run.out = {args.out}\n"
    if getattr(args, "precision", None):
        text += f"gradcheck.precision = {args.precision}\n"
    if not text:
        return cfg
    return validate({**cfg.values, **parse_values(text, "<command line>")})


def _threads() -> int | None:
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw == "":
        return None
    try:
        value = int(raw)
    except ValueError:
        value = 0
    if value < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return value


def run(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    if args.command == "synth-data":
        root = pipeline.cmd_synth(cfg, args.out)
        print(f"dataset written to {root}")
    elif args.command == "pretrain":
        result = pipeline.cmd_pretrain(cfg)
        print(f"checkpoint {result.checkpoint}\nlog {result.log}")
    elif args.command == "fewshot":
        result = pipeline.cmd_fewshot(cfg, args.checkpoint)
        print(f"checkpoint {result.checkpoint}\nlog {result.log}")
    elif args.command == "eval":
        report = pipeline.cmd_eval(cfg, args.checkpoint)
        for name in pipeline.METRICS:
            mean, std, _ = report.summary[name]
            print(f"{name}: {pipeline.format_value(mean)} ± {pipeline.format_value(std)}")
    elif args.command == "gradcheck":
        results, table = pipeline.cmd_gradcheck(cfg, args.corrupt)
        print(table)
        if not all(r.passed for r in results):
            failed = ", ".join(r.name for r in results if not r.passed)
            print(f"gradient check failed: {failed}", file=sys.stderr)
            return EXIT_RUNTIME
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # --help and usage errors
        return exc.code if isinstance(exc.code, int) else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        threads = _threads()
        if threads is None:
            return run(args)
        with threadpool_limits(limits=threads):
            return run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any failure maps to the runtime exit code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
