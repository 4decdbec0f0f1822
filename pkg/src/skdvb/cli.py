"""Command-line entry point: ``skdvb <kind> [--config PATH | --preset NAME] ...`` and ``skdvb report DIR``."""

from __future__ import annotations

import argparse
import sys

from .harness import (
    KINDS,
    PRESETS,
    ConfigError,
    load_config,
    parse_config,
    preset,
    report,
    run,
)


def _seed(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="skdvb", description="Stochastic KdV-Burgers experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for kind in KINDS:
        p = sub.add_parser(kind, help=f"run a {kind} experiment")
        src = p.add_mutually_exclusive_group()
        src.add_argument("--config", metavar="PATH", help="YAML or JSON experiment file")
        src.add_argument("--preset", choices=sorted(PRESETS), help="built-in experiment")
        p.add_argument("--seed", type=_seed, help="override the configured seed")
        p.add_argument("--out", metavar="DIR", help="output root (default: $SKDVB_OUT or ./runs)")
        p.add_argument("--threads", type=_positive, help="worker threads")
    r = sub.add_parser("report", help="summarise a finished run")
    r.add_argument("run_dir", metavar="DIR")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "report":
        try:
            print(report(args.run_dir))
        except FileNotFoundError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        return 0
    overrides = {"seed": args.seed, "threads": args.threads}
    try:
        if args.config:
            cfg = load_config(args.config, **overrides)
        elif args.preset:
            cfg = preset(args.preset, **overrides)
        else:
            cfg = parse_config({"kind": args.command}, **overrides)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if cfg.kind != args.command:
        print(f"config error: kind: file describes {cfg.kind!r}, not {args.command!r}", file=sys.stderr)
        return 2
    outcome = run(cfg, args.out)
    print(outcome.run_dir)
    for label, ok in outcome.verdict.items():
        print(f"{'PASS' if ok else 'FAIL'}  {label}")
    if outcome.error:
        print(f"error: {outcome.error}", file=sys.stderr)
    return outcome.status


if __name__ == "__main__":
    sys.exit(main())
