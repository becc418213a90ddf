"""Command-line entry point: ``otblab {verify,compare,train,replay}``."""

from __future__ import annotations

import argparse
import logging
import sys

from otblab.baselines import BASELINE_KINDS, DEFAULT_CLIP
from otblab.harness.commands import TrainingDiverged, cmd_compare, cmd_replay, cmd_train, cmd_verify
from otblab.harness.config import ConfigError, load_config
from otblab.harness.records import LogFormatError


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="JSON experiment config (defaults if omitted)")
    p.add_argument("--seed", type=int, help="run a single seed instead of run.seeds")
    p.add_argument("--out", metavar="DIR", help="output directory (overrides output.dir)")
    p.add_argument("--format", choices=("csv", "csv+svg"), help="output formats")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="otblab", description="Policy-gradient baseline laboratory.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (("verify", "run the exact-oracle invariant suite"),
                        ("compare", "compare baseline kinds (exact J, exact variance, Monte-Carlo V-hat)"),
                        ("train", "on-policy training runs")):
        _common(sub.add_parser(name, help=help_))
    rp = sub.add_parser("replay", help="recompute advantages from a trajectory log")
    rp.add_argument("log", metavar="LOG", help="JSONL trajectory log")
    rp.add_argument("--baseline", default="otb", choices=[k for k in BASELINE_KINDS if k != "value_oracle"])
    rp.add_argument("--clip", type=float, default=DEFAULT_CLIP)
    rp.add_argument("--exclude-self", action="store_true")
    rp.add_argument("--out", metavar="DIR", default=".")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "replay":
            path = cmd_replay(args.log, args.baseline, args.out, args.clip, args.exclude_self)
            print(path)
            return 0
        if args.seed is not None and args.seed < 0:
            raise ConfigError("--seed must be nonnegative")
        cfg = load_config(args.config).with_overrides(args.seed, args.out, args.format)
        if args.command == "verify":
            res = cmd_verify(cfg)
            print(f"{len(res.rows) - res.failures}/{len(res.rows)} checks passed -> {res.path}")
            return 1 if res.failures else 0
        if args.command == "compare":
            res = cmd_compare(cfg)
        else:
            res = cmd_train(cfg)
        for p in res.paths:
            print(p)
        return 0
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, LogFormatError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
