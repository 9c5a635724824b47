"""Command-line entry point: ``cyberood collect|train|eval|switch|unknown``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from cyberood import harness, monitor
from cyberood.harness import ConfigError, ExperimentConfig

EXIT_OK, EXIT_CONFIG, EXIT_MODEL = 0, 2, 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cyberood", description=__doc__)
    parser.add_argument("command", choices=sorted(harness.COMMANDS))
    parser.add_argument("--config", type=Path, help="file of 'key = value' lines")
    parser.add_argument("--seed", type=int, help="unsigned 64-bit seed (overrides the config)")
    parser.add_argument("--out", type=Path, help="output directory (overrides the config)")
    parser.add_argument("--paper-scale", action="store_true",
                        help="use 10000 training episodes, horizon 100 and 1000 evaluation episodes")
    return parser


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    text = ""
    if args.config is not None:
        try:
            text = args.config.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
    cfg = ExperimentConfig.parse(text, seed=args.seed, out=args.out)
    return cfg.paper_scale() if args.paper_scale else cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        harness.COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except monitor.MonitorError as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
