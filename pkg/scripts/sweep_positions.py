#!/usr/bin/env python3
"""Sweep the extra insertion layer of a method (final layer always active)
and report mean accuracy per position.

Usage:
    python3 scripts/sweep_positions.py [--config scripts/example_config.toml]
                                       [--method ln_tune] [--out results]
"""

import argparse
import sys

from peft_forge.cli import main as cli_main


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--config", default="scripts/example_config.toml")
    parser.add_argument("--method", default="ln_tune")
    parser.add_argument("--episodes", type=int, default=None)
    parser.add_argument("--out", default="results")
    args = parser.parse_args()

    argv = ["sweep-layers", "--config", args.config, "--method", args.method,
            "--out", args.out]
    if args.episodes is not None:
        argv += ["--episodes", str(args.episodes)]
    return cli_main(argv)


if __name__ == "__main__":
    sys.exit(main())
