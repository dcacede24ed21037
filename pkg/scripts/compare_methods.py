#!/usr/bin/env python3
"""Fine-tune every registered method on one config and print a ranked table.

Usage:
    python3 scripts/compare_methods.py [--config scripts/example_config.toml]
                                       [--episodes 10] [--out results]
"""

import argparse
import sys

from peft_forge.cli import main as cli_main
from peft_forge.peft import METHODS


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--config", default="scripts/example_config.toml")
    parser.add_argument("--episodes", type=int, default=None)
    parser.add_argument("--out", default="results")
    args = parser.parse_args()

    for method in sorted(METHODS):
        argv = ["finetune", "--config", args.config, "--method", method,
                "--out", args.out]
        if args.episodes is not None:
            argv += ["--episodes", str(args.episodes)]
        code = cli_main(argv)
        if code != 0:
            return code
    return cli_main(["summarize", "--config", args.config, "--out", args.out])


if __name__ == "__main__":
    sys.exit(main())
