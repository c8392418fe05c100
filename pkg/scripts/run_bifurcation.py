#!/usr/bin/env python3
"""Sweep the Damkohler number for truth and a trained model side by side.

    python scripts/run_bifurcation.py --config recipes/urp_bb.json \
        --checkpoint runs/urp_bb/run0/checkpoint.json --out runs/urp_bb
"""

import argparse
import sys

from odenet.cli import main as cli_main


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", required=True)
    parser.add_argument("--checkpoint", default=None)
    parser.add_argument("--out", default=None)
    args = parser.parse_args(argv)
    cli_args = ["bifurcate", "--config", args.config]
    if args.checkpoint:
        cli_args += ["--checkpoint", args.checkpoint]
    if args.out:
        cli_args += ["--out", args.out]
    return cli_main(cli_args)


if __name__ == "__main__":
    sys.exit(main())
