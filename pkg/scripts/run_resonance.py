#!/usr/bin/env python3
"""Run the step-size resonance case table (cases A..E) and print it.

    python scripts/run_resonance.py --config recipes/resonance.json --out runs/resonance
"""

import argparse
import sys
from pathlib import Path

from odenet.cli import main as cli_main


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default="recipes/resonance.json")
    parser.add_argument("--out", default=None)
    parser.add_argument("--seed", type=int, default=None)
    args = parser.parse_args(argv)
    cli_args = ["resonance", "--config", args.config]
    if args.out:
        cli_args += ["--out", args.out]
    if args.seed is not None:
        cli_args += ["--seed", str(args.seed)]
    code = cli_main(cli_args)
    if code == 0:
        out = Path(args.out or "runs/resonance")
        print((out / "resonance.csv").read_text())
    return code


if __name__ == "__main__":
    sys.exit(main())
