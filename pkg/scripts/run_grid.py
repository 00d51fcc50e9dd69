#!/usr/bin/env python3
"""Desk-scale hyper-parameter grid: runs a slice of the 54-point search for
CVVT-tiny on the synthetic task and prints the ranked table.

Usage: python3 scripts/run_grid.py [workdir] [--full]

The default runs the first 6 grid points at 5 epochs each; --full runs all
54 (slow). The BN-vs-IN accuracy ordering at batch 1 can be inspected by
re-running with --model convnet3d4 --norm bn via the CLI directly.
"""

import sys
from pathlib import Path

from voxformer import cli

WORK = Path(sys.argv[1]) if len(sys.argv) > 1 and not sys.argv[1].startswith("-") \
    else Path("runs/grid")
DATA = WORK / "data"
FULL = "--full" in sys.argv


def main() -> int:
    rc = cli.main(["synth", "--out", str(DATA), "--subjects", "16", "--sessions", "1",
                   "--extents", "16,16,16", "--seed", "11"])
    rc |= cli.main(["split", "--data", str(DATA), "--test-per-class", "3", "--seed", "0"])
    args = ["grid", "--model", "cvvt", "--size", "tiny", "--data", str(DATA),
            "--out", str(WORK / "results"), "--epochs", "5", "--seed", "0"]
    if not FULL:
        args += ["--limit", "6"]
    rc |= cli.main(args)
    return rc


if __name__ == "__main__":
    sys.exit(main())
