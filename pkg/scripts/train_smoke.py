#!/usr/bin/env python3
"""End-to-end smoke experiment: generate the separable 32^3 synthetic task,
split it, and train ConvNet3D-4-IN and CVVT-tiny to their target accuracies.

Usage: python3 scripts/train_smoke.py [workdir]
"""

import sys
from pathlib import Path

from voxformer import cli

WORK = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("runs/smoke")
DATA = WORK / "data"


def main() -> int:
    rc = cli.main(["synth", "--out", str(DATA), "--subjects", "30", "--sessions", "2",
                   "--extents", "32,32,32", "--seed", "7"])
    rc |= cli.main(["split", "--data", str(DATA), "--test-per-class", "5", "--seed", "0"])

    print("\n== ConvNet3D-4-IN (target 0.95 within 30 epochs) ==")
    rc |= cli.main(["train", "--model", "convnet3d4", "--norm", "in",
                    "--data", str(DATA), "--out", str(WORK / "convnet3d4_in"),
                    "--lr", "0.001", "--wd", "0.001", "--step", "25", "--gamma", "0.3",
                    "--epochs", "30", "--target-acc", "0.95", "--seed", "0"])

    print("\n== CVVT-tiny (target 0.80 within 60 epochs) ==")
    rc |= cli.main(["train", "--model", "cvvt", "--size", "tiny",
                    "--data", str(DATA), "--out", str(WORK / "cvvt_tiny"),
                    "--lr", "0.0001", "--wd", "0.001", "--step", "25", "--gamma", "0.3",
                    "--epochs", "60", "--target-acc", "0.80", "--seed", "0"])
    return rc


if __name__ == "__main__":
    sys.exit(main())
