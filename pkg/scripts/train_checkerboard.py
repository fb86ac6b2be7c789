"""Train a residual flow on the checkerboard density and export figures.

Runs the training loop, then writes a density grid (CSV + PGM heatmap)
and a sample cloud from the final checkpoint.  All artifacts land in the
output directory (default ./runs/checkerboard).

Usage:
    python scripts/train_checkerboard.py [--steps 2000] [--blocks 10] [--lr 0.05]
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from resflow.cli import main as cli_main


def run(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--blocks", type=int, default=10)
    ap.add_argument("--lr", type=float, default=0.05)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out-dir", default="runs/checkerboard")
    args = ap.parse_args(argv)

    code = cli_main(
        [
            "train",
            "--dataset", "checkerboard",
            "--blocks", str(args.blocks),
            "--steps", str(args.steps),
            "--estimator", "unbiased",
            "--seed", str(args.seed),
            "--out-dir", args.out_dir,
            f"--train.lr={args.lr}",
            "--train.adam_beta2=0.999",
        ]
    )
    if code != 0:
        return code
    ckpt = str(Path(args.out_dir) / "checkpoint_final.txt")
    code = cli_main(
        [
            "grid",
            "--checkpoint", ckpt,
            "--bounds=-4,4,-4,4",
            "--resolution", "201,201",
            "--out-dir", args.out_dir,
        ]
    )
    if code != 0:
        return code
    return cli_main(
        ["sample", "--checkpoint", ckpt, "--n", "5000", "--seed", "1", "--out-dir", args.out_dir]
    )


if __name__ == "__main__":
    sys.exit(run())
