"""Long checkerboard benchmark: deep stacks, extended training.

Not part of the test suite: this is the open-ended benchmark
configuration (up to hundreds of blocks, tens of thousands of steps)
for chasing the best attainable bits on the checkerboard.  Expect hours
of CPU time at the default settings.

Usage:
    python scripts/long_checkerboard_benchmark.py --blocks 100 --steps 20000
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from resflow.cli import main as cli_main


def run(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--blocks", type=int, default=100)
    ap.add_argument("--steps", type=int, default=20_000)
    ap.add_argument("--lr", type=float, default=0.05)
    ap.add_argument("--norm-preset", default="spectral", choices=("spectral", "inf", "one"))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out-dir", default="runs/long_checkerboard")
    args = ap.parse_args(argv)
    return cli_main(
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
            f"--lipschitz.norm_preset={args.norm_preset}",
            "--train.eval_every=1000",
            "--train.checkpoint_every=5000",
        ]
    )


if __name__ == "__main__":
    sys.exit(run())
