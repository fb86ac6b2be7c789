"""Bias sweep of the log-determinant estimators across Lipschitz levels.

Emits the diagnose table for a matched linear test block: at each
coefficient, the fixed-truncation estimators keep a bias that grows
steeply with the contraction strength, while the randomized-truncation
estimator stays centered on the exact value at ~4 evaluated terms.

Usage:
    python scripts/estimator_bias_sweep.py [--n-samples 100000]
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from resflow.cli import main as cli_main


def run(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n-samples", type=int, default=100_000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out-dir", default="runs/bias_sweep")
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args(argv)
    code = cli_main(
        [
            "diagnose",
            "--arch", "linear",
            "--seed", str(args.seed),
            "--n-samples", str(args.n_samples),
            "--threads", str(args.threads),
            "--out-dir", args.out_dir,
        ]
    )
    if code == 0:
        print(Path(args.out_dir, "diagnose.csv").read_text())
    return code


if __name__ == "__main__":
    sys.exit(run())
