"""Monte-Carlo coverage over repeated calibration/test resplits for all four scores.

Usage: python scripts/coverage_check.py [--splits 100] [--alpha 0.1] [--m 1000]
"""

import argparse
import time

import numpy as np

from rwce.calibration import coverage_trial
from rwce.data import SyntheticSpec, generate_synthetic, standardize
from rwce.scores import KINDS, ScoreSpec
from rwce.trainer import TrainingConfig, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--splits", type=int, default=100)
    ap.add_argument("--alpha", type=float, default=0.1)
    ap.add_argument("--m", type=int, default=1000)
    ap.add_argument("--loss", default="RWCE")
    args = ap.parse_args()
    data = standardize(generate_synthetic(SyntheticSpec(seed=0)))
    model = train(TrainingConfig(loss=args.loss), data).model
    X = np.vstack([data.cal.X, data.test.X])
    y = np.concatenate([data.cal.y, data.test.y])
    lo, hi = 1 - args.alpha, 1 - args.alpha + 1 / (args.m + 1)
    print(f"target interval [{lo:.4f}, {hi:.4f}]")
    for i, kind in enumerate(KINDS):
        t = time.perf_counter()
        cov = coverage_trial(model, ScoreSpec(kind), X, y, args.alpha, args.splits, seed=100 + i, m=args.m)
        print(f"{kind:5s} mean={cov.mean():.4f} sd={cov.std(ddof=1):.4f} "
              f"min={cov.min():.4f} max={cov.max():.4f} ({time.perf_counter() - t:.1f}s)")


if __name__ == "__main__":
    main()
