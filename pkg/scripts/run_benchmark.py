"""Method comparison on the synthetic benchmark: CE, CUT, ConfTr and RWCE under four scores.

Usage: python scripts/run_benchmark.py --out results/benchmark [--seeds 10] [--quick]
"""

import argparse
import logging
from pathlib import Path

from rwce.data import SyntheticSpec, generate_synthetic, standardize
from rwce.evaluation import compare_methods, format_change
from rwce.scores import KINDS, ScoreSpec
from rwce.trainer import TrainingConfig

METHODS = ("CE", "CUT", "ConfTr", "RWCE")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results/benchmark")
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--alpha", type=float, default=0.1)
    ap.add_argument("--data-seed", type=int, default=0)
    ap.add_argument("--quick", action="store_true", help="3 seeds, 10 epochs")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    data = standardize(generate_synthetic(SyntheticSpec(seed=args.data_seed)))
    epochs = 10 if args.quick else 40
    n_seeds = 3 if args.quick else args.seeds
    methods = {m: TrainingConfig(loss=m, epochs=epochs, milestones=[25, 35] if epochs == 40 else [7])
               for m in METHODS}
    table = compare_methods(methods, data, [ScoreSpec(k) for k in KINDS], args.alpha, n_seeds)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table.write_csv(out / "comparison.csv")
    table.write_json(out / "comparison.json")

    print(f"{'score':6s}" + "".join(f"{m:>22s}" for m in METHODS))
    for kind in KINDS:
        cells = []
        for m in METHODS:
            c = table.cell(m, kind)
            std = c["apss_std"] or 0.0
            arrow = format_change(c["rel_change_pct"]) if m == "RWCE" and c["rel_change_pct"] is not None else ""
            cells.append(f"{c['apss']:.3f}+/-{std:.3f} {arrow}".rstrip())
        print(f"{kind:6s}" + "".join(f"{c:>22s}" for c in cells))
    print(f"wrote {out / 'comparison.csv'}")


if __name__ == "__main__":
    main()
