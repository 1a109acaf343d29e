#!/usr/bin/env python3
"""Desk-scale fusion-strategy comparison.

Generates a small phantom dataset, trains one model per fusion strategy
under identical seeds and budgets, and prints the comparison table
(also written as CSV). Equivalent to `dosediff ablate` with the desk
config, with the step budget adjustable from the command line.
"""

import argparse
import dataclasses
import sys
from pathlib import Path

from dosediff.config import load_config
from dosediff.networks import FusionStrategy
from dosediff.train import fusion_ablation_matrix, generate_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=str(Path(__file__).resolve().parent.parent
                                            / "configs" / "desk.json"))
    ap.add_argument("--steps", type=int, default=None, help="override training steps")
    ap.add_argument("--strategies",
                    default="concatenate,add-all,attn-all,attn-last1,attn-last2")
    ap.add_argument("--out", default="runs/fusion_ablation")
    args = ap.parse_args()

    cfg = load_config(args.config)
    if args.steps is not None:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train,
                                                                 steps=args.steps))
    out = Path(args.out)
    data_dir = out / "data"
    generate_dataset(cfg, data_dir)

    strategies = [FusionStrategy.parse(s) for s in args.strategies.split(",")]
    rows = fusion_ablation_matrix(cfg, strategies, data_dir, out)

    header = f"{'strategy':<14} {'dose_mae':>9} {'dvh_score':>9} {'hi':>7} {'wall_s':>8}"
    print(header)
    print("-" * len(header))
    csv_lines = ["strategy,dose_score_rel,dose_score_mae,dvh_score,hi,n_cases"]
    for strat, _model, row in rows:
        print(f"{row.strategy:<14} {row.mean('dose_score_mae'):>9.4f} "
              f"{row.mean('dvh_score'):>9.4f} {row.mean('hi'):>7.4f} "
              f"{row.wall_time_s:>8.1f}")
        csv_lines.append(",".join([
            row.strategy, repr(row.mean("dose_score_relative")),
            repr(row.mean("dose_score_mae")), repr(row.mean("dvh_score")),
            repr(row.mean("hi")), str(len(row.reports))]))
    (out / "ablation.csv").write_text("\n".join(csv_lines) + "\n")
    print(f"\ntable -> {out / 'ablation.csv'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
