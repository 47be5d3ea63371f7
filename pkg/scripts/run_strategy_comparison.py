#!/usr/bin/env python3
"""Compare execution strategies across communication intensities.

For each target communication fraction, calibrates the link profile so that
top-2 sequential execution spends that fraction of its mixture-of-experts time
in all-to-all traffic, then simulates every strategy and prints a makespan
table (normalized to top-2 sequential).
"""

import argparse
from pathlib import Path

from scmoelab import distsim
from scmoelab.distsim import HardwareProfile, StrategySpec


STRATEGIES = [
    StrategySpec("standard_sequential", k=2),
    StrategySpec("standard_pipeline", k=2, chunks=2),
    StrategySpec("shared_expert_sequential"),
    StrategySpec("scmoe_overlap", pos="pos2"),
    StrategySpec("scmoe_overlap", pos="pos3"),
    StrategySpec("scmoe_overlap_pipeline", pos="pos2", chunks=2),
]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--fractions", type=float, nargs="+",
                    default=[0.15, 0.30, 0.45, 0.60])
    ap.add_argument("--d-model", type=int, default=64)
    ap.add_argument("--d-hidden", type=int, default=128)
    ap.add_argument("--n-tokens", type=int, default=32)
    ap.add_argument("--measure", action="store_true",
                    help="time real numpy kernels instead of flop-count costs")
    ap.add_argument("--out", default=None, help="directory for CSV reports")
    args = ap.parse_args()

    base = HardwareProfile()
    if args.measure:
        costs = distsim.measure_toy_costs(args.d_model, args.d_hidden,
                                          args.n_tokens)
    else:
        costs = distsim.derive_costs(args.d_model, args.d_hidden,
                                     args.n_tokens, base)

    labels = [s.label for s in STRATEGIES]
    print(f"{'comm fraction':>14} | " + " | ".join(f"{l:>28}" for l in labels))
    for target in args.fractions:
        prof = distsim.calibrate_profile(target, costs, base=base)
        rep = distsim.compare_strategies(STRATEGIES, costs, prof)
        ref = rep.result("standard_sequential-top2").makespan
        cells = [f"{rep.result(l).makespan / ref:>24.3f} x" for l in labels]
        print(f"{target:>13.0%} | " + " | ".join(f"{c:>28}" for c in cells))
        if args.out:
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            rep.write_csv(out / f"strategies_{int(target * 100):02d}.csv")
    if args.out:
        print(f"wrote per-fraction CSVs to {args.out}")


if __name__ == "__main__":
    main()
