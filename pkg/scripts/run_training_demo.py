#!/usr/bin/env python3
"""Train a small shortcut-routed mixture-of-experts model and inspect gating.

Runs SGD on a synthetic regression task, prints the loss trajectory, then
reports how the routing behaves on the final batch: how often the
preceding-layer representation selects the same expert the current one would,
how far the two representations are apart, and the per-layer expert load.
"""

import argparse

import numpy as np

from scmoelab import analysis, arch, grad
from scmoelab.arch import ModelConfig
from scmoelab.grad import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--variant", default="scmoe",
                    choices=("standard", "shared", "scmoe", "dgmoe"))
    ap.add_argument("--pos", default="pos2", choices=("pos1", "pos2", "pos3"))
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--lr", type=float, default=0.01)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--loss-csv", default=None)
    args = ap.parse_args()

    shortcut = args.pos if args.variant in ("scmoe", "dgmoe") else None
    cfg = ModelConfig(n_blocks=2, d_model=8, d_hidden=16, n_experts=4,
                      k_routed=1, variant=args.variant, shortcut_pos=shortcut)
    tc = TrainConfig(steps=args.steps, learning_rate=args.lr, batch_size=8,
                     seed=args.seed)
    result = grad.train_toy(cfg, tc, task="synthetic-regression")
    for step in range(0, len(result.losses), max(1, args.steps // 10)):
        print(f"step {step:4d}  loss {result.losses[step]:.6f}")
    print(f"final loss {result.losses[-1]:.6f} "
          f"({result.losses[-1] / result.losses[0]:.1%} of initial)")
    if args.loss_csv:
        grad.write_loss_csv(args.loss_csv, result.losses)
        print(f"wrote {args.loss_csv}")

    trace = result.final_trace
    print("\nrouting behavior on the final batch:")
    for layer, m in enumerate(trace.moe):
        rate = analysis.repeated_selection_rate(trace, layer)
        dist = analysis.l2_distance(trace, layer)
        hist = analysis.expert_load_histogram(m.decision, cfg.n_experts)
        print(f"  moe layer {layer}: preceding/current top-1 agreement "
              f"{rate:.1%}, mean representation distance {dist:.3f}, "
              f"expert load {np.array2string(hist)}")


if __name__ == "__main__":
    main()
