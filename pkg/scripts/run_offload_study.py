#!/usr/bin/env python3
"""Expert-offloading study: memory savings versus decode latency.

Plans which parameters stay device-resident when routed experts live in host
memory, then sweeps the host-link bandwidth and reports per-block decode
latency for each residency mode. Async prefetch needs early routing (the
shortcut gate), so the shortcut position controls the overlap window.
"""

import argparse

from scmoelab import offload
from scmoelab.arch import ModelConfig
from scmoelab.distsim import HardwareProfile, StageCosts


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--pos", default="pos2", choices=("pos1", "pos2", "pos3"))
    ap.add_argument("--bandwidths", type=float, nargs="+",
                    default=[8e9, 16e9, 32e9, 64e9],
                    help="host link bytes/second")
    ap.add_argument("--csv", default=None)
    args = ap.parse_args()

    cfg = ModelConfig(n_blocks=24, d_model=1024, d_hidden=4096, n_experts=8,
                      k_routed=1, variant="scmoe", shortcut_pos=args.pos)
    plan = offload.plan_offload(cfg, offload.gpt2_medium_like_bytes())
    print(f"peak memory reduction: {plan.memory_reduction():.1%} "
          f"({plan.peak_bytes('GpuOnly') / 1e9:.2f} GB -> "
          f"{plan.peak_bytes('OffloadBlocking') / 1e9:.2f} GB)")

    # Per-block stage timings in milliseconds, decode regime (one token).
    costs = StageCosts(t_attn=0.30, t_mlp=0.25, t_se=0.25, t_gate=0.02,
                       t_encode=0.02, t_decode=0.02, t_expert=0.25,
                       bytes_dispatch=0.0)
    all_reports = []
    for bw in args.bandwidths:
        prof = HardwareProfile(alpha_h=0.05, beta_h=1e3 / bw)  # ms per byte
        reports = [offload.simulate_decode(plan, costs, prof, mode)
                   for mode in ("GpuOnly", "OffloadBlocking", "OffloadAsync")]
        all_reports.extend(reports)
        line = ", ".join(f"{r.mode} {r.latency:.3f}ms (stall {r.stall:.3f})"
                         for r in reports)
        print(f"link {bw / 1e9:5.0f} GB/s: {line}")
    if args.csv:
        offload.write_latency_csv(args.csv, all_reports)
        print(f"wrote {args.csv}")


if __name__ == "__main__":
    main()
