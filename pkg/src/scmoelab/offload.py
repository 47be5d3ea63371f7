"""Memory-limited single-device inference with routed experts held off-device.

Non-expert weights and the shared expert stay resident; routed expert
parameters live on the host and the activated experts migrate over the host
link on demand. Because shortcut routing is decided one layer early, the
migration can start at the gate point and overlap the backbone compute
between the gate and the expert computation, paying only the part of the
transfer that does not fit in that window.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Dict

from .arch import ModelConfig
from .distsim import HardwareProfile, StageCosts

MODES = ("GpuOnly", "OffloadBlocking", "OffloadAsync")


@dataclass
class ModelBytes:
    """Parameter byte sizes per component plus a fixed runtime allowance
    (embeddings, norms, activation workspace) that is resident either way."""
    attn: float     # one attention block
    mlp: float      # one dense feed-forward block
    expert: float   # one routed expert
    shared: float   # one shared expert
    gate: float     # one gating layer
    other_resident: float = 0.0

    def __post_init__(self):
        for name in ("attn", "mlp", "expert", "shared", "gate", "other_resident"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


def gpt2_medium_like_bytes(bytes_per_param: float = 2.0,
                           d_model: int = 1024, d_hidden: int = 4096,
                           n_experts: int = 8, vocab: int = 50257,
                           runtime_allowance: float = 700e6) -> ModelBytes:
    """Half-precision byte layout of a 24-block, 1024-wide decoder with an
    MoE feed-forward in every second block."""
    return ModelBytes(
        attn=4 * d_model * d_model * bytes_per_param,
        mlp=2 * d_model * d_hidden * bytes_per_param,
        expert=2 * d_model * d_hidden * bytes_per_param,
        shared=2 * d_model * d_hidden * bytes_per_param,
        gate=2 * d_model * n_experts * bytes_per_param,
        other_resident=vocab * d_model * bytes_per_param + runtime_allowance,
    )


@dataclass
class OffloadPlan:
    resident: Dict[str, float]   # component -> resident bytes
    offloaded: Dict[str, float]  # component -> host-side bytes
    expert_bytes: float          # one routed expert
    k_routed: int
    variant: str
    shortcut_pos: str            # "" when the variant has no shortcut

    @property
    def resident_bytes(self) -> float:
        return sum(self.resident.values())

    @property
    def offloaded_bytes(self) -> float:
        return sum(self.offloaded.values())

    def peak_bytes(self, mode: str) -> float:
        """Peak device memory: everything resident, plus either the full
        expert set (GpuOnly) or a transient buffer for the activated ones."""
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        if mode == "GpuOnly":
            return self.resident_bytes + self.offloaded_bytes
        return self.resident_bytes + self.k_routed * self.expert_bytes

    def memory_reduction(self) -> float:
        return 1.0 - self.peak_bytes("OffloadBlocking") / self.peak_bytes("GpuOnly")


def plan_offload(cfg: ModelConfig, sizes: ModelBytes) -> OffloadPlan:
    """Routed experts go to the host; attention, dense feed-forwards, shared
    experts, gates, and the runtime allowance stay resident."""
    if cfg.moe_frequency == "every-second-block":
        n_moe = cfg.n_blocks // 2
        n_dense = cfg.n_blocks - n_moe
    else:
        n_moe, n_dense = cfg.n_blocks, 0
    resident = {
        "attention": cfg.n_blocks * sizes.attn,
        "dense_mlp": n_dense * sizes.mlp,
        "gate": n_moe * sizes.gate,
        "other": sizes.other_resident,
    }
    if cfg.has_shared_expert:
        resident["shared_expert"] = n_moe * sizes.shared
    offloaded = {"routed_experts": n_moe * cfg.n_experts * sizes.expert}
    return OffloadPlan(resident=resident, offloaded=offloaded,
                       expert_bytes=sizes.expert, k_routed=cfg.k_routed,
                       variant=cfg.variant, shortcut_pos=cfg.shortcut_pos or "")


def migration_duration(plan: OffloadPlan, prof: HardwareProfile) -> float:
    """Host-to-device transfer of the activated experts, batched as one
    message."""
    return prof.alpha_h + prof.beta_h * plan.k_routed * plan.expert_bytes


def overlap_window(plan: OffloadPlan, costs: StageCosts) -> float:
    """Backbone compute available between the shortcut gate point and the
    expert computation, per shortcut position."""
    windows = {
        "pos1": costs.t_attn + costs.t_se,
        "pos2": costs.t_attn + costs.t_se + costs.t_mlp,
        "pos3": 2 * costs.t_attn + costs.t_se + costs.t_mlp,
    }
    if plan.shortcut_pos not in windows:
        raise ValueError(f"no overlap window for position {plan.shortcut_pos!r}")
    return windows[plan.shortcut_pos]


@dataclass
class OffloadReport:
    mode: str
    peak_bytes: float
    latency: float           # one MoE block-pair decode latency
    migration: float
    stall: float
    overlap_fraction: float  # share of the migration hidden behind compute

    def to_json(self) -> str:
        return json.dumps({"mode": self.mode, "peak_bytes": self.peak_bytes,
                           "latency": self.latency, "migration": self.migration,
                           "stall": self.stall,
                           "overlap_fraction": self.overlap_fraction},
                          indent=2, sort_keys=True)


def base_latency(plan: OffloadPlan, costs: StageCosts) -> float:
    """Compute-only latency of one block pair during decode."""
    lat = (2 * costs.t_attn + costs.t_mlp + costs.t_gate
           + plan.k_routed * (costs.t_encode + costs.t_expert + costs.t_decode))
    if plan.variant in ("shared", "scmoe"):
        lat += costs.t_se
    return lat


def simulate_decode(plan: OffloadPlan, costs: StageCosts,
                    prof: HardwareProfile, mode: str) -> OffloadReport:
    """Per-token decode accounting.

    Blocking inserts the migration serially before expert compute; Async
    issues it at the shortcut gate point and stalls only for the part that
    exceeds the compute window. Async requires a shortcut variant, since
    without early routing the activated experts are unknown ahead of time.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    lat0 = base_latency(plan, costs)
    if mode == "GpuOnly":
        return OffloadReport(mode=mode, peak_bytes=plan.peak_bytes(mode),
                             latency=lat0, migration=0.0, stall=0.0,
                             overlap_fraction=1.0)
    mig = migration_duration(plan, prof)
    if mode == "OffloadBlocking":
        return OffloadReport(mode=mode, peak_bytes=plan.peak_bytes(mode),
                             latency=lat0 + mig, migration=mig, stall=mig,
                             overlap_fraction=0.0)
    if plan.variant != "scmoe":
        raise ValueError("asynchronous migration needs shortcut routing; "
                         "speculative prefetch is not modeled")
    window = overlap_window(plan, costs)
    stall = max(0.0, mig - window)
    return OffloadReport(mode=mode, peak_bytes=plan.peak_bytes(mode),
                         latency=lat0 + stall, migration=mig, stall=stall,
                         overlap_fraction=1.0 if mig == 0 else (mig - stall) / mig)


def write_latency_csv(path, reports):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "peak_bytes", "latency", "migration", "stall",
                    "overlap_fraction"])
        for r in reports:
            w.writerow([r.mode] + [repr(x) for x in
                                   (r.peak_bytes, r.latency, r.migration,
                                    r.stall, r.overlap_fraction)])
