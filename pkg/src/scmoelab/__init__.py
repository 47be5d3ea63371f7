"""Desk-scale mixture-of-experts laboratory.

Exact numeric MoE variants (standard top-k, shared expert, shortcut-routed,
dual-gating) with tape-based gradients and a finite-difference oracle, plus a
deterministic discrete-event simulator of expert parallelism: communication
overlap scheduling, chunked pipelining, and expert offloading.
"""

from . import analysis, arch, distsim, gating, grad, modelio, numkit, offload, sched, tape

__all__ = ["analysis", "arch", "distsim", "gating", "grad", "modelio",
           "numkit", "offload", "sched", "tape"]

__version__ = "0.1.0"
