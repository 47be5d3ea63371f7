"""Noisy top-k softmax gating, token capacity enforcement, and the auxiliary
load-balancing loss.

All functions here are pure over ndarrays; the differentiable path through
the gate lives in arch.py, which reuses the index sets computed here as
constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import numkit
from .numkit import NEG_INF, Rng


@dataclass
class GateParams:
    w_gate: np.ndarray  # (d, N)
    w_noise: np.ndarray  # (d, N)
    k: int
    noise_enabled: bool = False

    def __post_init__(self):
        if self.w_gate.shape != self.w_noise.shape:
            raise numkit.ShapeError("w_gate and w_noise must share shape")
        n = self.w_gate.shape[1]
        if not 1 <= self.k <= n:
            raise ValueError(f"k={self.k} out of range for N={n}")

    @property
    def n_experts(self) -> int:
        return self.w_gate.shape[1]


@dataclass
class CapacityConfig:
    capacity_factor: float = 2.0
    policy: str = "drop-overflow"

    def __post_init__(self):
        if self.capacity_factor <= 0:
            raise ValueError("capacity_factor must be > 0")
        if self.policy != "drop-overflow":
            raise ValueError(f"unknown capacity policy {self.policy!r}")


@dataclass
class GateDecision:
    """Per-token routing outcome.

    indices/weights/dropped are (T, k); rank order within a token follows the
    logit order (largest first, ties to the lowest expert index). `eps` holds
    the recorded noise draws so a forward can be replayed bit-identically.
    """

    logits: np.ndarray          # (T, N)
    indices: np.ndarray         # (T, k) int
    weights: np.ndarray         # (T, k)
    dropped: np.ndarray         # (T, k) bool
    eps: Optional[np.ndarray] = None  # (T, N) or None when noise disabled

    @property
    def n_tokens(self) -> int:
        return self.logits.shape[0]

    @property
    def n_experts(self) -> int:
        return self.logits.shape[1]

    @property
    def k(self) -> int:
        return self.indices.shape[1]

    def support_mask(self) -> np.ndarray:
        """(T, N) bool, True at selected experts."""
        t, n = self.logits.shape
        mask = np.zeros((t, n), dtype=bool)
        mask[np.arange(t)[:, None], self.indices] = True
        return mask

    def keep_mask(self) -> np.ndarray:
        """(T, N) with 1.0 at selected-and-not-dropped experts."""
        t, n = self.logits.shape
        keep = np.zeros((t, n))
        keep[np.arange(t)[:, None], self.indices] = (~self.dropped).astype(np.float64)
        return keep


def gate_logits(x: np.ndarray, p: GateParams, rng: Optional[Rng] = None,
                eps: Optional[np.ndarray] = None):
    """H = x.W_gate (+ eps * softplus(x.W_noise) when noise is on).

    Returns (H, eps_used). Pass `eps` to replay recorded draws.
    """
    x = numkit.as_matrix(x)
    clean = numkit.matmul(x, p.w_gate)
    if not p.noise_enabled:
        return clean, None
    if eps is None:
        if rng is None:
            raise ValueError("noise enabled but no rng and no recorded draws")
        eps = rng.normal(clean.shape)
    return clean + eps * numkit.softplus(numkit.matmul(x, p.w_noise)), eps


def topk_indices(h: np.ndarray, k: int) -> np.ndarray:
    """(T, k) indices of the k largest logits per row, ties to lowest index."""
    h = numkit.as_matrix(h)
    if k > h.shape[1]:
        raise ValueError(f"k={k} > N={h.shape[1]}")
    order = np.argsort(-h, axis=1, kind="stable")
    return order[:, :k]


def select_topk(h: np.ndarray, k: int, eps: Optional[np.ndarray] = None) -> GateDecision:
    """Keep the k largest logits per token, mask the rest to -inf, and take
    the row softmax of the masked row as the gate weights."""
    h = numkit.as_matrix(h)
    idx = topk_indices(h, k)
    t = h.shape[0]
    masked = np.full_like(h, NEG_INF)
    rows = np.arange(t)[:, None]
    masked[rows, idx] = h[rows, idx]
    probs = numkit.row_softmax(masked)
    weights = probs[rows, idx]
    dropped = np.zeros((t, k), dtype=bool)
    return GateDecision(logits=h, indices=idx, weights=weights, dropped=dropped, eps=eps)


def expert_quota(cfg: CapacityConfig, n_tokens: int, k: int, n_experts: int) -> int:
    return int(np.ceil(cfg.capacity_factor * n_tokens * k / n_experts))


def apply_capacity(dec: GateDecision, cfg: CapacityConfig, n_experts: int,
                   n_tokens: int) -> GateDecision:
    """Drop selections beyond each expert's quota, in token order.

    Weights are left unchanged; dropped contributions simply vanish from the
    combination sum (the token still passes through the residual path).
    """
    quota = expert_quota(cfg, n_tokens, dec.k, n_experts)
    counts = np.zeros(n_experts, dtype=np.int64)
    dropped = dec.dropped.copy()
    for t in range(dec.indices.shape[0]):
        for j in range(dec.k):
            e = dec.indices[t, j]
            if counts[e] >= quota:
                dropped[t, j] = True
            else:
                counts[e] += 1
    return GateDecision(logits=dec.logits, indices=dec.indices, weights=dec.weights,
                        dropped=dropped, eps=dec.eps)


def load_balance_loss(dec: GateDecision, n_experts: int) -> float:
    """GShard-style balance loss: N * sum_i f_i * P_i.

    f_i is the fraction of token-selections routed to expert i (pre-drop) and
    P_i is the mean full-softmax probability of expert i. Perfectly uniform
    routing gives exactly 1.0.
    """
    t = dec.n_tokens
    counts = np.bincount(dec.indices.ravel(), minlength=n_experts).astype(np.float64)
    f = counts / (t * dec.k)
    p = numkit.row_softmax(dec.logits).mean(axis=0)
    return float(n_experts * (f * p).sum())
