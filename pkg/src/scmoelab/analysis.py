"""Diagnostics over traced forward passes: representation similarity across
layer taps, agreement between routing decisions taken on the preceding-layer
and current-layer representations, and gate confidence summaries.

All metrics are pure functions of the trace; recomputing from a serialized
trace reproduces them bit-identically.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from . import gating, numkit
from .arch import ActivationTrace, MoETrace
from .gating import GateDecision


def _moe_layer(trace: ActivationTrace, layer: int) -> MoETrace:
    if not 0 <= layer < len(trace.moe):
        raise IndexError(f"trace has {len(trace.moe)} MoE layers, no layer {layer}")
    return trace.moe[layer]


def row_cosine_mean(a: np.ndarray, b: np.ndarray) -> float:
    """Mean over rows of the cosine between paired rows of a and b.

    A pair where either row is the zero vector contributes 0.
    """
    a, b = numkit.as_matrix(a), numkit.as_matrix(b)
    if a.shape != b.shape:
        raise numkit.ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    denom = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
    dots = (a * b).sum(axis=1)
    out = np.where(denom > 0, dots / np.where(denom > 0, denom, 1.0), 0.0)
    return float(out.mean())


def repeated_selection_rate(trace: ActivationTrace, layer: int) -> float:
    """Fraction of tokens whose top-1 expert (same gate, noise off) is the
    same whether the gate reads the preceding-layer or the current-layer
    representation."""
    m = _moe_layer(trace, layer)
    top_prev = gating.topk_indices(m.logits_on_preceding, 1)[:, 0]
    top_cur = gating.topk_indices(m.logits_on_current, 1)[:, 0]
    return float((top_prev == top_cur).mean())


def l2_distance(trace: ActivationTrace, layer: int) -> float:
    """Mean over tokens of the euclidean distance between the preceding-layer
    and current-layer representations feeding the same gate."""
    m = _moe_layer(trace, layer)
    a, b = numkit.as_matrix(m.preceding_repr), numkit.as_matrix(m.current_input)
    if a.shape != b.shape:
        raise numkit.ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.linalg.norm(b - a, axis=1).mean())


def _selected_full_prob(dec: GateDecision) -> float:
    """Mean full-softmax probability mass on the selected experts."""
    probs = numkit.row_softmax(dec.logits)
    rows = np.arange(dec.n_tokens)[:, None]
    return float(probs[rows, dec.indices].sum(axis=1).mean())


def mean_gate_scores(trace: ActivationTrace, layer: int) -> Tuple[float, float]:
    """(preceding, current) mean gate score of a dual-gating layer.

    A top-1 masked softmax weight is identically 1, so the score is the
    full-softmax probability of the selected expert instead.
    """
    m = _moe_layer(trace, layer)
    if m.decision_prev is None:
        raise ValueError("layer has a single gating; dual-gating trace required")
    return _selected_full_prob(m.decision_prev), _selected_full_prob(m.decision)


@dataclass
class SimilarityReport:
    """Mean pairwise row-cosine between every labeled representation tap.

    Symmetric, unit diagonal, entries in [-1, 1].
    """
    labels: List[str]
    cosine: np.ndarray  # (n_taps, n_taps)

    def lookup(self, a: str, b: str) -> float:
        return float(self.cosine[self.labels.index(a), self.labels.index(b)])

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([""] + self.labels)
            for i, label in enumerate(self.labels):
                w.writerow([label] + [repr(x) for x in self.cosine[i]])


def cosine_similarity_matrix(trace: ActivationTrace) -> SimilarityReport:
    """Pairwise cosine table over the labeled taps ("In", "1A", "1M", ...)."""
    labels, arrays = trace.taps()
    n = len(labels)
    cos = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            cos[i, j] = cos[j, i] = row_cosine_mean(arrays[i], arrays[j])
    return SimilarityReport(labels=labels, cosine=cos)


@dataclass
class GatingBehaviorReport:
    """Per MoE layer: preceding-vs-current top-1 agreement, representation
    distance, and gate confidence on each representation."""
    block_indices: List[int]
    repeat_rates: List[float]
    l2_distances: List[float]
    gate_scores_preceding: List[float]
    gate_scores_current: List[float]
    aux_losses: List[float]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["block", "repeat_rate", "l2_distance",
                        "gate_score_preceding", "gate_score_current", "aux_loss"])
            for row in zip(self.block_indices, self.repeat_rates, self.l2_distances,
                           self.gate_scores_preceding, self.gate_scores_current,
                           self.aux_losses):
                w.writerow([row[0]] + [repr(x) for x in row[1:]])


def gating_behavior_report(trace: ActivationTrace) -> GatingBehaviorReport:
    blocks, rates, dists, gp, gc, aux = [], [], [], [], [], []
    for layer, m in enumerate(trace.moe):
        blocks.append(m.block_index)
        rates.append(repeated_selection_rate(trace, layer))
        dists.append(l2_distance(trace, layer))
        if m.decision_prev is not None:
            p, c = mean_gate_scores(trace, layer)
        else:
            p = _selected_full_prob(gating.select_topk(m.logits_on_preceding,
                                                       m.decision.k))
            c = _selected_full_prob(m.decision)
        gp.append(p)
        gc.append(c)
        aux.append(m.aux_loss)
    return GatingBehaviorReport(block_indices=blocks, repeat_rates=rates,
                                l2_distances=dists, gate_scores_preceding=gp,
                                gate_scores_current=gc, aux_losses=aux)


def dual_selection_clash_rate(trace: ActivationTrace) -> float:
    """Fraction of tokens whose two activated experts coincide, over all
    dual-gating layers in the trace."""
    rates = []
    for m in trace.moe:
        if m.decision_prev is None:
            continue
        same = m.decision.indices[:, 0] == m.decision_prev.indices[:, 0]
        rates.append(float(same.mean()))
    if not rates:
        raise ValueError("trace contains no dual-gating layers")
    return float(np.mean(rates))


def expert_load_histogram(dec: GateDecision, n_experts: int) -> np.ndarray:
    """Selection counts per expert (pre-drop)."""
    return np.bincount(dec.indices.ravel(), minlength=n_experts).astype(np.int64)
