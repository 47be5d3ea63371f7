"""Adaptive placement of the routed-expert computation inside the backbone
compute stream.

With m backbone operators there are m+1 insertion slots. Slot K puts
pre(K) = sum(comp[:K]) of backbone work before expert compute and
post(K) = sum(comp[K:]) after it. Dispatch overlaps the pre window and
combine overlaps the post window, so the exposed time is

    objective(K) = |pre(K) - t_disp| + |post(K) - t_comb|

and the resulting makespan is

    makespan(K) = max(pre(K), t_disp) + t_expert + max(post(K), t_comb).

Since pre + post is constant, minimizing the objective and minimizing the
makespan pick the same slot under the same tie-breaking (smallest K).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import List


@dataclass
class CostVector:
    comp: List[float]   # backbone compute durations, in execution order
    t_disp: float       # token dispatch (all-to-all) duration
    t_comb: float       # result combine (all-to-all) duration
    t_expert: float     # routed expert compute duration

    def __post_init__(self):
        if not self.comp:
            raise ValueError("comp must be non-empty")
        vals = list(self.comp) + [self.t_disp, self.t_comb, self.t_expert]
        if any(v < 0 for v in vals):
            raise ValueError("durations must be >= 0")

    def to_json(self) -> str:
        return json.dumps({"comp": list(self.comp), "t_disp": self.t_disp,
                           "t_comb": self.t_comb, "t_expert": self.t_expert},
                          sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CostVector":
        d = json.loads(text)
        known = {"comp", "t_disp", "t_comb", "t_expert"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown cost vector keys: {sorted(unknown)}")
        return cls(comp=[float(x) for x in d["comp"]], t_disp=float(d["t_disp"]),
                   t_comb=float(d["t_comb"]), t_expert=float(d["t_expert"]))


@dataclass
class ScheduleChoice:
    slot: int           # K in 0..m
    objective: float
    makespan: float

    def to_json(self) -> str:
        return json.dumps({"slot": self.slot, "objective": self.objective,
                           "makespan": self.makespan}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ScheduleChoice":
        d = json.loads(text)
        return cls(slot=int(d["slot"]), objective=float(d["objective"]),
                   makespan=float(d["makespan"]))


def slot_windows(c: CostVector, k: int):
    """(pre, post) compute windows for slot k."""
    return sum(c.comp[:k]), sum(c.comp[k:])


def slot_objective(c: CostVector, k: int) -> float:
    pre, post = slot_windows(c, k)
    return abs(pre - c.t_disp) + abs(post - c.t_comb)


def slot_makespan(c: CostVector, k: int) -> float:
    pre, post = slot_windows(c, k)
    return max(pre, c.t_disp) + c.t_expert + max(post, c.t_comb)


def choose_slot(c: CostVector) -> ScheduleChoice:
    """Enumerate every slot and return the one with the smallest exposed
    time; ties go to the smallest slot index."""
    m = len(c.comp)
    best_k, best_obj = 0, slot_objective(c, 0)
    for k in range(1, m + 1):
        obj = slot_objective(c, k)
        if obj < best_obj:
            best_k, best_obj = k, obj
    return ScheduleChoice(slot=best_k, objective=best_obj,
                          makespan=slot_makespan(c, best_k))


def verify_bounds(c: CostVector, choice: ScheduleChoice) -> bool:
    """The optimal exposed time is bounded by
    |sum(comp) - (t_disp + t_comb)| <= objective <= sum(comp) + t_disp + t_comb."""
    total = sum(c.comp)
    comm = c.t_disp + c.t_comb
    lo, hi = abs(total - comm), total + comm
    tol = 1e-9 * max(1.0, hi)
    if not (lo - tol <= choice.objective <= hi + tol):
        raise AssertionError(
            f"bounds violated: {lo} <= {choice.objective} <= {hi} fails for "
            f"comp={c.comp}, disp={c.t_disp}, comb={c.t_comb}")
    return True


def argmin_equivalence(c: CostVector) -> bool:
    """Minimizing exposed time and minimizing makespan select the same slot.

    makespan(K) = (pre + disp + post + comb)/2 + objective(K)/2 + expert via
    max(a, b) = (a + b + |a - b|)/2, so the two orderings agree exactly,
    including ties. With durations that are not exactly representable in
    binary floating point, rounding can break mathematically exact ties
    inconsistently between the two formulas; callers probing the tie cases
    should use exactly representable durations.
    """
    m = len(c.comp)
    obj_k = min(range(m + 1), key=lambda k: (slot_objective(c, k), k))
    mk_k = min(range(m + 1), key=lambda k: (slot_makespan(c, k), k))
    if obj_k != mk_k:
        raise AssertionError(
            f"argmin mismatch: objective picks {obj_k}, makespan picks {mk_k} "
            f"for comp={c.comp}, disp={c.t_disp}, comb={c.t_comb}, "
            f"expert={c.t_expert}")
    return True
