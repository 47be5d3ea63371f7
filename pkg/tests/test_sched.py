import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scmoelab import sched
from scmoelab.sched import CostVector, ScheduleChoice

# quarter-integer durations are exactly representable, so mathematically
# tied slots stay tied in floating point and tie-breaking is well defined
durations = st.integers(0, 400).map(lambda n: n / 4.0)
vectors = st.builds(CostVector,
                    comp=st.lists(durations, min_size=1, max_size=6),
                    t_disp=durations, t_comb=durations, t_expert=durations)


def test_rejects_empty_and_negative():
    with pytest.raises(ValueError):
        CostVector(comp=[], t_disp=1, t_comb=1, t_expert=1)
    with pytest.raises(ValueError):
        CostVector(comp=[1, -1], t_disp=1, t_comb=1, t_expert=1)
    with pytest.raises(ValueError):
        CostVector(comp=[1], t_disp=-1, t_comb=1, t_expert=1)


def test_full_overlap_example():
    c = CostVector(comp=[2, 3, 4], t_disp=2, t_comb=7, t_expert=1)
    ch = sched.choose_slot(c)
    assert ch.slot == 1
    assert ch.objective == 0.0
    assert ch.makespan == 2 + 3 + 4 + 1


def test_zero_comm_ties_break_to_smallest_slot():
    c = CostVector(comp=[1, 1, 1], t_disp=0, t_comb=0, t_expert=0)
    assert all(sched.slot_objective(c, k) == 3 for k in range(4))
    assert sched.choose_slot(c).slot == 0


def test_symmetric_tie_breaks_to_smallest_slot():
    c = CostVector(comp=[1], t_disp=10, t_comb=10, t_expert=0)
    assert sched.slot_objective(c, 0) == pytest.approx(19)
    assert sched.slot_objective(c, 1) == pytest.approx(19)
    assert sched.choose_slot(c).slot == 0


def test_verify_bounds_zero_comm_degenerate():
    c = CostVector(comp=[2, 5], t_disp=0, t_comb=0, t_expert=1)
    ch = sched.choose_slot(c)
    assert ch.objective == 7.0  # bounds collapse to [7, 7]
    assert sched.verify_bounds(c, ch)


def test_verify_bounds_catches_fabricated_violation():
    c = CostVector(comp=[2, 3, 4], t_disp=2, t_comb=7, t_expert=1)
    bogus = ScheduleChoice(slot=1, objective=1000.0, makespan=0.0)
    with pytest.raises(AssertionError, match="bounds violated"):
        sched.verify_bounds(c, bogus)


def test_full_overlap_certificate():
    # objective 0 iff some slot matches both comm windows exactly
    c = CostVector(comp=[2, 3, 4], t_disp=2, t_comb=7, t_expert=5)
    ch = sched.choose_slot(c)
    assert ch.objective == 0.0
    assert ch.makespan == sum(c.comp) + c.t_expert


@settings(max_examples=300, deadline=None)
@given(vectors)
def test_choose_slot_matches_exhaustive_enumeration(c):
    ch = sched.choose_slot(c)
    objs = [sched.slot_objective(c, k) for k in range(len(c.comp) + 1)]
    assert ch.objective == min(objs)
    assert ch.slot == objs.index(min(objs))
    assert ch.makespan == sched.slot_makespan(c, ch.slot)


@settings(max_examples=300, deadline=None)
@given(vectors)
def test_bounds_and_argmin_equivalence_hold(c):
    assert sched.verify_bounds(c, sched.choose_slot(c))
    assert sched.argmin_equivalence(c)


@settings(max_examples=100, deadline=None)
@given(vectors, st.floats(0.0, 10.0))
def test_objective_monotone_in_dispatch(c, delta):
    bumped = CostVector(comp=list(c.comp), t_disp=c.t_disp + delta,
                        t_comb=c.t_comb, t_expert=c.t_expert)
    before = sched.choose_slot(c).objective
    after = sched.choose_slot(bumped).objective
    assert after <= before + delta + 1e-9


def test_json_round_trip():
    c = CostVector(comp=[2.0, 3.0], t_disp=1.5, t_comb=0.5, t_expert=2.0)
    assert CostVector.from_json(c.to_json()) == c
    ch = sched.choose_slot(c)
    assert ScheduleChoice.from_json(ch.to_json()) == ch
    with pytest.raises(ValueError):
        CostVector.from_json(json.dumps({"comp": [1], "t_disp": 0,
                                         "t_comb": 0, "t_expert": 0,
                                         "extra": 1}))
