import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scenerecover.corpus import plan_nominal, sample_task
from scenerecover.injector import (
    ErrorClass,
    ErrorEvent,
    ErrorSchedule,
    NoFreeSpaceError,
    is_cooperative_help,
    make_schedule,
    perturb,
)
from scenerecover.scenegraph import ground_trace
from scenerecover.sim import Top, apply_action, eval_relations, is_valid, states_equal
from util import cube, scene, tower


def test_schedule_profiles():
    one = make_schedule("I", 5, 5, 3)
    assert one == make_schedule("I", 5, 5, 3)
    assert 1 <= len(one.events) <= 5 and len({e.step for e in one.events}) == 1
    two = make_schedule("II", 6, 5, 3)
    assert [e.step for e in two.events] == [1, 2, 3, 4, 5, 6]
    three = make_schedule("III", 4, 5, 3)
    assert len(three.events) == 5 and len({e.step for e in three.events}) == 1
    assert ErrorSchedule.from_dict(three.to_dict()) == three


def test_explicit_swap_exchanges_two_table_blocks():
    s = scene(cube(0, 0.2, 0.2), cube(1, 0.8, 0.8))
    out = perturb(s, ErrorEvent(ErrorClass.EXPLICIT, 1, {"op": "swap"}), np.random.default_rng(0), 0)
    assert out.bbox(0).center == s.bbox(1).center
    assert out.bbox(1).center == s.bbox(0).center


def test_collision_topple_scatters_a_tower():
    s = scene(*tower([0, 1, 2], 0.5, 0.5))
    out = perturb(s, ErrorEvent(ErrorClass.COLLISION_TOPPLE, 1), np.random.default_rng(0), 2)
    assert not {Top(1, 0), Top(2, 1)} & eval_relations(out)
    assert is_valid(out)


def test_cooperative_agent_performs_the_next_step():
    task = sample_task(5, np.random.default_rng(1), plan_len=4)
    plan = plan_nominal(task)
    trace = ground_trace(task.initial, plan)
    ev = ErrorEvent(ErrorClass.EXTERNAL_AGENT, 1, {"cooperative": True})
    assert is_cooperative_help(ev, trace.states[1], plan[1:])
    out = perturb(trace.states[1], ev, np.random.default_rng(0), plan[0].moved, plan[1:])
    assert states_equal(out, trace.states[2])


def test_scatter_needs_room():
    # a table packed with 0.1 cubes leaves no free cell for another one
    full = [cube(i, 0.05 + 0.1 * (i % 10), 0.05 + 0.1 * (i // 10), edge=0.1) for i in range(100)]
    with pytest.raises(NoFreeSpaceError):
        perturb(scene(*full), ErrorEvent(ErrorClass.GRASP_SLIP, 1), np.random.default_rng(0), 0)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), cls=st.sampled_from(list(ErrorClass)), coop=st.booleans())
def test_perturb_keeps_identities_and_validity(seed, cls, coop):
    rng = np.random.default_rng(seed)
    task = sample_task(5, rng)
    plan = plan_nominal(task)
    if not plan:
        return
    s = apply_action(task.initial, plan[0])
    params = {"cooperative": coop} if cls is ErrorClass.EXTERNAL_AGENT else {"op": "swap" if coop else "relocate"}
    out = perturb(s, ErrorEvent(cls, 1, params), rng, plan[0].moved, plan[1:])
    assert out.ids == s.ids
    assert all(out.spec(i) == s.spec(i) for i in s.ids)
    assert is_valid(out)
