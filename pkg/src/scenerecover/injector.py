"""Seeded execution-error injection.

The environment's erroneous transition is modeled as the nominal simulator
step followed by zero or more scheduled perturbations.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .sim import (
    ActionInstance,
    SimError,
    WorldState,
    check_precondition,
    apply_action,
    grid_centers,
    is_clear,
    on_table,
    stack_of,
    table_box,
    table_placement_mask,
)

SCATTER_ATTEMPTS = 200
NEARBY_RADIUS = 0.35


class NoFreeSpaceError(SimError):
    pass


class ErrorClass(str, enum.Enum):
    GRASP_SLIP = "GraspSlip"
    BAD_OUTCOME = "BadOutcome"
    COLLISION_TOPPLE = "CollisionTopple"
    EXTERNAL_AGENT = "ExternalAgent"
    EXPLICIT = "Explicit"


class Profile(str, enum.Enum):
    I = "I"
    II = "II"
    III = "III"


@dataclass(frozen=True)
class ErrorEvent:
    cls: ErrorClass
    step: int  # 1-based: fires after the robot executes plan action ``step``
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"class": self.cls.value, "step": self.step, "params": dict(self.params)}

    @classmethod
    def from_dict(cls, d: dict) -> ErrorEvent:
        return cls(ErrorClass(d["class"]), int(d["step"]), dict(d["params"]))


@dataclass(frozen=True)
class ErrorSchedule:
    events: tuple[ErrorEvent, ...]
    seed: int

    def at_step(self, step: int) -> list[ErrorEvent]:
        return [e for e in self.events if e.step == step]

    def to_dict(self) -> dict:
        return {"seed": self.seed, "events": [e.to_dict() for e in self.events]}

    @classmethod
    def from_dict(cls, d: dict) -> ErrorSchedule:
        return cls(tuple(ErrorEvent.from_dict(e) for e in d["events"]), int(d["seed"]))


EMPTY_SCHEDULE = ErrorSchedule((), 0)


def _random_event(step: int, rng: np.random.Generator) -> ErrorEvent:
    cls = list(ErrorClass)[int(rng.integers(len(ErrorClass)))]
    params = {}
    if cls is ErrorClass.EXTERNAL_AGENT:
        params["cooperative"] = bool(rng.random() < 0.5)
    elif cls is ErrorClass.EXPLICIT:
        params["op"] = "swap" if rng.random() < 0.5 else "relocate"
    return ErrorEvent(cls, step, params)


def make_schedule(profile, plan_len: int, n_objects: int, seed: int) -> ErrorSchedule:
    """Draw the error schedule for one episode.

    Profile I puts 1-5 events on one random step, II one event after every
    step, III five events on one random step.
    """
    profile = Profile(profile)
    rng = np.random.default_rng(seed)
    if plan_len < 1:
        return ErrorSchedule((), seed)
    if profile is Profile.II:
        events = [_random_event(t, rng) for t in range(1, plan_len + 1)]
    else:
        step = int(rng.integers(1, plan_len + 1))
        count = int(rng.integers(1, 6)) if profile is Profile.I else 5
        events = [_random_event(step, rng) for _ in range(count)]
    return ErrorSchedule(tuple(events), seed)


# --- perturbations --------------------------------------------------------


def _scatter(state: WorldState, ids: Sequence[int], rng: np.random.Generator) -> WorldState:
    """Drop ``ids`` (top-most first) onto random free table cells."""
    cells = grid_centers(state.workspace)
    heights = {i: state.bbox(i).bottom for i in ids}
    for obj in sorted(ids, key=lambda i: -heights[i]):
        if not is_clear(state, obj):
            raise SimError(f"cannot scatter {obj}: something rests on it")
        for _ in range(SCATTER_ATTEMPTS):
            xy = cells[int(rng.integers(len(cells)))]
            if table_placement_mask(state, obj, xy[None, :])[0]:
                state = state.with_bbox(obj, table_box(state, obj, xy))
                break
        else:
            raise NoFreeSpaceError(f"no free table pose for object {obj}")
    return state


def _above(state: WorldState, obj: int) -> list[int]:
    stack = stack_of(state, obj)
    return stack[stack.index(obj):]


def _relocate(state, rng):
    clear = [i for i in state.ids if is_clear(state, i)]
    obj = clear[int(rng.integers(len(clear)))]
    return _scatter(state, [obj], rng)


def _swap(state, rng):
    loose = [i for i in state.ids if is_clear(state, i) and on_table(state.bbox(i))]
    pairs = [(a, b) for k, a in enumerate(loose) for b in loose[k + 1:]]
    for idx in rng.permutation(len(pairs)):
        a, b = pairs[int(idx)]
        ba, bb = state.bbox(a), state.bbox(b)
        swapped = state.with_bboxes(
            {a: table_box(state, a, bb.center[:2]), b: table_box(state, b, ba.center[:2])}
        )
        if all(
            table_placement_mask(swapped, i, np.array([swapped.bbox(i).center[:2]]))[0]
            for i in (a, b)
        ):
            return swapped
    return _relocate(state, rng)


def perturb(
    state: WorldState,
    event: ErrorEvent,
    rng: np.random.Generator,
    moved_id: int | None = None,
    next_actions: Sequence[ActionInstance] = (),
) -> WorldState:
    """Apply one error event to the state reached by the nominal action.

    ``moved_id`` is the object the robot just moved; ``next_actions`` the
    not-yet-executed remainder of the plan (used by a cooperative agent).
    """
    cls = event.cls
    if moved_id is None:
        moved_id = state.ids[int(rng.integers(len(state)))]
    if cls is ErrorClass.GRASP_SLIP:
        return _scatter(state, _above(state, moved_id), rng)
    if cls is ErrorClass.BAD_OUTCOME:
        stack = stack_of(state, moved_id)
        falling = stack[1:] if len(stack) > 1 else stack
        return _scatter(state, falling, rng)
    if cls is ErrorClass.COLLISION_TOPPLE:
        here = np.array(state.bbox(moved_id).center[:2])
        bases = [i for i in state.ids if on_table(state.bbox(i))]
        stacks = [stack_of(state, b) for b in bases]
        near = [
            s for s in stacks
            if np.linalg.norm(np.array(state.bbox(s[0]).center[:2]) - here) <= NEARBY_RADIUS
        ]
        pool = [s for s in near if len(s) > 1] or [s for s in stacks if len(s) > 1] or near
        chosen = pool[int(rng.integers(len(pool)))]
        return _scatter(state, chosen, rng)
    if cls is ErrorClass.EXTERNAL_AGENT and event.params.get("cooperative"):
        if next_actions and check_precondition(state, next_actions[0]):
            return apply_action(state, next_actions[0])
        return _relocate(state, rng)
    if cls is ErrorClass.EXTERNAL_AGENT or event.params.get("op", "relocate") == "relocate":
        if cls is ErrorClass.EXTERNAL_AGENT and rng.random() < 0.5:
            return _swap(state, rng)
        return _relocate(state, rng)
    return _swap(state, rng)


def is_cooperative_help(event: ErrorEvent, state: WorldState, next_actions) -> bool:
    """Whether ``perturb`` will realize ``event`` by performing the next action."""
    return (
        event.cls is ErrorClass.EXTERNAL_AGENT
        and bool(event.params.get("cooperative"))
        and bool(next_actions)
        and check_precondition(state, next_actions[0])
    )
