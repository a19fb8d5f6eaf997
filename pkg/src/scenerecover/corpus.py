"""Error-free demonstrations: random tasks, a scripted planner, transitions."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .sim import (
    COLORS,
    EDGE_LENGTHS,
    KINDS,
    ActionInstance,
    Bbox,
    ObjectSpec,
    Relation,
    SimError,
    Verb,
    WorldState,
    apply_action,
    destination,
    eval_relations,
    failed_precondition,
    grid_centers,
    is_clear,
    move_left,
    move_right,
    move_to_pose,
    move_top,
    stack_of,
    table_box,
    table_placement_mask,
)

SCENE_ATTEMPTS = 500
SCENE_GAP = 0.01  # random scenes never start with accidental adjacency


class SceneSamplingError(SimError):
    pass


class PlanningError(SimError):
    pass


@dataclass(frozen=True)
class DemoTask:
    initial: WorldState
    relations: frozenset[Relation]
    placements: tuple[tuple[int, Bbox], ...] = ()

    def satisfied(self, state: WorldState) -> bool:
        if not self.relations <= eval_relations(state):
            return False
        return all(
            np.allclose(state.bbox(i).center, box.center, atol=1e-9)
            for i, box in self.placements
        )

    def to_dict(self) -> dict:
        return {
            "initial": self.initial.to_dict(),
            "relations": sorted([list(r) for r in self.relations]),
            "placements": [[i, b.to_dict()] for i, b in self.placements],
        }

    @classmethod
    def from_dict(cls, d: dict) -> DemoTask:
        return cls(
            WorldState.from_dict(d["initial"]),
            frozenset(Relation(p, a, b) for p, a, b in d["relations"]),
            tuple((i, Bbox.from_dict(b)) for i, b in d["placements"]),
        )


@dataclass(frozen=True)
class Transition:
    before: WorldState
    action: ActionInstance
    after: WorldState

    @property
    def moved_id(self) -> int:
        return self.action.moved

    def to_dict(self) -> dict:
        return {
            "before": self.before.to_dict(),
            "action": self.action.to_dict(),
            "after": self.after.to_dict(),
            "moved_id": self.moved_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> Transition:
        return cls(
            WorldState.from_dict(d["before"]),
            ActionInstance.from_dict(d["action"]),
            WorldState.from_dict(d["after"]),
        )


# --- scenes and tasks -----------------------------------------------------


def sample_scene(n_objects: int, rng: np.random.Generator) -> WorldState:
    objs: list[tuple[ObjectSpec, Bbox]] = []
    for i in range(n_objects):
        size = tuple(float(EDGE_LENGTHS[k]) for k in rng.integers(len(EDGE_LENGTHS), size=3))
        spec = ObjectSpec(
            i, COLORS[int(rng.integers(len(COLORS)))], KINDS[int(rng.integers(len(KINDS)))], size
        )
        half = spec.half
        for _ in range(SCENE_ATTEMPTS):
            x = rng.uniform(half[0], 1.0 - half[0])
            y = rng.uniform(half[1], 1.0 - half[1])
            box = Bbox((x, y, half[2]), half)
            if all(
                abs(x - b.center[0]) >= half[0] + b.extents[0] + SCENE_GAP
                or abs(y - b.center[1]) >= half[1] + b.extents[1] + SCENE_GAP
                for _, b in objs
            ):
                objs.append((spec, box))
                break
        else:
            raise SceneSamplingError(f"could not place object {i}")
    return WorldState(tuple(objs))


def _random_goal(state: WorldState, rng: np.random.Generator):
    ids = [int(i) for i in rng.permutation(state.ids)]
    relations: set[Relation] = set()
    placements: list[tuple[int, Bbox]] = []
    cells = grid_centers(state.workspace, 10)
    while len(ids) >= 2:
        kind = rng.choice(["tower", "left", "right"], p=[0.6, 0.2, 0.2])
        longest = 5 if kind == "tower" else 3
        length = int(rng.integers(2, min(longest, len(ids)) + 1))
        members, ids = ids[:length], ids[length:]
        pred = {"tower": "Top", "left": "Left", "right": "Right"}[kind]
        # members[0] is the base; each later member relates to its predecessor
        for below, above in zip(members, members[1:]):
            relations.add(Relation(pred, above, below))
        if rng.random() < 0.5:
            base = members[0]
            xy = cells[int(rng.integers(len(cells)))]
            placements.append((base, table_box(state, base, xy)))
        if rng.random() < 0.3:
            break
    for obj in ids:
        if rng.random() < 0.3:
            xy = cells[int(rng.integers(len(cells)))]
            placements.append((obj, table_box(state, obj, xy)))
    return frozenset(relations), tuple(placements)


def sample_task(
    n_objects: int, rng: np.random.Generator, plan_len: int | None = None, max_tries: int = 500
) -> DemoTask:
    """Random scene plus a random achievable goal (towers, chains, placements).

    With ``plan_len`` set, resample until the nominal plan has that length.
    """
    if not 3 <= n_objects <= 10:
        raise ValueError("n_objects must be within 3..10")
    for _ in range(max_tries):
        scene = sample_scene(n_objects, rng)
        relations, placements = _random_goal(scene, rng)
        task = DemoTask(scene, relations, placements)
        try:
            plan = plan_nominal(task)
        except PlanningError:
            continue
        if plan_len is None or len(plan) == plan_len:
            if plan or plan_len == 0:
                return task
    raise SceneSamplingError("no achievable task found")


# --- scripted nominal planner ---------------------------------------------


def _goal_order(task: DemoTask) -> list[tuple[str, int, object]]:
    """Goal atoms ordered so every object is placed after what it rests on
    or abuts."""
    depends: dict[int, int] = {r.a: r.b for r in task.relations}
    pose = dict(task.placements)
    objects = sorted(set(depends) | set(depends.values()) | set(pose))

    def depth(obj, seen=()):
        if obj in seen:
            raise PlanningError("cyclic goal")
        return 0 if obj not in depends else 1 + depth(depends[obj], seen + (obj,))

    order = []
    for obj in sorted(objects, key=lambda o: (depth(o), o)):
        if obj in pose:
            order.append(("At", obj, pose[obj]))
        if obj in depends:
            rel = next(r for r in task.relations if r.a == obj)
            order.append((rel.pred, obj, rel.b))
    return order


def _action_for(step) -> ActionInstance:
    pred, obj, arg = step
    if pred == "At":
        return move_to_pose(obj, arg)
    return {"Top": move_top, "Left": move_left, "Right": move_right}[pred](obj, arg)


def _holds(state: WorldState, step) -> bool:
    pred, obj, arg = step
    if pred == "At":
        return bool(np.allclose(state.bbox(obj).center, arg.center, atol=1e-9))
    return Relation(pred, obj, arg) in eval_relations(state)


def _clear_way(state, action, fixed, plan):
    """Move loose objects out of the way of ``action`` (free-space unstacking)."""
    dest = destination(state, action)
    blockers = [
        s.id for s, b in state.objects
        if s.id != action.moved and dest.overlap_volume(b) > 1e-9
    ]
    for side in (action.moved, action.target):
        if side is not None and not is_clear(state, side):
            blockers += stack_of(state, side)[stack_of(state, side).index(side) + 1:]
    blockers = {a for b in blockers for a in stack_of(state, b)[stack_of(state, b).index(b):]}
    if not blockers or any(b in fixed for b in blockers):
        raise PlanningError(f"cannot clear the way for {action}")
    cells = grid_centers(state.workspace)
    for obj in sorted(set(blockers), key=lambda i: -state.bbox(i).bottom):
        reserved = [dest] + [state.bbox(f) for f in fixed]
        ok = table_placement_mask(state, obj, cells, reserved)
        if not ok.any():
            raise PlanningError("no free space to unstack")
        here = np.array(state.bbox(obj).center[:2])
        best = int(np.argmin(np.where(ok, np.linalg.norm(cells - here, axis=1), np.inf)))
        step = move_to_pose(obj, table_box(state, obj, cells[best]))
        if failed_precondition(state, step) is not None:
            raise PlanningError(f"cannot unstack {obj}")
        plan.append(step)
        state = apply_action(state, step)
    return state


def plan_nominal(task: DemoTask) -> list[ActionInstance]:
    """Goal-regression plan: place supports and anchors before dependents."""
    state = task.initial
    plan: list[ActionInstance] = []
    fixed: set[int] = set()
    for step in _goal_order(task):
        if _holds(state, step):
            fixed.add(step[1])
            continue
        action = _action_for(step)
        if failed_precondition(state, action) is not None:
            state = _clear_way(state, action, fixed, plan)
            if failed_precondition(state, action) is not None:
                raise PlanningError(f"{action} still inapplicable")
        plan.append(action)
        state = apply_action(state, action)
        fixed.add(step[1])
    if not task.satisfied(state):
        raise PlanningError("plan does not reach the goal")
    if len(plan) > 10:
        raise PlanningError("plan too long")
    return plan


def execute(state: WorldState, plan: Iterable[ActionInstance]) -> list[WorldState]:
    states = [state]
    for action in plan:
        states.append(apply_action(states[-1], action))
    return states


# --- corpus ---------------------------------------------------------------


def generate_corpus(
    n_transitions: int, rng: np.random.Generator, objects: tuple[int, int] = (3, 5)
) -> list[Transition]:
    if n_transitions < 1:
        raise ValueError("n_transitions must be >= 1")
    corpus: list[Transition] = []
    while len(corpus) < n_transitions:
        task_rng = np.random.default_rng(int(rng.integers(2**63)))
        n = int(task_rng.integers(objects[0], objects[1] + 1))
        task = sample_task(n, task_rng)
        plan = plan_nominal(task)
        states = execute(task.initial, plan)
        for before, action, after in zip(states, plan, states[1:]):
            corpus.append(Transition(before, action, after))
    return corpus[:n_transitions]


def write_jsonl(items: Iterable, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for item in items:
            fh.write(json.dumps(item.to_dict()) + "\n")


def read_corpus(path) -> list[Transition]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [Transition.from_dict(json.loads(line)) for line in lines if line.strip()]
