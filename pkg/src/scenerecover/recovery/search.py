"""Discrepancy-guided multi-goal recovery search.

Search nodes carry the simulated state (for the final goal check and for
precondition filtering) and, in learned mode, the imagined scene graph. Every
action moves one object, so a child's per-subgoal match vector differs from
its parent's in a single column and only that column is re-scored.
"""

from __future__ import annotations

import enum
import heapq
import itertools
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..discriminator import TAU, LearnedDiscriminator, OracleDiscriminator, discrepancy
from ..scenegraph import NominalTrace, SceneGraph, SceneModels, decode_node, encode_scene, grounded_graph, predict_moved_nodes
from ..sim import (
    ActionInstance,
    Bbox,
    Verb,
    WorldState,
    Workspace,
    destination,
    failed_precondition,
    is_clear,
    states_equal,
)
from .dag import PrecedenceDag, recovery_priority
from .freespace import FreeSpaceModel, NoFreeCellError, all_free_poses, free_pose_oracle, predict_free_pose

LEARNED_GOAL_TOL = 0.02
ORACLE_GOAL_TOL = 1e-6


class Mode(str, enum.Enum):
    LAST_INTENDED = "last"
    ANYTIME = "anytime"


class FreeSpaceMode(str, enum.Enum):
    PREDICT = "predict"  # learned regressor, snapped by the grid oracle if needed
    ORACLE = "oracle"  # nearest free grid cell
    ENUMERATE = "enumerate"  # every free grid cell becomes a branch


class BudgetExceededError(RuntimeError):
    def __init__(self, message: str, nodes_expanded: int, nodes_generated: int, elapsed: float):
        super().__init__(f"{message} (expanded {nodes_expanded}, generated {nodes_generated}, {elapsed:.2f}s)")
        self.nodes_expanded = nodes_expanded
        self.nodes_generated = nodes_generated
        self.elapsed = elapsed


@dataclass
class RecoveryConfig:
    mode: Mode = Mode.LAST_INTENDED
    K_max: int = 5
    budget_s: float = 30.0
    max_expansions: int = 2000
    oracle: bool = False  # ground-truth discriminator and subgoal poses
    goal_tol: float | None = None
    exact_suffix: bool = False  # cost the plan suffix as T - k instead of 0
    state_goal_test: bool = True  # False: discrepancy 0 alone certifies a goal
    free_space: FreeSpaceMode = FreeSpaceMode.PREDICT
    replan: bool = False  # subgoal set forced to the final goal
    tau: float = TAU

    def __post_init__(self):
        self.mode = Mode(self.mode)
        self.free_space = FreeSpaceMode(self.free_space)
        if self.budget_s <= 0:
            raise ValueError("budget must be positive")
        if self.K_max < 1:
            raise ValueError("K_max must be >= 1")

    @property
    def tol(self) -> float:
        if self.goal_tol is not None:
            return self.goal_tol
        return ORACLE_GOAL_TOL if self.oracle else LEARNED_GOAL_TOL

    def to_dict(self) -> dict:
        return {
            "mode": self.mode.value, "K_max": self.K_max, "budget_s": self.budget_s,
            "max_expansions": self.max_expansions, "oracle": self.oracle, "goal_tol": self.tol,
            "exact_suffix": self.exact_suffix, "state_goal_test": self.state_goal_test,
            "free_space": self.free_space.value, "replan": self.replan, "tau": self.tau,
        }


@dataclass
class Planner:
    """Learned components; any may be None in oracle mode."""

    models: SceneModels | None = None
    disc: LearnedDiscriminator | None = None
    freespace: FreeSpaceModel | None = None


# --- subgoals -------------------------------------------------------------


@dataclass(frozen=True)
class Subgoal:
    index: int
    graph: SceneGraph
    state: WorldState


@dataclass
class SubgoalSet:
    subgoals: list[Subgoal]
    budget: float = 30.0

    @property
    def K(self) -> int:
        return len(self.subgoals)

    @property
    def indices(self) -> list[int]:
        return [s.index for s in self.subgoals]


def subgoal_discrepancies(trace: NominalTrace, z_E: SceneGraph, disc, tau: float = TAU) -> list[int]:
    return [discrepancy(g, z_E, disc, tau) for g in trace.graphs]


def select_subgoals(
    trace: NominalTrace,
    z_E: SceneGraph,
    mode,
    K: int,
    disc,
    error_step: int,
    tau: float = TAU,
    budget: float = 30.0,
) -> SubgoalSet:
    """last: the state the failed step was meant to reach; anytime: the K
    trace states closest to ``z_E`` by discrepancy (ties toward the goal)."""
    mode = Mode(mode)
    if mode is Mode.LAST_INTENDED:
        picks = [error_step]
    else:
        if not 1 <= K <= len(trace):
            raise ValueError("K must be within 1..len(trace)")
        d = subgoal_discrepancies(trace, z_E, disc, tau)
        picks = sorted(range(len(trace)), key=lambda k: (d[k], -k))[:K]
    return SubgoalSet([Subgoal(k, trace.graphs[k], trace.states[k]) for k in picks], budget)


# --- candidate actions ----------------------------------------------------

_RELATION_VERBS = (Verb.MOVE_TOP, Verb.MOVE_LEFT, Verb.MOVE_RIGHT)


def plan_partners(plan: Sequence[ActionInstance], k: int) -> dict[int, tuple[Verb, int]]:
    """For each object, the relational placement that last put it where it is
    in trace state k (objects last moved by MoveToPose have none)."""
    partners: dict[int, tuple[Verb, int]] = {}
    for action in plan[:k]:
        if action.verb in _RELATION_VERBS:
            partners[action.moved] = (action.verb, action.target)
        else:
            partners.pop(action.moved, None)
    return partners


@dataclass(frozen=True)
class SubgoalTargets:
    index: int
    poses: dict[int, Bbox]
    partners: dict[int, tuple[Verb, int]]


def decoded_table_pose(node: np.ndarray, extents, models: SceneModels, workspace=Workspace()) -> Bbox | None:
    """Decoded pose at table level with the object's known extents (clamped
    into the workspace), or None when the decoded box sits above the table
    (stacking is reached through relational actions instead)."""
    _, box = decode_node(node, models)
    if box.center[2] > extents[2] + LEARNED_GOAL_TOL:
        return None
    x = float(np.clip(box.center[0], workspace.xmin + extents[0], workspace.xmax - extents[0]))
    y = float(np.clip(box.center[1], workspace.ymin + extents[1], workspace.ymax - extents[1]))
    return Bbox((x, y, extents[2]), tuple(extents))


_NUDGES = sorted(
    ((dx, dy) for dx in np.arange(-8, 9) * 0.0025 for dy in np.arange(-8, 9) * 0.0025),
    key=lambda d: (d[0] ** 2 + d[1] ** 2, d),
)


def nudge_pose(state: WorldState, obj: int, pose: Bbox, slack: float) -> Bbox | None:
    """Closest table pose within ``slack`` (per axis) of an approximate
    target that the object can actually be moved to."""
    for dx, dy in _NUDGES:
        if max(abs(dx), abs(dy)) >= slack:
            continue
        cand = Bbox((pose.center[0] + dx, pose.center[1] + dy, pose.center[2]), pose.extents)
        if failed_precondition(state, ActionInstance(Verb.MOVE_TO_POSE, (obj,), cand)) is None:
            return cand
    return None


def subgoal_targets(subgoal: Subgoal, plan, state: WorldState, planner: Planner, oracle: bool) -> SubgoalTargets:
    if oracle:
        poses = {i: subgoal.state.bbox(i) for i in state.ids}
    else:
        poses = {}
        for i in state.ids:
            pose = decoded_table_pose(subgoal.graph.node(i), state.bbox(i).extents, planner.models, state.workspace)
            if pose is not None:
                poses[i] = pose
    return SubgoalTargets(subgoal.index, poses, plan_partners(plan, subgoal.index))


FreePoseFn = Callable[[WorldState, int, Sequence[Bbox]], list[Bbox]]


def free_pose_function(mode: FreeSpaceMode, planner: Planner) -> FreePoseFn:
    def predicted(state, obj, reserved):
        return [predict_free_pose(state, obj, planner.freespace, reserved)]

    def nearest(state, obj, reserved):
        return [free_pose_oracle(state, obj, reserved)]

    def enumerate_all(state, obj, reserved):
        return all_free_poses(state, obj, reserved)

    if mode is FreeSpaceMode.PREDICT and planner.freespace is None:
        raise ValueError("free-space prediction needs a trained free-space model")
    return {FreeSpaceMode.PREDICT: predicted, FreeSpaceMode.ORACLE: nearest, FreeSpaceMode.ENUMERATE: enumerate_all}[mode]


def _action_key(a: ActionInstance):
    box = None if a.target_bbox is None else tuple(round(c, 9) for c in a.target_bbox.center)
    return a.verb, a.args, box


def candidate_actions(
    state: WorldState,
    erroneous_ids,
    targets: Sequence[SubgoalTargets],
    dag: PrecedenceDag | None = None,
    free_poses: FreePoseFn | None = None,
    pose_slack: float = 0.0,
) -> list[ActionInstance]:
    """Pruned action set: only erroneous objects move, toward their subgoal
    poses, onto their subgoal partners, or to free space. With
    ``pose_slack`` > 0 (approximate decoded poses) a blocked subgoal pose is
    nudged to the nearest reachable one within the slack."""
    erroneous_ids = set(erroneous_ids)
    order = recovery_priority(dag, erroneous_ids) if dag is not None else sorted(erroneous_ids)
    reserved = [t.poses[o] for t in targets for o in sorted(erroneous_ids) if o in t.poses]
    out, seen = [], set()

    def add(action, checked=False):
        key = _action_key(action)
        if key not in seen and (checked or failed_precondition(state, action) is None):
            seen.add(key)
            out.append(action)

    for obj in order:
        here = state.bbox(obj)
        for t in targets:
            if obj in t.partners:
                verb, partner = t.partners[obj]
                add(ActionInstance(verb, (obj, partner)))
            pose = t.poses.get(obj)
            if pose is not None and not np.allclose(pose.center, here.center, atol=1e-9):
                action = ActionInstance(Verb.MOVE_TO_POSE, (obj,), pose)
                if pose_slack > 0 and failed_precondition(state, action) == "collision_free":
                    pose = nudge_pose(state, obj, pose, pose_slack)
                    action = None if pose is None else ActionInstance(Verb.MOVE_TO_POSE, (obj,), pose)
                if action is not None:
                    add(action)
        if free_poses is not None and is_clear(state, obj):
            try:
                boxes = free_poses(state, obj, [here] + reserved)
            except NoFreeCellError:
                boxes = []
            # free poses come from the placement mask, so only clearness needed checking
            for box in boxes:
                add(ActionInstance(Verb.MOVE_TO_POSE, (obj,), box), checked=True)
    return out


# --- scoring --------------------------------------------------------------


class _OracleScorer:
    def __init__(self, subgoals: Sequence[Subgoal], tol: float):
        self.ids = subgoals[0].state.ids
        self.tol = tol
        self.boxes = np.array([[s.state.bbox(i).center for i in self.ids] for s in subgoals])

    def root(self, state: WorldState, graph) -> np.ndarray:
        here = np.array([state.bbox(i).center for i in self.ids])
        return np.all(np.abs(self.boxes - here[None]) < self.tol, axis=2)

    def children(self, parent_graph, actions, states) -> tuple[list, np.ndarray]:
        cols = []
        for a, s in zip(actions, states):
            j = self.ids.index(a.moved)
            cols.append(np.all(np.abs(self.boxes[:, j] - np.array(s.bbox(a.moved).center)) < self.tol, axis=1))
        return [None] * len(actions), np.array(cols).reshape(len(actions), -1)


class _LearnedScorer:
    def __init__(self, subgoals: Sequence[Subgoal], planner: Planner, tau: float):
        self.subgoals = subgoals
        self.planner = planner
        self.tau = tau

    def root(self, state, graph) -> np.ndarray:
        return np.array([self.planner.disc.scores(s.graph, graph) >= self.tau for s in self.subgoals])

    def children(self, parent_graph: SceneGraph, actions, states):
        nodes = predict_moved_nodes(parent_graph, actions, self.planner.models)
        idx = [parent_graph.index(a.moved) for a in actions]
        cols = np.stack(
            [self.planner.disc.pair_scores(s.graph.embeddings[idx], nodes) >= self.tau for s in self.subgoals],
            axis=1,
        )
        graphs = [parent_graph.with_node(a.moved, n, s) for a, n, s in zip(actions, nodes, states)]
        return graphs, cols


# --- search ---------------------------------------------------------------


@dataclass
class SearchNode:
    state: WorldState
    graph: SceneGraph | None
    g_cost: int
    parent: SearchNode | None
    action: ActionInstance | None
    match: np.ndarray  # (subgoals, objects) bool
    h: int = 0

    def plan(self) -> list[ActionInstance]:
        out, node = [], self
        while node.parent is not None:
            out.append(node.action)
            node = node.parent
        return out[::-1]


@dataclass
class SearchOutcome:
    actions: list[ActionInstance]
    latch: int
    nodes_expanded: int
    nodes_generated: int


def multi_goal_search(
    root_state: WorldState,
    root_graph: SceneGraph | None,
    subgoals: SubgoalSet,
    trace: NominalTrace,
    planner: Planner,
    cfg: RecoveryConfig,
    dag: PrecedenceDag | None = None,
    deadline: float | None = None,
) -> SearchOutcome:
    """Best-first search on f = g + min_k(discrepancy_k + c_k), FIFO ties."""
    start = time.perf_counter()
    deadline = deadline if deadline is not None else start + cfg.budget_s
    goals = subgoals.subgoals
    T = len(trace) - 1
    suffix = np.array([T - s.index if cfg.exact_suffix else 0 for s in goals])
    targets = [subgoal_targets(s, trace.plan, root_state, planner, cfg.oracle) for s in goals]
    scorer = _OracleScorer(goals, cfg.tol) if cfg.oracle else _LearnedScorer(goals, planner, cfg.tau)
    free_poses = free_pose_function(cfg.free_space, planner)
    ids = root_state.ids

    def heuristic(match):
        return int(np.min(len(ids) - match.sum(axis=1) + suffix))

    def goal_indices(node):
        # latching onto S_k also requires the plan suffix to be executable
        done = []
        for k, s in enumerate(goals):
            if node.match[k].all() and (
                not cfg.state_goal_test
                or (
                    states_equal(node.state, s.state, cfg.tol)
                    and (s.index >= T or failed_precondition(node.state, trace.plan[s.index]) is None)
                )
            ):
                done.append(k)
        return done

    root_match = scorer.root(root_state, root_graph)
    root = SearchNode(root_state, root_graph, 0, None, None, root_match, heuristic(root_match))
    seq = itertools.count()
    heap = [(root.h, next(seq), -1, root)]
    closed: set = set()
    expanded = generated = 0
    while heap:
        f, _, terminal, node = heapq.heappop(heap)
        if terminal >= 0:
            return SearchOutcome(node.plan(), goals[terminal].index, expanded, generated)
        key = node.state.key()
        if key in closed:
            continue
        closed.add(key)
        reached = goal_indices(node)
        if reached:
            best = min(reached, key=lambda k: (suffix[k], -goals[k].index))
            heapq.heappush(heap, (node.g_cost + int(suffix[best]), next(seq), best, node))
        if expanded >= cfg.max_expansions:
            raise BudgetExceededError("expansion budget exhausted", expanded, generated, time.perf_counter() - start)
        if time.perf_counter() > deadline:
            raise BudgetExceededError("time budget exhausted", expanded, generated, time.perf_counter() - start)
        expanded += 1
        erroneous = [i for j, i in enumerate(ids) if not node.match[:, j].all()]
        actions = candidate_actions(node.state, erroneous, targets, dag, free_poses, 0.0 if cfg.oracle else cfg.tol)
        states = [node.state.with_bbox(a.moved, destination(node.state, a)) for a in actions]
        fresh = [k for k, s in enumerate(states) if s.key() not in closed]
        if not fresh:
            continue
        actions = [actions[k] for k in fresh]
        states = [states[k] for k in fresh]
        graphs, cols = scorer.children(node.graph, actions, states)
        for a, s, g, col in zip(actions, states, graphs, cols):
            match = node.match.copy()
            match[:, ids.index(a.moved)] = col
            child = SearchNode(s, g, node.g_cost + 1, node, a, match, heuristic(match))
            heapq.heappush(heap, (child.g_cost + child.h, next(seq), -1, child))
            generated += 1
    raise BudgetExceededError("search space exhausted without reaching a subgoal", expanded, generated,
                              time.perf_counter() - start)


@dataclass
class RecoveryResult:
    actions: list[ActionInstance]
    latch: int
    spliced: list[ActionInstance]
    nodes_expanded: int
    nodes_generated: int
    wall_time: float
    K: int
    subgoal_indices: list[int]
    rounds: list[dict] = field(default_factory=list)

    @property
    def length(self) -> int:
        return len(self.actions)

    def to_dict(self) -> dict:
        return {
            "actions": [a.to_dict() for a in self.actions],
            "latch": self.latch,
            "spliced": [a.to_dict() for a in self.spliced],
            "nodes_expanded": self.nodes_expanded,
            "nodes_generated": self.nodes_generated,
            "wall_time": self.wall_time,
            "K": self.K,
            "subgoal_indices": list(self.subgoal_indices),
            "rounds": list(self.rounds),
        }


def k_schedule(cfg: RecoveryConfig, trace_len: int) -> list[int]:
    if cfg.replan or cfg.mode is Mode.LAST_INTENDED:
        return [1]
    return [k for k in range(1, cfg.K_max + 1, 2) if k <= trace_len] or [trace_len]


def search_recovery(
    S_E: WorldState,
    trace: NominalTrace,
    error_step: int,
    planner: Planner,
    cfg: RecoveryConfig = RecoveryConfig(),
    dag: PrecedenceDag | None = None,
) -> RecoveryResult:
    """Recovery plan from ``S_E`` back onto the nominal trace.

    Anytime mode restarts with K = 1, 3, 5, ... subgoals while budget remains
    and keeps the best plan (shortest recovery by default; shortest recovery
    plus suffix with ``exact_suffix``)."""
    start = time.perf_counter()
    deadline = start + cfg.budget_s
    T = len(trace) - 1
    if cfg.oracle:
        disc = OracleDiscriminator(cfg.tol)
        z_E = grounded_graph(S_E)
    else:
        disc = planner.disc
        z_E = encode_scene(S_E, planner.models)
    best: SearchOutcome | None = None
    best_K, best_set = 0, []
    expanded = generated = 0
    rounds = []
    last_error: BudgetExceededError | None = None
    for K in k_schedule(cfg, len(trace)):
        if cfg.replan:
            sub = SubgoalSet([Subgoal(T, trace.graphs[T], trace.states[T])], cfg.budget_s)
        else:
            sub = select_subgoals(trace, z_E, cfg.mode, K, disc, error_step, cfg.tau, cfg.budget_s)
        try:
            out = multi_goal_search(S_E, z_E, sub, trace, planner, cfg, dag, deadline)
        except BudgetExceededError as err:
            expanded += err.nodes_expanded
            generated += err.nodes_generated
            rounds.append({"K": K, "subgoals": sub.indices, "length": None, "latch": None})
            last_error = err
            if time.perf_counter() > deadline:
                break
            continue
        expanded += out.nodes_expanded
        generated += out.nodes_generated
        rounds.append({"K": K, "subgoals": sub.indices, "length": len(out.actions), "latch": out.latch})
        if best is None or _better(out, best, T, cfg):
            best, best_K, best_set = out, K, sub.indices
        if time.perf_counter() > deadline:
            break
    elapsed = time.perf_counter() - start
    if best is None:
        raise BudgetExceededError(
            f"no recovery found ({last_error})", expanded, generated, elapsed
        )
    return RecoveryResult(
        best.actions, best.latch, best.actions + list(trace.plan[best.latch:]),
        expanded, generated, elapsed, best_K, best_set, rounds,
    )


def _better(a: SearchOutcome, b: SearchOutcome, T: int, cfg: RecoveryConfig) -> bool:
    if cfg.exact_suffix:
        return (len(a.actions) + T - a.latch, -a.latch) < (len(b.actions) + T - b.latch, -b.latch)
    return (len(a.actions), -a.latch) < (len(b.actions), -b.latch)

