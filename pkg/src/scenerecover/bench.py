"""Benchmark harness: episode streams, metric aggregation, baselines, reports."""

from __future__ import annotations

import csv
import enum
import heapq
import io
import itertools
import json
from collections import deque
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import DemoTask, plan_nominal, sample_task
from .injector import ErrorSchedule, Profile, make_schedule
from .pipeline import MissingCheckpointError
from .recovery.episode import EpisodeConfig, EpisodeRecord, nominal_trace, run_episode
from .recovery.freespace import NoFreeCellError, free_pose_oracle
from .recovery.search import (
    BudgetExceededError,
    FreeSpaceMode,
    Mode,
    Planner,
    RecoveryConfig,
    search_recovery,
    k_schedule,
    select_subgoals,
)
from .discriminator import OracleDiscriminator
from .scenegraph import encode_scene, grounded_graph
from .sim import ActionInstance, Verb, WorldState, destination, failed_precondition, is_clear, states_equal

DEPTH_CAP = 6
MAX_OPT_NODES = 200_000
N_OBJECTS = 5
DEFAULT_EPISODES = {"I": 100, "II": 150, "III": 50}


# --- exhaustive optimal-length oracle --------------------------------------


def unpruned_actions(state: WorldState, subgoal_states: Sequence[WorldState]) -> list[ActionInstance]:
    """Every object may go onto / beside every other object, to its pose in
    any subgoal, or to one parking cell that avoids all subgoal poses."""
    ids = state.ids
    reserved = [s.bbox(i) for s in subgoal_states for i in ids]
    out = []
    for obj in ids:
        if not is_clear(state, obj):
            continue
        cands = [ActionInstance(v, (obj, b)) for b in ids if b != obj
                 for v in (Verb.MOVE_TOP, Verb.MOVE_LEFT, Verb.MOVE_RIGHT)]
        here = state.bbox(obj)
        for s in subgoal_states:
            pose = s.bbox(obj)
            if not np.allclose(pose.center, here.center, atol=1e-9):
                cands.append(ActionInstance(Verb.MOVE_TO_POSE, (obj,), pose))
        try:
            cands.append(ActionInstance(Verb.MOVE_TO_POSE, (obj,), free_pose_oracle(state, obj, [here] + reserved)))
        except NoFreeCellError:
            pass
        out.extend(a for a in cands if failed_precondition(state, a) is None)
    return out


def _reached(state, subgoal_states, next_actions, tol) -> bool:
    for s, nxt in zip(subgoal_states, next_actions):
        if states_equal(state, s, tol) and (nxt is None or failed_precondition(state, nxt) is None):
            return True
    return False


def compute_l_opt(
    S_E: WorldState,
    subgoal_states: Sequence[WorldState],
    next_actions: Sequence[ActionInstance | None] | None = None,
    depth_cap: int = DEPTH_CAP,
    tol: float = 1e-6,
    method: str = "astar",
    max_nodes: int = MAX_OPT_NODES,
) -> int | None:
    """Length of the shortest recovery from ``S_E`` to any subgoal state over
    the unpruned action space; None when deeper than ``depth_cap`` (or the
    node limit is hit first).

    ``astar`` uses the misplaced-object count, which never overestimates
    since each action moves one object; ``bfs`` is the plain reference."""
    subgoal_states = list(subgoal_states)
    next_actions = list(next_actions) if next_actions is not None else [None] * len(subgoal_states)
    if _reached(S_E, subgoal_states, next_actions, tol):
        return 0
    targets = np.array([s.centers() for s in subgoal_states])

    def h(state):
        return int(np.min(np.any(np.abs(targets - state.centers()[None]) >= tol, axis=2).sum(axis=1)))

    seen = {S_E.key()}
    count = 0
    if method == "bfs":
        frontier = deque([(S_E, 0)])
        while frontier:
            state, g = frontier.popleft()
            if g >= depth_cap:
                continue
            for a in unpruned_actions(state, subgoal_states):
                child = state.with_bbox(a.moved, destination(state, a))
                key = child.key()
                if key in seen:
                    continue
                if _reached(child, subgoal_states, next_actions, tol):
                    return g + 1
                seen.add(key)
                count += 1
                if count > max_nodes:
                    return None
                frontier.append((child, g + 1))
        return None
    if method != "astar":
        raise ValueError(f"unknown method {method!r}")
    tie = itertools.count()
    heap = [(h(S_E), next(tie), 0, S_E)]
    best_g = {S_E.key(): 0}
    while heap:
        f, _, g, state = heapq.heappop(heap)
        if g > best_g.get(state.key(), np.inf):
            continue
        if _reached(state, subgoal_states, next_actions, tol):
            return g
        if f > depth_cap:
            return None
        for a in unpruned_actions(state, subgoal_states):
            child = state.with_bbox(a.moved, destination(state, a))
            key = child.key()
            if g + 1 >= best_g.get(key, np.inf):
                continue
            best_g[key] = g + 1
            count += 1
            if count > max_nodes:
                return None
            heapq.heappush(heap, (g + 1 + h(child), next(tie), g + 1, child))
    return None


# --- episodes ---------------------------------------------------------------


class BaselineKind(str, enum.Enum):
    OURS = "ours"
    REPLAN = "replan"
    NOFREE = "nofree"
    ANYTIME = "anytime"


def variant_label(kind: BaselineKind, K: int) -> str:
    kind = BaselineKind(kind)
    return {
        BaselineKind.OURS: "Ours",
        BaselineKind.REPLAN: "RePlan",
        BaselineKind.NOFREE: "NoFree",
        BaselineKind.ANYTIME: f"OursAnytime(K={K})",
    }[kind]


def recovery_config(kind, K: int = 5, oracle: bool = False, max_expansions: int = 500, budget_s: float = 30.0) -> RecoveryConfig:
    kind = BaselineKind(kind)
    return RecoveryConfig(
        mode=Mode.ANYTIME if kind is BaselineKind.ANYTIME else Mode.LAST_INTENDED,
        K_max=K,
        budget_s=budget_s,
        max_expansions=max_expansions,
        oracle=oracle,
        free_space=(
            FreeSpaceMode.ENUMERATE if kind is BaselineKind.NOFREE
            else FreeSpaceMode.ORACLE if oracle else FreeSpaceMode.PREDICT
        ),
        replan=kind is BaselineKind.REPLAN,
    )


@dataclass
class Episode:
    profile: str
    seed: int
    task: DemoTask
    plan: list[ActionInstance]
    schedule: ErrorSchedule


def make_episode(profile, seed: int, n_objects: int = N_OBJECTS) -> Episode:
    """I and III: plans of 3-5 steps; II: 1-5 steps (one error per step)."""
    profile = Profile(profile)
    rng = np.random.default_rng([seed, 0])
    lo = 1 if profile is Profile.II else 3
    plan_len = int(rng.integers(lo, 6))
    task = sample_task(n_objects, rng, plan_len=plan_len)
    plan = plan_nominal(task)
    return Episode(profile.value, seed, task, plan, make_schedule(profile, len(plan), n_objects, seed))


def episode_seeds(seed: int, n: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n)]


# --- metrics ----------------------------------------------------------------


@dataclass
class RecoveryStat:
    episode: int
    step: int
    true_error: bool
    succeeded: bool
    length: int
    n_err: int
    l_opt: int | None
    l_orig: int | None
    nodes_expanded: int
    wall_time: float
    nodes_generated: int = 0


@dataclass
class MetricsRow:
    dataset: str
    planner: str
    episodes: int
    seed: int
    dec: float
    precision: float
    recall: float
    rec: float
    comp: float
    l_per_err: float
    l_per_opt: float
    l_plan_per_orig: float | None
    nodes_per_recovery: float
    generated_per_recovery: float
    recoveries: int
    opt_excluded: int
    t_per_err: float = float("nan")
    t_per_opt: float = float("nan")
    t_mean: float = float("nan")

    def check(self) -> None:
        for name in ("dec", "precision", "recall", "rec", "comp"):
            v = getattr(self, name)
            if not np.isnan(v) and not 0.0 <= v <= 100.0:
                raise ValueError(f"{name} out of range: {v}")


TIMING_FIELDS = ("t_per_err", "t_per_opt", "t_mean")
METRIC_FIELDS = tuple(f.name for f in fields(MetricsRow) if f.name not in TIMING_FIELDS)


def _mean(xs) -> float:
    return float(np.mean(xs)) if len(xs) else float("nan")


def _pct(num: int, den: int) -> float:
    return 100.0 * num / den if den else float("nan")


def aggregate(
    dataset: str, planner: str, seed: int, records: Sequence[EpisodeRecord], stats: Sequence[RecoveryStat],
    anytime: bool = False,
) -> MetricsRow:
    """Rec% over recoveries triggered by true errors; L and T ratios over
    the successful ones only."""
    tp = fp = fn = tn = 0
    for r in records:
        for s in r.steps:
            d = s.detection.is_error
            tp += d and s.true_error
            fp += d and not s.true_error
            fn += (not d) and s.true_error
            tn += (not d) and not s.true_error
    true_rec = [s for s in stats if s.true_error]
    good = [s for s in true_rec if s.succeeded]
    with_opt = [s for s in good if s.l_opt is not None and (s.l_opt > 0 or s.length == 0)]
    l_opt_ratio = [1.0 if s.l_opt == 0 else s.length / s.l_opt for s in with_opt]
    t_opt = [s.wall_time / s.l_opt for s in with_opt if s.l_opt > 0]
    orig = [s.length / s.l_orig for s in good if s.l_orig]
    row = MetricsRow(
        dataset=dataset,
        planner=planner,
        episodes=len(records),
        seed=seed,
        dec=_pct(tp + tn, tp + fp + fn + tn),
        precision=_pct(tp, tp + fp),
        recall=_pct(tp, tp + fn),
        rec=_pct(len(good), len(true_rec)),
        comp=_pct(sum(r.goal_reached for r in records), len(records)),
        l_per_err=_mean([s.length / s.n_err for s in good]),
        l_per_opt=_mean(l_opt_ratio),
        l_plan_per_orig=_mean(orig) if anytime else None,
        nodes_per_recovery=_mean([s.nodes_expanded for s in stats]),
        generated_per_recovery=_mean([s.nodes_generated for s in stats]),
        recoveries=len(true_rec),
        opt_excluded=len(good) - len(with_opt),
        t_per_err=_mean([s.wall_time / s.n_err for s in good]),
        t_per_opt=_mean(t_opt),
        t_mean=_mean([s.wall_time for s in good]),
    )
    row.check()
    return row


@dataclass
class SuiteResult:
    row: MetricsRow
    records: list[EpisodeRecord] = field(default_factory=list)
    stats: list[RecoveryStat] = field(default_factory=list)


def target_subgoals(rcfg: RecoveryConfig, trace, error_state: WorldState, step: int, planner: Planner) -> list[int]:
    """Trace indices the variant may latch onto from ``error_state`` (the
    largest anytime round's set); L_opt is measured against these."""
    T = len(trace) - 1
    if rcfg.replan:
        return [T]
    if rcfg.mode is Mode.LAST_INTENDED:
        return [step]
    if rcfg.oracle:
        disc, z_E = OracleDiscriminator(rcfg.tol), grounded_graph(error_state)
    else:
        disc, z_E = planner.disc, encode_scene(error_state, planner.models)
    K = k_schedule(rcfg, len(trace))[-1]
    return sorted(select_subgoals(trace, z_E, rcfg.mode, K, disc, step, rcfg.tau).indices)


def run_suite(
    profile,
    n_episodes: int,
    planner_kind=BaselineKind.OURS,
    seed: int = 0,
    planner: Planner | None = None,
    K: int = 5,
    oracle: bool = False,
    max_expansions: int = 500,
    budget_s: float = 30.0,
    max_errors: int | None = None,
    max_depth: int | None = None,
    compute_opt: bool = True,
) -> SuiteResult:
    """Run ``n_episodes`` episodes of the dataset analog under one planner
    variant. The episode stream depends only on (profile, seed), so variants
    are paired. ``max_errors`` skips schedules with more events (drawing
    further seeds); ``max_depth`` drops episodes whose optimal recovery is
    deeper (or unknown)."""
    profile = Profile(profile)
    kind = BaselineKind(planner_kind)
    if planner is None:
        if not oracle:
            raise MissingCheckpointError("learned-mode suites need trained checkpoints")
        planner = Planner()
    rcfg = recovery_config(kind, K, oracle, max_expansions, budget_s)
    cfg = EpisodeConfig(rcfg)
    label = variant_label(kind, K)
    anytime = kind is BaselineKind.ANYTIME
    records: list[EpisodeRecord] = []
    stats: list[RecoveryStat] = []
    stream = (s for batch in itertools.count() for s in episode_seeds(seed + 7919 * batch, 64))
    while len(records) < n_episodes:
        ep = make_episode(profile, next(stream))
        if max_errors is not None and len(ep.schedule.events) > max_errors:
            continue
        trace = nominal_trace(ep.task.initial, ep.plan, planner, rcfg.oracle)
        T = len(ep.plan)
        extras: list[tuple[int | None, int | None]] = []

        def observe(step, error_state, dag, res, trace=trace, T=T, extras=extras):
            l_opt = l_orig = None
            if compute_opt:
                idx = target_subgoals(rcfg, trace, error_state, step, planner)
                l_opt = compute_l_opt(
                    error_state, [trace.states[i] for i in idx],
                    [trace.plan[i] if i < T else None for i in idx], tol=rcfg.tol,
                )
            if res is not None and anytime:
                last = replace(rcfg, mode=Mode.LAST_INTENDED)
                try:
                    l_orig = search_recovery(error_state, trace, step, planner, last, dag).length
                except BudgetExceededError:
                    l_orig = None
            extras.append((l_opt, l_orig))

        rec = run_episode(ep.task.initial, ep.plan, ep.schedule, planner, cfg, trace, observe)
        events = {s.detection.step: s.events for s in rec.steps}
        ep_stats = [
            RecoveryStat(
                ep.seed, r.step, r.true_error, r.succeeded, r.length, max(1, events.get(r.step, 0)),
                l_opt, l_orig, r.nodes_expanded, r.wall_time, r.nodes_generated,
            )
            for r, (l_opt, l_orig) in zip(rec.recoveries, extras)
        ]
        if max_depth is not None and any(
            s.true_error and (s.l_opt is None or s.l_opt > max_depth) for s in ep_stats
        ):
            continue
        records.append(rec)
        stats.extend(ep_stats)
    return SuiteResult(aggregate(profile.value, label, seed, records, stats, anytime), records, stats)


# --- reports ------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if np.isnan(v) else f"{v:.4f}"
    return str(v)


def _csv(rows: Sequence[MetricsRow], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(getattr(r, c)) for c in columns])
    return buf.getvalue()


MD_COLUMNS = (
    ("planner", "Model"), ("dec", "Dec %"), ("rec", "Rec %"), ("comp", "Comp %"),
    ("l_per_err", "L/N_err"), ("l_per_opt", "L/L_opt"), ("t_per_err", "T/N_err"),
    ("t_per_opt", "T/L_opt"), ("nodes_per_recovery", "Expanded"), ("generated_per_recovery", "Generated"),
)


def report(rows: Sequence[MetricsRow], out) -> dict[str, Path]:
    """metrics.csv (deterministic fields only), timing.csv and report.md,
    rows sorted by (dataset, planner)."""
    if not rows:
        raise ValueError("no rows to report")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rows = sorted(rows, key=lambda r: (r.dataset, r.planner))
    anytime = any(r.l_plan_per_orig is not None for r in rows)
    metric_cols = [c for c in METRIC_FIELDS if anytime or c != "l_plan_per_orig"]
    paths = {
        "metrics": out / "metrics.csv",
        "timing": out / "timing.csv",
        "report": out / "report.md",
    }
    paths["metrics"].write_text(_csv(rows, metric_cols), encoding="utf-8")
    paths["timing"].write_text(_csv(rows, ("dataset", "planner", "seed") + TIMING_FIELDS), encoding="utf-8")
    md_cols = list(MD_COLUMNS) + ([("l_plan_per_orig", "L_plan/L_orig")] if anytime else [])
    lines = []
    for dataset, group in itertools.groupby(rows, key=lambda r: r.dataset):
        group = list(group)
        lines.append(f"## Dataset {dataset} ({group[0].episodes} episodes, seed {group[0].seed})\n")
        lines.append("| " + " | ".join(h for _, h in md_cols) + " |")
        lines.append("|" + "---|" * len(md_cols))
        for r in group:
            lines.append("| " + " | ".join(_fmt(getattr(r, c)) for c, _ in md_cols) + " |")
        lines.append("")
    paths["report"].write_text("\n".join(lines), encoding="utf-8")
    return paths


def write_episodes(records: Sequence[EpisodeRecord], directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, rec in enumerate(records):
        (directory / f"episode_{i:04d}_{rec.seed}.json").write_text(rec.to_json(), encoding="utf-8")


def stats_to_json(stats: Sequence[RecoveryStat]) -> str:
    return json.dumps([asdict(s) for s in stats], sort_keys=True)
