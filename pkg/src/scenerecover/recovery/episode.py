"""Execute a plan under injected errors, detecting and recovering as it goes."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..discriminator import Detection, OracleDiscriminator, detect, write_detection_log
from ..injector import ErrorSchedule, NoFreeSpaceError, is_cooperative_help, perturb
from ..scenegraph import NominalTrace, ground_trace, rollout
from ..sim import ActionInstance, PreconditionError, WorldState, apply_action, failed_precondition, states_equal
from .dag import build_dag
from .search import BudgetExceededError, Planner, RecoveryConfig, search_recovery


@dataclass
class EpisodeConfig:
    recovery: RecoveryConfig = field(default_factory=RecoveryConfig)
    max_recoveries: int = 12


@dataclass
class StepLog:
    detection: Detection
    true_error: bool
    events: int  # perturbations that actually fired after this step

    def to_dict(self) -> dict:
        return {"detection": self.detection.to_dict(), "true_error": self.true_error, "events": self.events}

    @classmethod
    def from_dict(cls, d: dict) -> StepLog:
        return cls(Detection.from_dict(d["detection"]), bool(d["true_error"]), int(d["events"]))


@dataclass
class RecoveryLog:
    step: int
    true_error: bool
    succeeded: bool  # executing the recovery reached the latched trace state
    length: int
    latch: int
    subgoals: list[int]
    K: int
    nodes_expanded: int
    nodes_generated: int
    wall_time: float
    actions: list[dict]
    error_state: dict
    failure: str | None = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> RecoveryLog:
        return cls(**d)


@dataclass
class EpisodeRecord:
    seed: int
    initial: dict
    plan: list[dict]
    schedule: dict
    config: dict
    steps: list[StepLog]
    recoveries: list[RecoveryLog]
    n_errors: int  # perturbation events that fired
    goal_reached: bool
    failure: str | None

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "initial": self.initial,
            "plan": self.plan,
            "schedule": self.schedule,
            "config": self.config,
            "steps": [s.to_dict() for s in self.steps],
            "recoveries": [r.to_dict() for r in self.recoveries],
            "n_errors": self.n_errors,
            "goal_reached": self.goal_reached,
            "failure": self.failure,
        }

    @classmethod
    def from_dict(cls, d: dict) -> EpisodeRecord:
        return cls(
            d["seed"], d["initial"], d["plan"], d["schedule"], d["config"],
            [StepLog.from_dict(s) for s in d["steps"]],
            [RecoveryLog.from_dict(r) for r in d["recoveries"]],
            d["n_errors"], d["goal_reached"], d["failure"],
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> EpisodeRecord:
        return cls.from_dict(json.loads(text))

    @property
    def detections(self) -> list[Detection]:
        return [s.detection for s in self.steps]

    def write_detection_log(self, path) -> None:
        write_detection_log(self.detections, path)


def nominal_trace(initial: WorldState, plan: Sequence[ActionInstance], planner: Planner, oracle: bool) -> NominalTrace:
    return ground_trace(initial, plan) if oracle else rollout(initial, plan, planner.models)


def run_episode(
    initial: WorldState,
    plan: Sequence[ActionInstance],
    schedule: ErrorSchedule,
    planner: Planner,
    cfg: EpisodeConfig = EpisodeConfig(),
    trace: NominalTrace | None = None,
    observer: Callable | None = None,
) -> EpisodeRecord:
    """Execute ``plan`` step by step; after each step the scheduled errors
    fire (once per nominal step), the detector compares the actual state with
    the imagined one and, on an error, a recovery plan is searched for and
    executed error-free before execution resumes from the latched step.

    ``observer(step, error_state, dag, result)`` is called after every
    recovery search; ``result`` is None when the search failed."""
    rcfg = cfg.recovery
    plan = list(plan)
    T = len(plan)
    trace = trace or nominal_trace(initial, plan, planner, rcfg.oracle)
    disc = OracleDiscriminator(rcfg.tol) if rcfg.oracle else planner.disc
    models = None if rcfg.oracle else planner.models
    rng = np.random.default_rng([schedule.seed, 1])
    tol = rcfg.tol

    state = initial
    k = 0
    fired: set[int] = set()
    executed: list[ActionInstance] = []
    steps: list[StepLog] = []
    recoveries: list[RecoveryLog] = []
    n_errors = 0
    failure = None

    def recover(step: int, det: Detection, truth: bool) -> str | None:
        nonlocal state, k
        if len(recoveries) >= cfg.max_recoveries:
            return "recovery_cap"
        error_state = state
        dag = build_dag(executed)
        try:
            res = search_recovery(state, trace, step, planner, rcfg, dag)
        except BudgetExceededError as err:
            if observer is not None:
                observer(step, error_state, dag, None)
            recoveries.append(RecoveryLog(
                step, truth, False, 0, -1, [], 0, err.nodes_expanded, err.nodes_generated,
                err.elapsed, [], error_state.to_dict(), "budget",
            ))
            return "budget"
        if observer is not None:
            observer(step, error_state, dag, res)
        try:
            for a in res.actions:
                state = apply_action(state, a)
                executed.append(a)
            ok = states_equal(state, trace.states[res.latch], tol)
        except PreconditionError:
            ok = False
        recoveries.append(RecoveryLog(
            step, truth, ok, res.length, res.latch, res.subgoal_indices, res.K,
            res.nodes_expanded, res.nodes_generated, res.wall_time,
            [a.to_dict() for a in res.actions], error_state.to_dict(), None if ok else "missed",
        ))
        k = res.latch
        return None if ok else "recovery_missed"

    while k < T:
        action = plan[k]
        if failed_precondition(state, action) is not None:
            # only reachable right after a tolerance-level recovery
            det = detect(k, trace.graphs[k], state, action, models, disc, rcfg.tau)
            steps.append(StepLog(det, True, 0))
            failure = recover(k, det, True)
            if failure:
                break
            continue
        state = apply_action(state, action)
        executed.append(action)
        step = k + 1
        cursor = step
        events = 0
        if step not in fired:
            fired.add(step)
            for event in schedule.at_step(step):
                helps = is_cooperative_help(event, state, plan[cursor:])
                try:
                    state = perturb(state, event, rng, action.moved, plan[cursor:])
                except NoFreeSpaceError:
                    continue
                if helps:
                    executed.append(plan[cursor])
                    cursor += 1
                events += 1
        n_errors += events
        next_action = plan[step] if step < T else None
        det = detect(step, trace.graphs[step], state, next_action, models, disc, rcfg.tau)
        truth = not states_equal(state, trace.states[step], tol) or (
            next_action is not None and failed_precondition(state, next_action) is not None
        )
        steps.append(StepLog(det, truth, events))
        if not det.is_error:
            k = step
            continue
        failure = recover(step, det, truth)
        if failure:
            break
    goal = failure is None and states_equal(state, trace.states[T], tol)
    return EpisodeRecord(
        schedule.seed, initial.to_dict(), [a.to_dict() for a in plan], schedule.to_dict(),
        rcfg.to_dict(), steps, recoveries, n_errors, goal, failure,
    )
