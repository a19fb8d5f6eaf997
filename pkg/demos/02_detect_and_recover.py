"""
Detecting an error and latching back onto the plan
===================================================

A helpful external agent performs two plan steps on the robot's behalf.
Last-intended recovery undoes the help; anytime recovery notices the
scene already matches a later plan state and continues from there.
Runs with the ground-truth discriminator, so no training is needed.
"""

import numpy as np

from scenerecover.corpus import plan_nominal, sample_task
from scenerecover.injector import ErrorClass, ErrorEvent, ErrorSchedule
from scenerecover.recovery import EpisodeConfig, Planner, RecoveryConfig, run_episode

task = sample_task(5, np.random.default_rng(0), plan_len=4)
plan = plan_nominal(task)
print("plan:")
for a in plan:
    print("  ", a)

help_ = ErrorEvent(ErrorClass.EXTERNAL_AGENT, 1, {"cooperative": True})
schedule = ErrorSchedule((help_, help_), seed=0)

for mode in ("last", "anytime"):
    cfg = EpisodeConfig(RecoveryConfig(mode=mode, oracle=True, free_space="oracle"))
    record = run_episode(task.initial, plan, schedule, Planner(), cfg)
    r = record.recoveries[0]
    print(f"\n{mode}: detected at step {r.step}, recovery of {r.length} actions latched at step {r.latch}")
    for a in r.actions:
        print("   ", a["verb"], a["args"])
    print("   goal reached:", record.goal_reached)
