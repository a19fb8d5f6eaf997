"""
Learning a scene-graph transition model from demonstrations
============================================================

Generate error-free demonstrations, train the scene-graph models and
check how well an imagined plan matches the simulator.
Pass a checkpoint directory as the first argument to skip training.
"""

import sys

import numpy as np

from scenerecover.corpus import generate_corpus, plan_nominal, sample_task
from scenerecover.pipeline import PipelineConfig, load_planner, save_planner, train_planner
from scenerecover.scenegraph import decode_node, rollout

# demonstrations: random tabletop scenes, random goals, scripted plans
corpus = generate_corpus(3000, np.random.default_rng(0))
print(len(corpus), "transitions; first action:", corpus[0].action)

if len(sys.argv) > 1:
    planner = load_planner(sys.argv[1])
else:
    planner, report = train_planner(PipelineConfig(), corpus)
    print("held-out transition metrics:", report.scene_metrics)
    print("discriminator held-out accuracy:", report.disc_heldout_accuracy)
    save_planner(planner, "checkpoints", report)

# imagine a fresh plan and compare decoded boxes with the simulator
task = sample_task(5, np.random.default_rng(42), plan_len=4)
plan = plan_nominal(task)
trace = rollout(task.initial, plan, planner.models)
for k, (graph, state) in enumerate(zip(trace.graphs, trace.states)):
    err = max(
        np.linalg.norm(np.subtract(decode_node(graph.node(i), planner.models)[1].center, state.bbox(i).center))
        for i in state.ids
    )
    print(f"step {k}: {len(graph)} nodes, {graph.n_edges} edges, worst decoded center error {err:.4f}")
