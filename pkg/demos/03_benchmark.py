"""
Comparing planner variants on paired episodes
=============================================

Every variant sees the same episode stream, so differences come from the
planner alone. Oracle mode keeps this quick; pass a checkpoint directory
to run the learned models instead.
"""

import sys

from scenerecover.bench import report, run_suite
from scenerecover.pipeline import load_planner

planner = load_planner(sys.argv[1]) if len(sys.argv) > 1 else None
oracle = planner is None

rows = []
for kind in ("ours", "replan", "nofree"):
    res = run_suite("I", 20, kind, seed=0, planner=planner, oracle=oracle, max_expansions=300, budget_s=1e6)
    rows.append(res.row)
    print(f"{res.row.planner:10s} Rec {res.row.rec:5.1f}%  L/L_opt {res.row.l_per_opt:.3f}  nodes {res.row.nodes_per_recovery:.1f}")

paths = report(rows, "demo_report")
print(paths["report"].read_text())
