"""Command-line entry points."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

DEFAULT_MODELS = "checkpoints"


def _objects_range(text: str) -> tuple[int, int]:
    lo, _, hi = text.partition("..")
    return int(lo), int(hi or lo)


def cmd_gen_demos(args) -> int:
    from .corpus import generate_corpus, write_jsonl

    corpus = generate_corpus(args.n, np.random.default_rng(args.seed), _objects_range(args.objects))
    write_jsonl(corpus, args.out)
    print(f"wrote {len(corpus)} transitions to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .corpus import read_corpus
    from .pipeline import PipelineConfig, save_planner, train_planner

    cfg = PipelineConfig(seed=args.seed)
    corpus = read_corpus(args.corpus) if args.corpus else None
    if args.epochs is not None:
        cfg.scene.epochs = args.epochs
    planner, report = train_planner(cfg, corpus)
    save_planner(planner, args.out, report)
    print(json.dumps({"scene": report.scene_metrics, "disc_heldout_accuracy": report.disc_heldout_accuracy}, indent=1))
    return 0


def cmd_evaluate(args) -> int:
    from .corpus import read_corpus
    from .scenegraph import SceneModels, evaluate_models

    metrics = evaluate_models(SceneModels.load(args.models), read_corpus(args.corpus), args.tol)
    out = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["metric", "value"])
    for k in sorted(metrics):
        writer.writerow([k, metrics[k]])
    if args.out:
        out.close()
    return 0


def _planner(args):
    from .pipeline import load_planner
    from .recovery import Planner

    return Planner() if args.oracle else load_planner(args.models)


def cmd_run_episode(args) -> int:
    from .bench import make_episode
    from .recovery import EpisodeConfig, RecoveryConfig, run_episode

    ep = make_episode(args.dataset, args.seed)
    rcfg = RecoveryConfig(
        mode=args.mode, K_max=args.K, budget_s=args.budget, max_expansions=args.max_expansions,
        oracle=args.oracle, free_space="oracle" if args.oracle else "predict",
    )
    rec = run_episode(ep.task.initial, ep.plan, ep.schedule, _planner(args), EpisodeConfig(rcfg))
    text = rec.to_json()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        print(text)
    return 0


def cmd_bench(args) -> int:
    from .bench import DEFAULT_EPISODES, report, run_suite, write_episodes

    n = args.episodes if args.episodes is not None else DEFAULT_EPISODES[args.dataset]
    res = run_suite(
        args.dataset, n, args.planner, args.seed, planner=_planner(args), K=args.K, oracle=args.oracle,
        max_expansions=args.max_expansions, budget_s=args.budget,
    )
    out = Path(args.out)
    report([res.row], out)
    write_episodes(res.records, out / "episodes")
    print((out / "report.md").read_text(encoding="utf-8"))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scenerecover")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-demos", help="generate error-free demonstration transitions")
    g.add_argument("--n", type=int, default=3000)
    g.add_argument("--objects", default="3..5")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_demos)

    t = sub.add_parser("train", help="train scene-graph models, discriminator and free-space net")
    t.add_argument("--corpus", help="corpus.jsonl (default: generate 3000 transitions)")
    t.add_argument("--out", default=DEFAULT_MODELS)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--epochs", type=int, help="override scene-graph epochs")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="reconstruction metrics of the transition model")
    e.add_argument("--models", default=DEFAULT_MODELS)
    e.add_argument("--corpus", required=True)
    e.add_argument("--tol", type=float, default=0.02)
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    def planner_flags(sp):
        sp.add_argument("--dataset", choices=["I", "II", "III"], default="I")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--K", type=int, default=5)
        sp.add_argument("--budget", type=float, default=30.0)
        sp.add_argument("--max-expansions", type=int, default=500)
        sp.add_argument("--models", default=DEFAULT_MODELS)
        sp.add_argument("--oracle", action="store_true", help="ground-truth discriminator, no networks")

    r = sub.add_parser("run-episode", help="run one episode and print its record as JSON")
    planner_flags(r)
    r.add_argument("--mode", choices=["last", "anytime"], default="last")
    r.add_argument("--out")
    r.set_defaults(func=cmd_run_episode)

    b = sub.add_parser("bench", help="run a benchmark suite and write reports")
    planner_flags(b)
    b.add_argument("--planner", choices=["ours", "replan", "nofree", "anytime"], default="ours")
    b.add_argument("--episodes", type=int)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
