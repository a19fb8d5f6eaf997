"""Train, save and load the full set of learned components."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .corpus import Transition, generate_corpus, sample_scene
from .discriminator import DiscTrainConfig, LearnedDiscriminator, train_discriminator
from .recovery.freespace import FreeSpaceModel, FreeSpaceTrainConfig, train_freespace
from .recovery.search import Planner
from .scenegraph import ModelTrainConfig, SceneModels, evaluate_models, train_models

MANIFEST = "manifest.json"


class MissingCheckpointError(FileNotFoundError):
    pass


@dataclass
class PipelineConfig:
    n_transitions: int = 3000
    holdout: float = 0.1
    seed: int = 0
    scene: ModelTrainConfig = field(default_factory=ModelTrainConfig)
    disc: DiscTrainConfig = field(default_factory=DiscTrainConfig)
    freespace: FreeSpaceTrainConfig = field(default_factory=FreeSpaceTrainConfig)
    extra_scenes: int = 500  # crowded 6-10 object scenes for free-space training


@dataclass
class TrainingReport:
    scene_curve: list[float]
    disc_curve: list[float]
    freespace_curve: list[float]
    scene_metrics: dict
    disc_heldout_accuracy: float


def train_planner(cfg: PipelineConfig = PipelineConfig(), corpus: list[Transition] | None = None):
    """Scene-graph models first, then the discriminator on top of them, then
    the free-space model. Returns (Planner, TrainingReport)."""
    rng = np.random.default_rng(cfg.seed)
    corpus = corpus if corpus is not None else generate_corpus(cfg.n_transitions, rng)
    n_train = len(corpus) - int(round(cfg.holdout * len(corpus)))
    models, scene_curve = train_models(corpus[:n_train], cfg.scene)
    metrics = evaluate_models(models, corpus[n_train:]) if n_train < len(corpus) else {}
    disc_res = train_discriminator(corpus, models, cfg.disc)
    # own stream, so passing a prebuilt corpus gives the same free-space data
    scene_rng = np.random.default_rng([cfg.seed, 2])
    scenes = [t.before for t in corpus] + [
        sample_scene(int(scene_rng.integers(6, 11)), scene_rng) for _ in range(cfg.extra_scenes)
    ]
    fs, fs_curve = train_freespace(scenes, cfg.freespace)
    report = TrainingReport(scene_curve, disc_res.curve, fs_curve, metrics, disc_res.heldout_accuracy)
    return Planner(models, disc_res.disc, fs), report


def save_planner(planner: Planner, directory, report: TrainingReport | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    planner.models.save(directory)
    planner.disc.save(directory / "discriminator.json")
    planner.freespace.save(directory)
    manifest = {"components": ["scene", "discriminator", "freespace"]}
    if report is not None:
        manifest["report"] = asdict(report)
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")


def load_planner(directory) -> Planner:
    directory = Path(directory)
    if not (directory / MANIFEST).exists():
        raise MissingCheckpointError(f"no trained checkpoints in {directory}")
    return Planner(
        SceneModels.load(directory),
        LearnedDiscriminator.load(directory / "discriminator.json"),
        FreeSpaceModel.load(directory),
    )
