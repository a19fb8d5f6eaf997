"""Pairwise node discriminator, graph similarity/discrepancy and error detection."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .nn import Mlp, TrainConfig, bce_loss, check_finite, make_optimizer, minibatches
from .scenegraph import (
    EMBED_DIM,
    NodeEmbedding,
    SceneGraph,
    SceneModels,
    encode_scene,
    grounded_graph,
    predict_transition,
)
from .sim import ActionInstance, WorldState, failed_precondition

TAU = 0.5


class GraphMismatchError(ValueError):
    pass


def _check_ids(z1: SceneGraph, z2: SceneGraph) -> None:
    if tuple(z1.ids) != tuple(z2.ids):
        raise GraphMismatchError(f"object ids differ: {z1.ids} vs {z2.ids}")


class Discriminator(Protocol):
    def scores(self, z1: SceneGraph, z2: SceneGraph) -> np.ndarray: ...

    def pair_scores(self, a: np.ndarray, b: np.ndarray) -> np.ndarray: ...


@dataclass
class LearnedDiscriminator:
    net: Mlp

    @classmethod
    def create(cls, rng=None, d: int = EMBED_DIM, hidden: int = 64) -> LearnedDiscriminator:
        return cls(Mlp.create([2 * d, hidden, hidden, 1], "relu", rng, out_activation="sigmoid"))

    def pair_scores(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Scores for row-aligned node batches; input is ``a ++ b``."""
        return self.net(np.concatenate([np.atleast_2d(a), np.atleast_2d(b)], axis=1))[:, 0]

    def scores(self, z1: SceneGraph, z2: SceneGraph) -> np.ndarray:
        _check_ids(z1, z2)
        return self.pair_scores(z1.embeddings, z2.embeddings)

    def save(self, path) -> None:
        self.net.save(path)

    @classmethod
    def load(cls, path) -> LearnedDiscriminator:
        return cls(Mlp.load(path))


@dataclass
class OracleDiscriminator:
    """Bbox-equality test on the ground-truth states attached to the graphs."""

    tol: float = 1e-6

    def _boxes(self, z: SceneGraph) -> np.ndarray:
        if z.grounding is None:
            raise ValueError("oracle discriminator needs grounded scene graphs")
        return np.array([z.grounding.bbox(i).center + z.grounding.bbox(i).extents for i in z.ids])

    def scores(self, z1: SceneGraph, z2: SceneGraph) -> np.ndarray:
        _check_ids(z1, z2)
        diff = np.abs(self._boxes(z1) - self._boxes(z2)).max(axis=1)
        return (diff < self.tol).astype(float)

    def pair_scores(self, a, b):
        raise TypeError("the oracle compares grounded graphs, not raw embeddings")


@dataclass(frozen=True)
class NodePairScore:
    pair: tuple[int, int]
    score: float


def node_score(a, b, disc: LearnedDiscriminator) -> float:
    va = a.vector if isinstance(a, NodeEmbedding) else a
    vb = b.vector if isinstance(b, NodeEmbedding) else b
    return float(disc.pair_scores(va, vb)[0])


def node_pair_scores(z1: SceneGraph, z2: SceneGraph, disc) -> list[NodePairScore]:
    return [NodePairScore((i, i), float(s)) for i, s in zip(z1.ids, disc.scores(z1, z2))]


def graph_similarity(z1: SceneGraph, z2: SceneGraph, disc) -> float:
    return float(np.prod(disc.scores(z1, z2)))


def similar_mask(z1: SceneGraph, z2: SceneGraph, disc, tau: float = TAU) -> np.ndarray:
    return disc.scores(z1, z2) >= tau


def discrepancy(z1: SceneGraph, z2: SceneGraph, disc, tau: float = TAU) -> int:
    return int(len(z1.ids) - similar_mask(z1, z2, disc, tau).sum())


def localize(z_pred: SceneGraph, z_actual: SceneGraph, disc, tau: float = TAU) -> frozenset[int]:
    ok = similar_mask(z_pred, z_actual, disc, tau)
    return frozenset(i for i, good in zip(z_pred.ids, ok) if not good)


# --- training -------------------------------------------------------------


def discriminator_labels(n: int, moved_index: int) -> np.ndarray:
    """(n, n) labels for pairs (before node i, after node j)."""
    labels = np.eye(n)
    labels[moved_index, moved_index] = 0.0
    return labels


@dataclass
class DiscTrainConfig(TrainConfig):
    epochs: int = 40
    lr: float = 1e-3
    optimizer: str = "adam"
    batch_size: int = 64
    holdout: float = 0.1
    # extra positives: (predicted moved node, encoded after node), so the
    # transition model's own prediction error is not read as a discrepancy
    augment_predicted: bool = True


def pair_dataset(corpus, models: SceneModels, augment_predicted: bool = False):
    """Inputs (before ++ after node), labels and the owning transition index.
    Augmented rows carry group -1 - t so callers can tell them apart."""
    X, Y, groups = [], [], []
    for t, tr in enumerate(corpus):
        z = encode_scene(tr.before, models)
        zt = encode_scene(tr.after, models)
        n = len(z.ids)
        m = z.index(tr.moved_id)
        ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        X.append(np.concatenate([z.embeddings[ii.ravel()], zt.embeddings[jj.ravel()]], axis=1))
        Y.append(discriminator_labels(n, m).ravel())
        groups.append(np.full(n * n, t))
        if augment_predicted:
            pred = predict_transition(z, tr.action, models).node(tr.moved_id)
            X.append(np.concatenate([pred, zt.embeddings[m]])[None, :])
            Y.append(np.ones(1))
            groups.append(np.full(1, -1 - t))
    return np.concatenate(X), np.concatenate(Y), np.concatenate(groups)


@dataclass
class DiscTrainResult:
    disc: LearnedDiscriminator
    curve: list[float]
    heldout_accuracy: float
    heldout_pairs: int


def _split(n_transitions: int, holdout: float, rng) -> np.ndarray:
    order = rng.permutation(n_transitions)
    return np.sort(order[: int(round(holdout * n_transitions))])


def train_discriminator(corpus, models: SceneModels, cfg: DiscTrainConfig = DiscTrainConfig()) -> DiscTrainResult:
    """Self-supervised BCE training; held-out split is by transition and the
    held-out accuracy is measured on the plain (unaugmented) labels."""
    if not corpus:
        raise ValueError("empty corpus")
    rng = np.random.default_rng(cfg.seed)
    X, Y, groups = pair_dataset(corpus, models, cfg.augment_predicted)
    held = np.zeros(len(corpus), dtype=bool)
    held[_split(len(corpus), cfg.holdout, rng)] = True
    owner = np.where(groups >= 0, groups, -1 - groups)
    test = held[owner] & (groups >= 0)
    train = ~held[owner]
    Xtr, Ytr = X[train], Y[train][:, None]
    disc = LearnedDiscriminator.create(rng)
    opt = make_optimizer(cfg)
    params = disc.net.params()
    curve = []
    for epoch in range(cfg.epochs):
        total = 0.0
        for idx in minibatches(len(Xtr), cfg.batch_size, rng):
            out, cache = disc.net.forward(Xtr[idx], keep=True)
            loss, grad = bce_loss(out, Ytr[idx])
            check_finite(loss, epoch)
            grads, _ = disc.net.backward(cache, grad)
            opt.step(params, grads)
            total += loss * len(idx)
        curve.append(total / max(len(Xtr), 1))
    acc = float(np.mean((disc.net(X[test])[:, 0] >= TAU) == (Y[test] == 1))) if test.any() else float("nan")
    return DiscTrainResult(disc, curve, acc, int(test.sum()))


# --- detection ------------------------------------------------------------


@dataclass(frozen=True)
class Detection:
    step: int
    is_error: bool
    erroneous_ids: frozenset[int]
    similarity: float
    discrepancy: int
    failed_precondition: str | None = None

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "is_error": self.is_error,
            "erroneous_ids": sorted(self.erroneous_ids),
            "similarity": self.similarity,
            "discrepancy": self.discrepancy,
            "failed_precondition": self.failed_precondition,
        }

    @classmethod
    def from_dict(cls, d: dict) -> Detection:
        return cls(
            int(d["step"]), bool(d["is_error"]), frozenset(d["erroneous_ids"]),
            float(d["similarity"]), int(d["discrepancy"]), d.get("failed_precondition"),
        )


def detect(
    step: int,
    z_pred: SceneGraph,
    actual: WorldState,
    next_action: ActionInstance | None,
    models: SceneModels | None,
    disc,
    tau: float = TAU,
) -> Detection:
    """``models`` may be None when ``disc`` is the oracle (graphs are then
    only carriers of their grounded states)."""
    z_actual = grounded_graph(actual) if models is None else encode_scene(actual, models)
    scores = disc.scores(z_pred, z_actual)
    bad = frozenset(i for i, s in zip(z_pred.ids, scores) if s < tau)
    failed = failed_precondition(actual, next_action) if next_action is not None else None
    return Detection(step, bool(bad) or failed is not None, bad, float(np.prod(scores)), len(bad), failed)


def write_detection_log(detections: Sequence[Detection], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for det in detections:
            fh.write(json.dumps(det.to_dict(), sort_keys=True) + "\n")


def match_objects(z1: SceneGraph, z2: SceneGraph) -> tuple[dict[int, int], float]:
    """Diagnostic only: recover object correspondence from embeddings alone
    (min-cost assignment on Euclidean distance). Returns mapping and the
    fraction matched to the right id."""
    from scipy.optimize import linear_sum_assignment

    cost = np.linalg.norm(z1.embeddings[:, None, :] - z2.embeddings[None, :, :], axis=2)
    rows, cols = linear_sum_assignment(cost)
    mapping = {z1.ids[r]: z2.ids[c] for r, c in zip(rows, cols)}
    return mapping, float(np.mean([a == b for a, b in mapping.items()]))
