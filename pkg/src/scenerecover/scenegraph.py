"""Neural scene graphs: encoder, one-object transition predictor, decoders.

A scene graph is one embedding per object (ordered by object id); edge
embeddings are never stored, they are the ordered concatenation of two node
embeddings and are produced on demand.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .nn import Mlp, TrainConfig, check_finite, make_optimizer, minibatches, mse_loss
from .sim import (
    COLORS,
    KINDS,
    VERBS,
    ActionInstance,
    Bbox,
    ObjectSpec,
    UnknownObjectError,
    Verb,
    WorldState,
    apply_action,
)

EMBED_DIM = 16
HIDDEN = 64
ACTION_DIM = 8
FEATURE_DIM = 19
OBJ_DIM = 13  # color one-hot, kind one-hot, size
BOX_DIM = 6  # center, extents

# per-dimension loss weights: metric dimensions matter more than one-hots
FEATURE_WEIGHTS = np.array([1.0] * 10 + [10.0] * 3 + [30.0] * 6)


def object_feature(spec: ObjectSpec, box: Bbox) -> np.ndarray:
    f = np.zeros(FEATURE_DIM)
    f[COLORS.index(spec.color)] = 1.0
    f[7 + KINDS.index(spec.kind)] = 1.0
    f[10:13] = spec.size
    f[13:16] = box.center
    f[16:19] = box.extents
    return f


def state_features(state: WorldState) -> tuple[tuple[int, ...], np.ndarray]:
    ids = tuple(state.ids)
    return ids, np.stack([object_feature(state.spec(i), state.bbox(i)) for i in ids])


@dataclass(frozen=True)
class NodeEmbedding:
    obj_id: int
    vector: np.ndarray


@dataclass(frozen=True, eq=False)
class SceneGraph:
    ids: tuple[int, ...]
    embeddings: np.ndarray
    # ground-truth state this graph was produced for, when known; only the
    # oracle discriminator and scoring look at it
    grounding: WorldState | None = None

    def __len__(self):
        return len(self.ids)

    @property
    def nodes(self) -> list[NodeEmbedding]:
        return [NodeEmbedding(i, self.embeddings[k]) for k, i in enumerate(self.ids)]

    def index(self, obj_id: int) -> int:
        try:
            return self.ids.index(obj_id)
        except ValueError:
            raise UnknownObjectError(obj_id) from None

    def node(self, obj_id: int) -> np.ndarray:
        return self.embeddings[self.index(obj_id)]

    @property
    def n_edges(self) -> int:
        return len(self.ids) * (len(self.ids) - 1)

    def edge(self, a: int, b: int) -> np.ndarray:
        return np.concatenate([self.node(a), self.node(b)])

    def edges(self) -> Iterator[tuple[int, int, np.ndarray]]:
        for a in self.ids:
            for b in self.ids:
                if a != b:
                    yield a, b, self.edge(a, b)

    def with_node(self, obj_id: int, vector: np.ndarray, grounding=None) -> SceneGraph:
        emb = self.embeddings.copy()
        emb[self.index(obj_id)] = vector
        return SceneGraph(self.ids, emb, grounding)


@dataclass
class SceneModels:
    encoder: Mlp
    action_encoder: Mlp
    node_predictor: Mlp
    object_decoder: Mlp
    bbox_decoder: Mlp

    NAMES = ("encoder", "action_encoder", "node_predictor", "object_decoder", "bbox_decoder")

    @classmethod
    def create(cls, rng=None, d: int = EMBED_DIM, hidden: int = HIDDEN, scale: float = 1.0):
        rng = rng or np.random.default_rng(0)
        return cls(
            encoder=Mlp.create([FEATURE_DIM, hidden, hidden, d], "relu", rng, scale),
            action_encoder=Mlp.create([len(VERBS), ACTION_DIM], "relu", rng, scale),
            node_predictor=Mlp.create([ACTION_DIM + 2 * d, hidden, hidden, d], "relu", rng, scale),
            object_decoder=Mlp.create([d, hidden, hidden, OBJ_DIM], "relu", rng, scale),
            bbox_decoder=Mlp.create([d, hidden, hidden, BOX_DIM], "relu", rng, scale),
        )

    @property
    def nets(self) -> list[Mlp]:
        return [getattr(self, n) for n in self.NAMES]

    def params(self) -> list[np.ndarray]:
        return [p for net in self.nets for p in net.params()]

    def copy(self) -> SceneModels:
        return SceneModels(*[net.copy() for net in self.nets])

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name in self.NAMES:
            getattr(self, name).save(directory / f"{name}.json")

    @classmethod
    def load(cls, directory) -> SceneModels:
        directory = Path(directory)
        return cls(*[Mlp.load(directory / f"{n}.json") for n in cls.NAMES])


def _encoder(models) -> Mlp:
    return models.encoder if isinstance(models, SceneModels) else models


def encode_scene(state: WorldState, models) -> SceneGraph:
    ids, X = state_features(state)
    return SceneGraph(ids, _encoder(models).forward(X), state)


def action_onehot(action: ActionInstance) -> np.ndarray:
    v = np.zeros(len(VERBS))
    v[VERBS.index(action.verb)] = 1.0
    return v


def decode_features(Z: np.ndarray, models: SceneModels) -> np.ndarray:
    return np.concatenate([models.object_decoder(Z), models.bbox_decoder(Z)], axis=-1)


def decode_node(node, models: SceneModels) -> tuple[np.ndarray, Bbox]:
    vec = node.vector if isinstance(node, NodeEmbedding) else np.asarray(node)
    f = decode_features(vec, models)
    return f, Bbox(tuple(f[13:16]), tuple(np.abs(f[16:19]) + 1e-6))


def pose_feature(attr_feature: np.ndarray, box: Bbox) -> np.ndarray:
    """Attribute part of ``attr_feature`` (snapped to one-hots) placed at ``box``."""
    f = np.zeros(FEATURE_DIM)
    f[int(np.argmax(attr_feature[:7]))] = 1.0
    f[7 + int(np.argmax(attr_feature[7:10]))] = 1.0
    f[10:13] = 2.0 * np.asarray(box.extents)
    f[13:16] = box.center
    f[16:19] = box.extents
    return f


def _predictor_inputs(g: SceneGraph, actions: Sequence[ActionInstance], models: SceneModels):
    A = models.action_encoder(np.stack([action_onehot(a) for a in actions]))
    arg1 = np.stack([g.node(a.moved) for a in actions])
    arg2 = np.empty_like(arg1)
    pose_rows, pose_feats = [], []
    for k, a in enumerate(actions):
        if a.verb is Verb.MOVE_TO_POSE:
            pose_rows.append(k)
        else:
            arg2[k] = g.node(a.target)
    if pose_rows:
        attrs = models.object_decoder(arg1[pose_rows])
        pose_feats = [pose_feature(attr, actions[k].target_bbox) for attr, k in zip(attrs, pose_rows)]
        arg2[pose_rows] = models.encoder(np.stack(pose_feats))
    return np.concatenate([A, arg1, arg2], axis=1)


def predict_moved_nodes(g: SceneGraph, actions: Sequence[ActionInstance], models: SceneModels) -> np.ndarray:
    """Predicted new embedding of each action's moved object, batched."""
    if not actions:
        return np.zeros((0, g.embeddings.shape[1]))
    return models.node_predictor(_predictor_inputs(g, actions, models))


def predict_transition(g: SceneGraph, action: ActionInstance, models: SceneModels) -> SceneGraph:
    for obj in action.args:
        g.index(obj)
    node = predict_moved_nodes(g, [action], models)[0]
    return g.with_node(action.moved, node)


# --- nominal trace --------------------------------------------------------


@dataclass
class NominalTrace:
    plan: list[ActionInstance]
    states: list[WorldState]
    graphs: list[SceneGraph]

    def __len__(self):
        return len(self.states)

    @property
    def goal(self) -> WorldState:
        return self.states[-1]


def rollout(initial: WorldState, plan: Sequence[ActionInstance], models: SceneModels) -> NominalTrace:
    """Imagine the plan with the learned transition model, alongside the exact
    simulator states used for scoring."""
    states = [initial]
    graphs = [encode_scene(initial, models)]
    for action in plan:
        states.append(apply_action(states[-1], action))
        g = predict_transition(graphs[-1], action, models)
        graphs.append(replace(g, grounding=states[-1]))
    return NominalTrace(list(plan), states, graphs)


def ground_trace(initial: WorldState, plan: Sequence[ActionInstance]) -> NominalTrace:
    """Trace with placeholder embeddings, for oracle-mode components that only
    read the grounded states."""
    states = [initial]
    for action in plan:
        states.append(apply_action(states[-1], action))
    return NominalTrace(list(plan), states, [grounded_graph(s) for s in states])


def grounded_graph(state: WorldState) -> SceneGraph:
    return SceneGraph(tuple(state.ids), np.zeros((len(state), EMBED_DIM)), state)


# --- training -------------------------------------------------------------


@dataclass
class ModelTrainConfig(TrainConfig):
    epochs: int = 300
    lr: float = 2e-3
    optimizer: str = "adam"
    latent_weight: float = 1.0
    holdout: float = 0.1
    # MoveToPose rows whose start pose is resampled (the outcome ignores it)
    start_jitter: float = 0.5


@dataclass
class TransitionBatchData:
    """Corpus flattened into arrays once, so minibatches are pure indexing."""

    node_feats: np.ndarray  # all before-state nodes
    offsets: np.ndarray  # first node row of each transition
    moved_row: np.ndarray  # absolute row of the moved node
    target_row: np.ndarray  # absolute row of the second argument, -1 for poses
    verbs: np.ndarray  # (T, 4) one-hot
    pose_feats: np.ndarray  # (T, 19) moved object at target pose (zeros otherwise)
    after_feats: np.ndarray  # (T, 19) moved object after the action
    n_nodes: np.ndarray

    @classmethod
    def from_corpus(cls, corpus) -> TransitionBatchData:
        feats, offsets, moved, target, verbs, pose, after, counts = [], [], [], [], [], [], [], []
        row = 0
        for tr in corpus:
            ids, X = state_features(tr.before)
            feats.append(X)
            offsets.append(row)
            moved.append(row + ids.index(tr.action.moved))
            if tr.action.verb is Verb.MOVE_TO_POSE:
                target.append(-1)
                spec = tr.before.spec(tr.action.moved)
                pose.append(object_feature(spec, tr.action.target_bbox))
            else:
                target.append(row + ids.index(tr.action.target))
                pose.append(np.zeros(FEATURE_DIM))
            verbs.append(action_onehot(tr.action))
            after.append(object_feature(tr.after.spec(tr.action.moved), tr.after.bbox(tr.action.moved)))
            counts.append(len(ids))
            row += len(ids)
        return cls(
            np.concatenate(feats), np.array(offsets), np.array(moved), np.array(target),
            np.stack(verbs), np.stack(pose), np.stack(after), np.array(counts),
        )

    def __len__(self):
        return len(self.offsets)

    def select(self, idx: np.ndarray):
        rows = np.concatenate([np.arange(o, o + n) for o, n in zip(self.offsets[idx], self.n_nodes[idx])])
        remap = np.full(len(self.node_feats), -1)
        remap[rows] = np.arange(len(rows))
        target = self.target_row[idx]
        return {
            "nodes": self.node_feats[rows],
            "moved": remap[self.moved_row[idx]],
            "target": np.where(target >= 0, remap[np.maximum(target, 0)], -1),
            "verbs": self.verbs[idx],
            "pose": self.pose_feats[idx],
            "after": self.after_feats[idx],
        }


def composite_loss(models: SceneModels, batch: dict, latent_weight: float = 1.0):
    """Joint loss and gradients (in ``models.params()`` order).

    prediction: decoded predicted moved node vs. the gold after-state feature;
    reconstruction: decode(encode(x)) vs. x for every before-state node;
    latent: predicted moved node vs. the encoding of the after-state feature.
    """
    E, A, P, Do, Db = models.nets
    nodes, moved, target = batch["nodes"], batch["moved"], batch["target"]
    B, N = len(moved), len(nodes)
    is_pose = target < 0
    pose_idx = np.flatnonzero(is_pose)
    n_pose = len(pose_idx)

    enc_in = np.concatenate([nodes, batch["pose"][pose_idx], batch["after"]])
    Z, cE = E.forward(enc_in, keep=True)
    Zb, Zt, Za = Z[:N], Z[N:N + n_pose], Z[N + n_pose:]

    H, cA = A.forward(batch["verbs"], keep=True)
    arg1 = Zb[moved]
    arg2 = np.empty_like(arg1)
    arg2[~is_pose] = Zb[target[~is_pose]]
    arg2[pose_idx] = Zt
    Zp, cP = P.forward(np.concatenate([H, arg1, arg2], axis=1), keep=True)

    dec_in = np.concatenate([Zp, Zb])
    Fo, cO = Do.forward(dec_in, keep=True)
    Fb, cB = Db.forward(dec_in, keep=True)
    F = np.concatenate([Fo, Fb], axis=1)
    goal = np.concatenate([batch["after"], nodes])
    w = FEATURE_WEIGHTS
    l_pred, g_pred = mse_loss(F[:B], goal[:B], w)
    l_rec, g_rec = mse_loss(F[B:], goal[B:], w)
    l_lat, g_lat = mse_loss(Zp, Za)
    loss = l_pred + l_rec + latent_weight * l_lat

    dF = np.concatenate([g_pred, g_rec])
    gO, d_in_o = Do.backward(cO, dF[:, :OBJ_DIM])
    gB, d_in_b = Db.backward(cB, dF[:, OBJ_DIM:])
    d_dec = d_in_o + d_in_b
    dZp = d_dec[:B] + latent_weight * g_lat
    gP, d_pin = P.backward(cP, dZp)
    gA, _ = A.backward(cA, d_pin[:, :ACTION_DIM])
    d = Z.shape[1]
    d_arg1 = d_pin[:, ACTION_DIM:ACTION_DIM + d]
    d_arg2 = d_pin[:, ACTION_DIM + d:]

    dZ = np.zeros_like(Z)
    dZ[:N] += d_dec[B:]
    np.add.at(dZ, moved, d_arg1)
    np.add.at(dZ, target[~is_pose], d_arg2[~is_pose])
    dZ[N:N + n_pose] += d_arg2[pose_idx]
    dZ[N + n_pose:] -= latent_weight * g_lat
    gE, _ = E.backward(cE, dZ)
    parts = {"prediction": l_pred, "reconstruction": l_rec, "latent": l_lat}
    return loss, gE + gA + gP + gO + gB, parts


def jitter_pose_starts(batch: dict, rng: np.random.Generator, fraction: float, max_lift: float = 0.3) -> dict:
    """Copy of ``batch`` where a ``fraction`` of MoveToPose rows get a
    random start center for the moved object (anywhere over the table,
    lifted by up to ``max_lift``)."""
    rows = batch["moved"][(batch["target"] < 0) & (rng.random(len(batch["moved"])) < fraction)]
    if fraction <= 0 or len(rows) == 0:
        return batch
    nodes = batch["nodes"].copy()
    half = nodes[rows, 16:19]
    xy = rng.uniform(half[:, :2], 1.0 - half[:, :2])
    z = half[:, 2] + rng.uniform(0.0, max_lift, size=len(rows))
    nodes[rows, 13:16] = np.column_stack([xy, z])
    return {**batch, "nodes": nodes}


def train_models(corpus, cfg: ModelTrainConfig = ModelTrainConfig(), models: SceneModels | None = None):
    """Jointly train encoder, transition predictor and decoders.

    Returns (models, per-epoch loss curve)."""
    if not corpus:
        raise ValueError("empty corpus")
    data = corpus if isinstance(corpus, TransitionBatchData) else TransitionBatchData.from_corpus(corpus)
    rng = np.random.default_rng(cfg.seed)
    models = (models or SceneModels.create(rng, scale=cfg.init_scale)).copy()
    opt = make_optimizer(cfg)
    params = models.params()
    curve = []
    for epoch in range(cfg.epochs):
        total = 0.0
        for idx in minibatches(len(data), cfg.batch_size, rng):
            batch = jitter_pose_starts(data.select(idx), rng, cfg.start_jitter)
            loss, grads, _ = composite_loss(models, batch, cfg.latent_weight)
            check_finite(loss, epoch)
            opt.step(params, grads)
            total += loss * len(idx)
        curve.append(total / len(data))
    return models, curve


def evaluate_models(models: SceneModels, corpus, tol: float = 0.02) -> dict:
    """Held-out reconstruction metrics for the transition model."""
    data = TransitionBatchData.from_corpus(corpus)
    batch = data.select(np.arange(len(data)))
    Zb = models.encoder(batch["nodes"])
    rec = decode_features(Zb, models)
    nodes = batch["nodes"]
    errs = []
    for tr in corpus:
        g = encode_scene(tr.before, models)
        node = predict_transition(g, tr.action, models).node(tr.moved_id)
        _, box = decode_node(node, models)
        errs.append(np.linalg.norm(np.subtract(box.center, tr.after.bbox(tr.moved_id).center)))
    errs = np.array(errs)
    return {
        "n": len(corpus),
        "moved_center_err_mean": float(errs.mean()),
        "moved_within_tol": float(np.mean(errs < tol)),
        "recon_center_err_mean": float(np.linalg.norm(rec[:, 13:16] - nodes[:, 13:16], axis=1).mean()),
        "recon_bbox_mse": float(np.mean((rec[:, 13:19] - nodes[:, 13:19]) ** 2)),
        "color_acc": float(np.mean(rec[:, :7].argmax(1) == nodes[:, :7].argmax(1))),
        "kind_acc": float(np.mean(rec[:, 7:10].argmax(1) == nodes[:, 7:10].argmax(1))),
    }
