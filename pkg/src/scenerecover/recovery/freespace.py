"""Free-space placement: a set-conditioned regressor plus the grid oracle.

The regressor sees the object to move, a desired table point and every
obstacle footprint (sum-pooled per-obstacle encodings, so obstacle order does
not matter) and predicts a table center that avoids all of them.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ..nn import Mlp, TrainConfig, check_finite, make_optimizer, minibatches
from ..sim import Bbox, SimError, WorldState, grid_centers, is_clear, table_box, table_placement_mask

MAX_OBSTACLES = 16
POOL_WIDTH = 32
OVERLAP_WEIGHT = 50.0
BOUNDS_WEIGHT = 1000.0
MARGIN = 0.02  # obstacles and walls are inflated by this much in the training loss


class NoFreeCellError(SimError):
    pass


@dataclass
class FreeSpaceModel:
    obstacle_net: Mlp  # (dx, dy, obstacle half-x, half-y, own half-x, half-y) -> code
    head: Mlp  # pooled code ++ (query x, y, own half-x, half-y) -> center offset

    @classmethod
    def create(cls, rng=None, hidden: int = 64) -> FreeSpaceModel:
        rng = rng or np.random.default_rng(0)
        return cls(
            Mlp.create([6, POOL_WIDTH, POOL_WIDTH], "relu", rng, out_activation="relu"),
            Mlp.create([POOL_WIDTH + 4, hidden, hidden, 2], "relu", rng),
        )

    def params(self) -> list[np.ndarray]:
        return self.obstacle_net.params() + self.head.params()

    def copy(self) -> FreeSpaceModel:
        return FreeSpaceModel(self.obstacle_net.copy(), self.head.copy())

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.obstacle_net.save(directory / "freespace_obstacle.json")
        self.head.save(directory / "freespace_head.json")

    @classmethod
    def load(cls, directory) -> FreeSpaceModel:
        directory = Path(directory)
        return cls(Mlp.load(directory / "freespace_obstacle.json"), Mlp.load(directory / "freespace_head.json"))

    def _forward(self, batch, keep=False):
        query, obs, mask = batch["query"], batch["obstacles"], batch["mask"]
        B, J, _ = obs.shape
        rel = np.concatenate(
            [obs[:, :, :2] - query[:, None, :2], obs[:, :, 2:4], np.repeat(query[:, None, 2:4], J, axis=1)],
            axis=2,
        ).reshape(B * J, 6)
        codes, c_obs = self.obstacle_net.forward(rel, keep=True)
        pooled = (codes.reshape(B, J, -1) * mask[:, :, None]).sum(axis=1)
        delta, c_head = self.head.forward(np.concatenate([pooled, query], axis=1), keep=True)
        center = query[:, :2] + delta
        return (center, (c_obs, c_head, B, J)) if keep else center

    def predict(self, batch) -> np.ndarray:
        return self._forward(batch)


def pack_queries(queries: Sequence[tuple[np.ndarray, np.ndarray]]) -> dict:
    """queries: (query row (x, y, half-x, half-y), obstacle rows (cx, cy, hx, hy))."""
    B = len(queries)
    J = max(MAX_OBSTACLES, max((len(o) for _, o in queries), default=0))
    obs = np.zeros((B, J, 4))
    mask = np.zeros((B, J))
    for b, (_, o) in enumerate(queries):
        obs[b, : len(o)] = o
        mask[b, : len(o)] = 1.0
    return {"query": np.stack([q for q, _ in queries]), "obstacles": obs, "mask": mask}


def _slice(batch: dict, idx) -> dict:
    return {k: v[idx] for k, v in batch.items()}


def freespace_loss(model: FreeSpaceModel, batch: dict, ws=(0.0, 0.0, 1.0, 1.0)):
    """Mean over queries of |center - query|^2 + overlap-area and bounds
    penalties. Returns (loss, grads in ``model.params()`` order)."""
    center, (c_obs, c_head, B, J) = model._forward(batch, keep=True)
    query, obs, mask = batch["query"], batch["obstacles"], batch["mask"]
    half = query[:, 2:4]
    delta = center - query[:, :2]
    loss = np.sum(delta**2, axis=1)
    d_center = 2.0 * delta

    gap = center[:, None, :] - obs[:, :, :2]
    overlap = np.maximum(half[:, None, :] + obs[:, :, 2:4] + MARGIN - np.abs(gap), 0.0)
    area = overlap[:, :, 0] * overlap[:, :, 1] * mask
    loss = loss + OVERLAP_WEIGHT * area.sum(axis=1)
    d_overlap = -np.sign(gap) * (overlap > 0)
    d_area = np.stack([overlap[:, :, 1], overlap[:, :, 0]], axis=2) * d_overlap * mask[:, :, None]
    d_center += OVERLAP_WEIGHT * d_area.sum(axis=1)

    lo = np.array(ws[:2])
    hi = np.array(ws[2:])
    below = np.maximum(lo + half + MARGIN - center, 0.0)
    above = np.maximum(center + half + MARGIN - hi, 0.0)
    loss = loss + BOUNDS_WEIGHT * np.sum(below**2 + above**2, axis=1)
    d_center += BOUNDS_WEIGHT * (-2.0 * below + 2.0 * above)

    d_center /= B
    g_head, d_head_in = model.head.backward(c_head, d_center)
    d_pooled = d_head_in[:, :POOL_WIDTH]
    d_codes = (d_pooled[:, None, :] * mask[:, :, None]).reshape(B * J, -1)
    g_obs, _ = model.obstacle_net.backward(c_obs, d_codes)
    return float(loss.mean()), g_obs + g_head


# --- queries --------------------------------------------------------------


def _footprint(box: Bbox) -> np.ndarray:
    return np.array([box.center[0], box.center[1], box.extents[0], box.extents[1]])


def make_query(state: WorldState, move_id: int, desired_xy, reserved: Sequence[Bbox] = ()):
    ext = state.bbox(move_id).extents
    query = np.array([desired_xy[0], desired_xy[1], ext[0], ext[1]])
    boxes = [b for s, b in state.objects if s.id != move_id] + list(reserved)
    return query, np.array([_footprint(b) for b in boxes]).reshape(-1, 4)


def search_query_reserved(state: WorldState, move_id: int, extra: Sequence[Bbox] = ()) -> list[Bbox]:
    """Reserved boxes used when searching for a place to park ``move_id``:
    its own current footprint (so the move is never a no-op) plus ``extra``."""
    return [state.bbox(move_id)] + list(extra)


def sample_queries(states: Sequence[WorldState], n: int, rng: np.random.Generator):
    """Training queries: half with a random desired point, half shaped like
    search-time parking queries (desired = current center, own footprint and a
    few random target boxes reserved)."""
    out = []
    while len(out) < n:
        state = states[int(rng.integers(len(states)))]
        clear = [i for i in state.ids if is_clear(state, i)]
        obj = clear[int(rng.integers(len(clear)))]
        if rng.random() < 0.5:
            desired = rng.uniform(0.0, 1.0, size=2)
            reserved = []
        else:
            desired = np.array(state.bbox(obj).center[:2])
            extra = [
                Bbox((*rng.uniform(0.05, 0.95, size=2), 0.05), tuple(rng.choice([0.03, 0.04, 0.05], size=3)))
                for _ in range(int(rng.integers(0, 3)))
            ]
            reserved = search_query_reserved(state, obj, extra)
        out.append(make_query(state, obj, desired, reserved))
    return out


@dataclass
class FreeSpaceTrainConfig(TrainConfig):
    epochs: int = 100
    lr: float = 1e-3
    optimizer: str = "adam"
    batch_size: int = 64
    n_queries: int = 20000


def train_freespace(states: Sequence[WorldState], cfg: FreeSpaceTrainConfig = FreeSpaceTrainConfig(), queries=None):
    """Self-supervised training on random scene queries.
    Returns (model, per-epoch loss curve)."""
    rng = np.random.default_rng(cfg.seed)
    if queries is None:
        if not states:
            raise ValueError("no scenes to train on")
        queries = sample_queries(states, cfg.n_queries, rng)
    data = pack_queries(queries)
    model = FreeSpaceModel.create(rng)
    opt = make_optimizer(cfg)
    params = model.params()
    curve = []
    for epoch in range(cfg.epochs):
        total = 0.0
        for idx in minibatches(len(queries), cfg.batch_size, rng):
            loss, grads = freespace_loss(model, _slice(data, idx))
            check_finite(loss, epoch)
            opt.step(params, grads)
            total += loss * len(idx)
        curve.append(total / len(queries))
    return model, curve


# --- prediction and oracle -------------------------------------------------


def free_pose_oracle(
    state: WorldState, move_id: int, reserved: Sequence[Bbox] = (), near=None
) -> Bbox:
    """Nearest collision-free 40x40 grid cell to ``near`` (default: the
    object's current center)."""
    cells = grid_centers(state.workspace)
    ok = table_placement_mask(state, move_id, cells, reserved)
    if not ok.any():
        raise NoFreeCellError(f"no free table cell for object {move_id}")
    here = np.asarray(near if near is not None else state.bbox(move_id).center[:2], dtype=float)
    dist = np.where(ok, np.linalg.norm(cells - here, axis=1), np.inf)
    return table_box(state, move_id, cells[int(np.argmin(dist))])


def all_free_poses(state: WorldState, move_id: int, reserved: Sequence[Bbox] = ()) -> list[Bbox]:
    cells = grid_centers(state.workspace)
    ok = table_placement_mask(state, move_id, cells, reserved)
    return [table_box(state, move_id, xy) for xy in cells[ok]]


def predict_free_pose(
    state: WorldState,
    move_id: int,
    model: FreeSpaceModel,
    reserved: Sequence[Bbox] = (),
    desired=None,
    return_snapped: bool = False,
):
    """Table-level bbox for ``move_id`` avoiding every other object and every
    reserved box; a colliding prediction is snapped to the nearest free cell."""
    desired = state.bbox(move_id).center[:2] if desired is None else desired
    xy = model.predict(pack_queries([make_query(state, move_id, desired, reserved)]))[0]
    snapped = not table_placement_mask(state, move_id, xy[None, :], reserved)[0]
    box = free_pose_oracle(state, move_id, reserved, near=xy) if snapped else table_box(state, move_id, xy)
    return (box, snapped) if return_snapped else box


def no_snap_rate(model: FreeSpaceModel, cases) -> float:
    """Fraction of parking queries whose raw prediction is already free."""
    ok = 0
    for state, obj, reserved in cases:
        _, snapped = predict_free_pose(state, obj, model, reserved, return_snapped=True)
        ok += not snapped
    return ok / max(len(cases), 1)
