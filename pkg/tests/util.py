"""Small builders shared by the tests."""

import numpy as np

from scenerecover.sim import Bbox, Color, Kind, ObjectSpec, WorldState


def cube(i, x, y, z=None, edge=0.06, color=Color.RED, kind=Kind.CUBE):
    h = edge / 2
    return ObjectSpec(i, color, kind, (edge, edge, edge)), Bbox((x, y, h if z is None else z), (h, h, h))


def scene(*objs) -> WorldState:
    return WorldState(tuple(objs))


def tower(ids, x, y, edge=0.06):
    """Bottom-up tower of equal cubes."""
    return [cube(i, x, y, edge / 2 + k * edge, edge) for k, i in enumerate(ids)]


def shifted(state: WorldState, obj: int, dx: float, dy: float = 0.0) -> WorldState:
    b = state.bbox(obj)
    return state.with_bbox(obj, Bbox((b.center[0] + dx, b.center[1] + dy, b.center[2]), b.extents))


def rng(seed=0):
    return np.random.default_rng(seed)
