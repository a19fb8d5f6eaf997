"""Deterministic geometric blocks world.

Objects are axis-aligned boxes resting on a 1 x 1 table. Actions are applied
exactly; failures only ever enter through :mod:`scenerecover.injector`.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

import numpy as np

OVERLAP_EPS = 1e-9  # max intersection volume still counted as "touching"
CONTACT_EPS = 1e-7  # z-gap still counted as resting contact
ADJ_GAP = 0.005
EDGE_LENGTHS = (0.06, 0.08, 0.10)


class SimError(Exception):
    pass


class UnknownObjectError(SimError, KeyError):
    pass


class PreconditionError(SimError):
    def __init__(self, action: "ActionInstance", predicate: str):
        super().__init__(f"{action} violates precondition {predicate!r}")
        self.action = action
        self.predicate = predicate


class InvalidStateError(SimError):
    pass


class Color(str, enum.Enum):
    YELLOW = "Y"
    RED = "R"
    GREEN = "G"
    BLUE = "B"
    CYAN = "C"
    WHITE = "W"
    MAGENTA = "M"


class Kind(str, enum.Enum):
    CUBE = "cube"
    DICE = "dice"
    LEGO = "lego"


class Verb(str, enum.Enum):
    MOVE_TOP = "MoveTop"
    MOVE_LEFT = "MoveLeft"
    MOVE_RIGHT = "MoveRight"
    MOVE_TO_POSE = "MoveToPose"


COLORS = list(Color)
KINDS = list(Kind)
VERBS = list(Verb)


@dataclass(frozen=True)
class Bbox:
    center: tuple[float, float, float]
    extents: tuple[float, float, float]

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "extents", tuple(float(e) for e in self.extents))

    @property
    def lo(self) -> np.ndarray:
        return np.subtract(self.center, self.extents)

    @property
    def hi(self) -> np.ndarray:
        return np.add(self.center, self.extents)

    @property
    def bottom(self) -> float:
        return self.center[2] - self.extents[2]

    @property
    def top(self) -> float:
        return self.center[2] + self.extents[2]

    def overlap_volume(self, other: Bbox) -> float:
        vol = 1.0
        for c1, e1, c2, e2 in zip(self.center, self.extents, other.center, other.extents):
            d = min(c1 + e1, c2 + e2) - max(c1 - e1, c2 - e2)
            if d <= 0.0:
                return 0.0
            vol *= d
        return vol

    def moved_to(self, center) -> Bbox:
        return Bbox(tuple(center), self.extents)

    def to_dict(self) -> dict:
        return {"center": list(self.center), "extents": list(self.extents)}

    @classmethod
    def from_dict(cls, d: dict) -> Bbox:
        return cls(tuple(d["center"]), tuple(d["extents"]))


@dataclass(frozen=True)
class ObjectSpec:
    id: int
    color: Color
    kind: Kind
    size: tuple[float, float, float]

    def __post_init__(self):
        if any(s <= 0 for s in self.size):
            raise ValueError(f"object {self.id}: edge lengths must be positive")
        object.__setattr__(self, "size", tuple(float(s) for s in self.size))

    @property
    def half(self) -> tuple[float, float, float]:
        return tuple(s / 2.0 for s in self.size)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "color": self.color.value,
            "kind": self.kind.value,
            "size": list(self.size),
        }


@dataclass(frozen=True)
class Workspace:
    xmin: float = 0.0
    ymin: float = 0.0
    xmax: float = 1.0
    ymax: float = 1.0
    height: float = 0.5

    def contains(self, box: Bbox, eps: float = 1e-9) -> bool:
        (cx, cy, cz), (ex, ey, ez) = box.center, box.extents
        return (
            cx - ex >= self.xmin - eps
            and cy - ey >= self.ymin - eps
            and cz - ez >= -eps
            and cx + ex <= self.xmax + eps
            and cy + ey <= self.ymax + eps
            and cz + ez <= self.height + eps
        )

    def to_dict(self) -> dict:
        return {
            "xmin": self.xmin,
            "ymin": self.ymin,
            "xmax": self.xmax,
            "ymax": self.ymax,
            "height": self.height,
        }


class Relation(NamedTuple):
    pred: str  # "Top" | "Left" | "Right"
    a: int
    b: int

    def __str__(self):
        return f"{self.pred}({self.a},{self.b})"


def Top(a: int, b: int) -> Relation:
    return Relation("Top", a, b)


def Left(a: int, b: int) -> Relation:
    return Relation("Left", a, b)


def Right(a: int, b: int) -> Relation:
    return Relation("Right", a, b)


@dataclass(frozen=True)
class ActionInstance:
    verb: Verb
    args: tuple[int, ...]
    target_bbox: Bbox | None = None

    def __post_init__(self):
        object.__setattr__(self, "verb", Verb(self.verb))
        object.__setattr__(self, "args", tuple(int(a) for a in self.args))
        if self.verb is Verb.MOVE_TO_POSE:
            if len(self.args) != 1 or self.target_bbox is None:
                raise ValueError("MoveToPose takes one object and a target bbox")
        elif len(self.args) != 2 or self.target_bbox is not None:
            raise ValueError(f"{self.verb.value} takes exactly two objects")

    @property
    def moved(self) -> int:
        return self.args[0]

    @property
    def target(self) -> int | None:
        return self.args[1] if len(self.args) > 1 else None

    def __str__(self):
        if self.verb is Verb.MOVE_TO_POSE:
            c = ", ".join(f"{v:.3f}" for v in self.target_bbox.center)
            return f"MoveToPose({self.args[0]}, [{c}])"
        return f"{self.verb.value}({self.args[0]},{self.args[1]})"

    def to_dict(self) -> dict:
        d = {"verb": self.verb.value, "args": list(self.args)}
        if self.target_bbox is not None:
            d["target_bbox"] = self.target_bbox.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ActionInstance:
        tb = d.get("target_bbox")
        return cls(Verb(d["verb"]), tuple(d["args"]), Bbox.from_dict(tb) if tb else None)


def move_top(a, b):
    return ActionInstance(Verb.MOVE_TOP, (a, b))


def move_left(a, b):
    return ActionInstance(Verb.MOVE_LEFT, (a, b))


def move_right(a, b):
    return ActionInstance(Verb.MOVE_RIGHT, (a, b))


def move_to_pose(a, bbox: Bbox):
    return ActionInstance(Verb.MOVE_TO_POSE, (a,), bbox)


@dataclass(frozen=True)
class WorldState:
    objects: tuple[tuple[ObjectSpec, Bbox], ...]
    workspace: Workspace = Workspace()
    _index: dict = field(init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        objects = tuple((spec, box) for spec, box in self.objects)
        object.__setattr__(self, "objects", objects)
        index = {}
        for spec, box in objects:
            if spec.id in index:
                raise InvalidStateError(f"duplicate object id {spec.id}")
            index[spec.id] = (spec, box)
        object.__setattr__(self, "_index", index)

    @property
    def ids(self) -> list[int]:
        return sorted(self._index)

    def __len__(self):
        return len(self.objects)

    def __contains__(self, obj_id) -> bool:
        return obj_id in self._index

    def spec(self, obj_id: int) -> ObjectSpec:
        try:
            return self._index[obj_id][0]
        except KeyError:
            raise UnknownObjectError(obj_id) from None

    def bbox(self, obj_id: int) -> Bbox:
        try:
            return self._index[obj_id][1]
        except KeyError:
            raise UnknownObjectError(obj_id) from None

    def with_bbox(self, obj_id: int, box: Bbox) -> WorldState:
        self.spec(obj_id)
        objs = tuple((s, box if s.id == obj_id else b) for s, b in self.objects)
        return WorldState(objs, self.workspace)

    def with_bboxes(self, boxes: dict[int, Bbox]) -> WorldState:
        objs = tuple((s, boxes.get(s.id, b)) for s, b in self.objects)
        return WorldState(objs, self.workspace)

    def key(self) -> tuple:
        """Hashable pose signature, independent of storage order (centers
        rounded so float noise from different move orders collapses)."""
        return tuple((i, tuple(round(c, 9) for c in self._index[i][1].center)) for i in self.ids)

    def centers(self) -> np.ndarray:
        return np.array([self._index[i][1].center for i in self.ids])

    def to_dict(self) -> dict:
        return {
            "workspace": self.workspace.to_dict(),
            "objects": [
                {**spec.to_dict(), "bbox": box.to_dict()} for spec, box in self.objects
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> WorldState:
        objs = []
        for o in d["objects"]:
            spec = ObjectSpec(o["id"], Color(o["color"]), Kind(o["kind"]), tuple(o["size"]))
            objs.append((spec, Bbox.from_dict(o["bbox"])))
        return cls(tuple(objs), Workspace(**d["workspace"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, s: str) -> WorldState:
        return cls.from_dict(json.loads(s))


# --- geometric predicates -------------------------------------------------


def rests_on(a: Bbox, b: Bbox) -> bool:
    """True if ``a`` is supported by ``b``: touching b's top with its footprint
    center inside b's footprint."""
    return (
        abs(a.bottom - b.top) <= CONTACT_EPS
        and abs(a.center[0] - b.center[0]) <= b.extents[0] + 1e-12
        and abs(a.center[1] - b.center[1]) <= b.extents[1] + 1e-12
    )


def on_table(box: Bbox) -> bool:
    return abs(box.bottom) <= CONTACT_EPS


def is_clear(state: WorldState, obj_id: int) -> bool:
    box = state.bbox(obj_id)
    return not any(
        rests_on(other, box) for spec, other in state.objects if spec.id != obj_id
    )


def supporter(state: WorldState, obj_id: int) -> int | None:
    box = state.bbox(obj_id)
    for spec, other in state.objects:
        if spec.id != obj_id and rests_on(box, other):
            return spec.id
    return None


def stack_of(state: WorldState, obj_id: int) -> list[int]:
    """Bottom-to-top ids of the stack containing ``obj_id``."""
    base = obj_id
    while (below := supporter(state, base)) is not None:
        base = below
    stack = [base]
    while True:
        above = [
            s.id for s, b in state.objects if s.id != stack[-1] and rests_on(b, state.bbox(stack[-1]))
        ]
        if not above:
            return stack
        stack.append(min(above))


def collides(state: WorldState, box: Bbox, ignore: Iterable[int] = ()) -> bool:
    ignore = set(ignore)
    return any(
        box.overlap_volume(other) > OVERLAP_EPS
        for spec, other in state.objects
        if spec.id not in ignore
    )


def _lateral_box(state: WorldState, action: ActionInstance) -> Bbox:
    a, b = state.bbox(action.args[0]), state.bbox(action.args[1])
    sign = -1.0 if action.verb is Verb.MOVE_LEFT else 1.0
    x = b.center[0] + sign * (b.extents[0] + a.extents[0])
    return Bbox((x, b.center[1], a.extents[2]), a.extents)


def destination(state: WorldState, action: ActionInstance) -> Bbox:
    """Where ``action`` would put its moved object (no admissibility check)."""
    a = state.bbox(action.moved)
    if action.verb is Verb.MOVE_TOP:
        b = state.bbox(action.target)
        return Bbox((b.center[0], b.center[1], b.top + a.extents[2]), a.extents)
    if action.verb in (Verb.MOVE_LEFT, Verb.MOVE_RIGHT):
        return _lateral_box(state, action)
    return action.target_bbox


def failed_precondition(state: WorldState, action: ActionInstance) -> str | None:
    """Name of the first violated precondition, or None if the action applies."""
    for obj in action.args:
        state.spec(obj)
    if len(set(action.args)) != len(action.args):
        return "distinct_args"
    moved = action.moved
    if not is_clear(state, moved):
        return "moved_clear"
    if action.verb is Verb.MOVE_TOP:
        if not is_clear(state, action.target):
            return "target_clear"
    elif action.verb in (Verb.MOVE_LEFT, Verb.MOVE_RIGHT):
        if not on_table(state.bbox(action.target)):
            return "target_on_table"
    else:
        if not np.allclose(action.target_bbox.extents, state.bbox(moved).extents, atol=1e-9):
            return "pose_extents"
    dest = destination(state, action)
    if not state.workspace.contains(dest):
        return "in_workspace"
    if collides(state, dest, ignore=(moved,)):
        return "collision_free"
    if action.verb is Verb.MOVE_TO_POSE and not on_table(dest):
        below = [
            s.id for s, b in state.objects if s.id != moved and rests_on(dest, b)
        ]
        if not below:
            return "supported"
    return None


def check_precondition(state: WorldState, action: ActionInstance) -> bool:
    return failed_precondition(state, action) is None


def apply_action(state: WorldState, action: ActionInstance) -> WorldState:
    failed = failed_precondition(state, action)
    if failed is not None:
        raise PreconditionError(action, failed)
    return state.with_bbox(action.moved, destination(state, action))


def eval_relations(state: WorldState) -> frozenset[Relation]:
    rels = set()
    items = [(s.id, b) for s, b in state.objects]
    for ia, a in items:
        for ib, b in items:
            if ia == ib:
                continue
            if rests_on(a, b):
                rels.add(Top(ia, ib))
            if on_table(a) and on_table(b):
                if abs(a.center[1] - b.center[1]) < a.extents[1] + b.extents[1]:
                    gap_left = (b.center[0] - b.extents[0]) - (a.center[0] + a.extents[0])
                    if -1e-9 <= gap_left <= ADJ_GAP:
                        rels.add(Left(ia, ib))
                    gap_right = (a.center[0] - a.extents[0]) - (b.center[0] + b.extents[0])
                    if -1e-9 <= gap_right <= ADJ_GAP:
                        rels.add(Right(ia, ib))
    return frozenset(rels)


def states_equal(s1: WorldState, s2: WorldState, tol: float = 1e-6) -> bool:
    if set(s1.ids) != set(s2.ids):
        raise SimError("states_equal needs identical object id sets")
    diff = np.abs(s1.centers() - s2.centers())
    if np.any(diff >= tol):
        return False
    return eval_relations(s1) == eval_relations(s2)


def misplaced(s1: WorldState, s2: WorldState, tol: float = 1e-6) -> list[int]:
    """Ids whose centers differ by at least ``tol`` on some axis."""
    diff = np.abs(s1.centers() - s2.centers()).max(axis=1)
    return [i for i, d in zip(s1.ids, diff) if d >= tol]


def state_violations(state: WorldState) -> list[str]:
    problems = []
    items = list(state.objects)
    for spec, box in items:
        if any(e <= 0 for e in box.extents):
            problems.append(f"{spec.id}: non-positive extents")
        if not state.workspace.contains(box):
            problems.append(f"{spec.id}: outside workspace")
    for i, (sa, a) in enumerate(items):
        for sb, b in items[i + 1:]:
            if a.overlap_volume(b) > OVERLAP_EPS:
                problems.append(f"{sa.id}/{sb.id}: overlap")
    for spec, box in items:
        if not on_table(box) and supporter(state, spec.id) is None:
            problems.append(f"{spec.id}: unsupported")
    return problems


def validate(state: WorldState) -> WorldState:
    problems = state_violations(state)
    if problems:
        raise InvalidStateError("; ".join(problems))
    return state


def is_valid(state: WorldState) -> bool:
    return not state_violations(state)


# --- table grid -----------------------------------------------------------

GRID_N = 40


def grid_centers(workspace: Workspace = Workspace(), n: int = GRID_N) -> np.ndarray:
    """(n*n, 2) cell centers, row-major over (ix, iy)."""
    xs = workspace.xmin + (np.arange(n) + 0.5) * (workspace.xmax - workspace.xmin) / n
    ys = workspace.ymin + (np.arange(n) + 0.5) * (workspace.ymax - workspace.ymin) / n
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def table_placement_mask(
    state: WorldState,
    obj_id: int,
    centers_xy: np.ndarray,
    reserved: Iterable[Bbox] = (),
) -> np.ndarray:
    """Boolean mask over candidate xy centers where ``obj_id`` can sit on the
    table without leaving the workspace or intersecting any other object (or
    any ``reserved`` box)."""
    ext = np.asarray(state.bbox(obj_id).extents)
    ws = state.workspace
    cx, cy = centers_xy[:, 0], centers_xy[:, 1]
    ok = (
        (cx - ext[0] >= ws.xmin - 1e-9)
        & (cx + ext[0] <= ws.xmax + 1e-9)
        & (cy - ext[1] >= ws.ymin - 1e-9)
        & (cy + ext[1] <= ws.ymax + 1e-9)
        & (2 * ext[2] <= ws.height + 1e-9)
    )
    obstacles = [b for s, b in state.objects if s.id != obj_id] + list(reserved)
    lo_z, hi_z = 0.0, 2 * ext[2]
    for b in obstacles:
        blo, bhi = b.lo, b.hi
        dz = min(hi_z, bhi[2]) - max(lo_z, blo[2])
        if dz <= 0:
            continue
        dx = np.minimum(cx + ext[0], bhi[0]) - np.maximum(cx - ext[0], blo[0])
        dy = np.minimum(cy + ext[1], bhi[1]) - np.maximum(cy - ext[1], blo[1])
        vol = np.clip(dx, 0, None) * np.clip(dy, 0, None) * dz
        ok &= vol <= OVERLAP_EPS
    return ok


def table_box(state: WorldState, obj_id: int, xy) -> Bbox:
    ext = state.bbox(obj_id).extents
    return Bbox((float(xy[0]), float(xy[1]), ext[2]), ext)
