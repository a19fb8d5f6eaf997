"""Object precedence DAG built from the executed plan prefix."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import networkx as nx

from ..sim import ActionInstance, Verb

_DEPENDENT_VERBS = (Verb.MOVE_TOP, Verb.MOVE_LEFT, Verb.MOVE_RIGHT)


@dataclass
class PrecedenceDag:
    """Nodes are (object id, manipulation count); an edge b -> a means a was
    placed relative to b. Count 0 marks an object never moved so far."""

    graph: nx.DiGraph = field(default_factory=nx.DiGraph)
    counts: dict[int, int] = field(default_factory=dict)

    def current(self, obj: int) -> tuple[int, int]:
        node = (obj, self.counts.get(obj, 0))
        self.graph.add_node(node)
        return node

    def record(self, action: ActionInstance) -> None:
        base = self.current(action.target) if action.verb in _DEPENDENT_VERBS else None
        self.counts[action.moved] = self.counts.get(action.moved, 0) + 1
        node = self.current(action.moved)
        if base is not None:
            self.graph.add_edge(base, node)

    @property
    def objects(self) -> set[int]:
        return {obj for obj, _ in self.graph.nodes}

    def topological_order(self) -> list[tuple[int, int]]:
        return list(nx.lexicographical_topological_sort(self.graph))

    def edges(self) -> list[tuple[tuple[int, int], tuple[int, int]]]:
        return sorted(self.graph.edges)


def build_dag(executed: Iterable[ActionInstance]) -> PrecedenceDag:
    dag = PrecedenceDag()
    for action in executed:
        dag.record(action)
    return dag


def recovery_priority(dag: PrecedenceDag, erroneous_ids: Iterable[int]) -> list[int]:
    """Objects absent from the DAG first (by id), then by the earliest
    topological position of any of their timestamped nodes."""
    position: dict[int, int] = {}
    for k, (obj, _) in enumerate(dag.topological_order()):
        position.setdefault(obj, k)
    ids = sorted(set(erroneous_ids))
    return sorted(ids, key=lambda i: (i in position, position.get(i, -1), i))
