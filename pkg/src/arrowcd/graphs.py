"""DAGs, skeletons and node orders, and the map that composes them.

A DAG is represented as a pair ``(skeleton, order)``: orienting every
skeleton link from the earlier to the later node of the order always yields
an acyclic graph, and every DAG arises this way from its own skeleton and
any of its topological orders.

All node indices are 0-based.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np


class InvalidPermutationError(ValueError):
    pass


class DimensionMismatchError(ValueError):
    pass


class CyclicGraphError(ValueError):
    pass


def _as_bits(adj) -> np.ndarray:
    a = np.asarray(adj)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatchError(f"adjacency must be square, got shape {a.shape}")
    out = (a != 0).astype(np.uint8)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class DirectedGraph:
    adj: np.ndarray

    def __post_init__(self):
        a = _as_bits(self.adj)
        if np.any(np.diag(a)):
            raise ValueError("directed graph must have zero diagonal")
        object.__setattr__(self, "adj", a)

    @property
    def p(self) -> int:
        return self.adj.shape[0]

    @property
    def n_edges(self) -> int:
        return int(self.adj.sum())

    def edges(self) -> list[tuple[int, int]]:
        return [(int(j), int(k)) for j, k in zip(*np.nonzero(self.adj))]

    @classmethod
    def empty(cls, p: int) -> "DirectedGraph":
        return cls(np.zeros((p, p), dtype=np.uint8))

    @classmethod
    def from_edges(cls, p: int, edges: Iterable[Sequence[int]]) -> "DirectedGraph":
        a = np.zeros((p, p), dtype=np.uint8)
        for j, k in edges:
            a[j, k] = 1
        return cls(a)

    def __eq__(self, other):
        return isinstance(other, DirectedGraph) and np.array_equal(self.adj, other.adj)

    def __hash__(self):
        return hash((self.p, self.adj.tobytes()))

    def __repr__(self):
        return f"DirectedGraph(p={self.p}, edges={self.edges()})"


@dataclass(frozen=True, eq=False)
class SkeletonGraph:
    adj: np.ndarray

    def __post_init__(self):
        a = _as_bits(self.adj)
        if np.any(np.diag(a)):
            raise ValueError("skeleton must have zero diagonal")
        if not np.array_equal(a, a.T):
            raise ValueError("skeleton adjacency must be symmetric")
        object.__setattr__(self, "adj", a)

    @property
    def p(self) -> int:
        return self.adj.shape[0]

    @property
    def n_links(self) -> int:
        return int(np.triu(self.adj, 1).sum())

    def links(self) -> list[tuple[int, int]]:
        j, k = np.nonzero(np.triu(self.adj, 1))
        return [(int(a), int(b)) for a, b in zip(j, k)]

    @classmethod
    def empty(cls, p: int) -> "SkeletonGraph":
        return cls(np.zeros((p, p), dtype=np.uint8))

    @classmethod
    def from_links(cls, p: int, links: Iterable[Sequence[int]]) -> "SkeletonGraph":
        a = np.zeros((p, p), dtype=np.uint8)
        for j, k in links:
            a[j, k] = a[k, j] = 1
        return cls(a)

    def __eq__(self, other):
        return isinstance(other, SkeletonGraph) and np.array_equal(self.adj, other.adj)

    def __hash__(self):
        return hash((self.p, self.adj.tobytes()))

    def __repr__(self):
        return f"SkeletonGraph(p={self.p}, links={self.links()})"


@dataclass(frozen=True, eq=False)
class NodeOrder:
    """``perm[i]`` is the node placed at position ``i``."""

    perm: tuple[int, ...]

    def __post_init__(self):
        perm = tuple(int(v) for v in self.perm)
        p = len(perm)
        if sorted(perm) != list(range(p)):
            raise InvalidPermutationError(f"not a permutation of 0..{p - 1}: {perm}")
        object.__setattr__(self, "perm", perm)

    @property
    def p(self) -> int:
        return len(self.perm)

    def positions(self) -> np.ndarray:
        pos = np.empty(self.p, dtype=np.int64)
        pos[list(self.perm)] = np.arange(self.p)
        return pos

    def __eq__(self, other):
        return isinstance(other, NodeOrder) and self.perm == other.perm

    def __hash__(self):
        return hash(self.perm)

    def __iter__(self):
        return iter(self.perm)


def order_mask(order: NodeOrder | Sequence[int]) -> np.ndarray:
    """Binary matrix with ``mask[j, k] = 1`` iff ``j`` precedes ``k``."""
    if not isinstance(order, NodeOrder):
        order = NodeOrder(tuple(order))
    pos = order.positions()
    return (pos[:, None] < pos[None, :]).astype(np.uint8)


def compose(skeleton: SkeletonGraph, order: NodeOrder | Sequence[int]) -> DirectedGraph:
    if not isinstance(order, NodeOrder):
        order = NodeOrder(tuple(order))
    if skeleton.p != order.p:
        raise DimensionMismatchError(
            f"skeleton has p={skeleton.p} but order has p={order.p}"
        )
    return DirectedGraph(skeleton.adj & order_mask(order))


def skeleton_of(g: DirectedGraph) -> SkeletonGraph:
    return SkeletonGraph(g.adj | g.adj.T)


def is_acyclic(g: DirectedGraph | np.ndarray) -> bool:
    """Kahn peeling: a graph is acyclic iff all nodes can be removed."""
    adj = g.adj if isinstance(g, DirectedGraph) else (np.asarray(g) != 0)
    indeg = adj.sum(axis=0).astype(np.int64)
    stack = [int(v) for v in np.flatnonzero(indeg == 0)]
    removed = 0
    while stack:
        v = stack.pop()
        removed += 1
        for c in np.flatnonzero(adj[v]):
            indeg[c] -= 1
            if indeg[c] == 0:
                stack.append(int(c))
    return removed == adj.shape[0]


def topological_sort(g: DirectedGraph) -> NodeOrder:
    """Smallest topological order in lexicographic sense."""
    orders, _ = topological_orders(g, cap=1)
    return orders[0]


class TopologicalOrders(NamedTuple):
    orders: list[NodeOrder]
    overflow: bool


def topological_orders(g: DirectedGraph, cap: int = 10_000) -> TopologicalOrders:
    """Enumerate ``Top(g)`` in lexicographic order.

    Enumeration stops after ``cap`` orders; ``overflow`` is set when at least
    one further order exists. Callers that need the full set must check it.
    """
    if not is_acyclic(g):
        raise CyclicGraphError("topological orders requested for a cyclic graph")
    p = g.p
    adj = g.adj.astype(bool)
    indeg = adj.sum(axis=0).astype(np.int64)
    placed = np.zeros(p, dtype=bool)
    prefix: list[int] = []
    out: list[NodeOrder] = []
    overflow = False

    def extend() -> bool:
        nonlocal overflow
        if len(prefix) == p:
            if len(out) >= cap:
                overflow = True
                return False
            out.append(NodeOrder(tuple(prefix)))
            return True
        for v in range(p):
            if placed[v] or indeg[v] != 0:
                continue
            placed[v] = True
            prefix.append(v)
            children = np.flatnonzero(adj[v])
            indeg[children] -= 1
            keep_going = extend()
            indeg[children] += 1
            prefix.pop()
            placed[v] = False
            if not keep_going:
                return False
        return True

    extend()
    return TopologicalOrders(out, overflow)


def graph_to_json(g: DirectedGraph | SkeletonGraph) -> str:
    if isinstance(g, DirectedGraph):
        return json.dumps({"p": g.p, "edges": [list(e) for e in g.edges()]})
    return json.dumps({"p": g.p, "links": [list(e) for e in g.links()]})


def graph_from_json(text: str) -> DirectedGraph | SkeletonGraph:
    obj = json.loads(text)
    p = int(obj["p"])
    if "edges" in obj:
        return DirectedGraph.from_edges(p, obj["edges"])
    if "links" in obj:
        for j, k in obj["links"]:
            if not j < k:
                raise ValueError(f"skeleton link must satisfy j<k, got {[j, k]}")
        return SkeletonGraph.from_links(p, obj["links"])
    raise ValueError("graph JSON needs an 'edges' or 'links' field")
