"""Finite connected graphs, all-pairs hop distances, and the greedy routing kernel.

Node identifiers are opaque strings mapped to dense integer indices in
configuration order; all downstream tie-breaking inherits that order.
Graphs are immutable after construction and safe to share between workers.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

from .errors import (
    DegreeBoundExceeded,
    DestinationTooClose,
    DisconnectedGraph,
    DuplicateEdge,
    NegativeRate,
    SameNode,
    SwapRateBoundExceeded,
)


@dataclass(frozen=True)
class DistanceTable:
    """All-pairs hop counts, indexed by dense node index."""

    dist: tuple  # tuple of tuples of ints

    def __call__(self, u: int, w: int) -> int:
        return self.dist[u][w]


@dataclass(frozen=True)
class Graph:
    """Connected undirected graph with per-edge server swap rates.

    ``swap_rates`` maps the unordered edge (dense index pair, low first) to a
    nonnegative rate of position exchanges per unit time.
    """

    names: tuple            # node name per dense index
    index: dict             # name -> dense index
    neighbors: tuple        # tuple of tuples of neighbor indices (sorted)
    swap_rates: dict        # (i, j) with i < j -> rate
    distance_table: DistanceTable = field(repr=False)

    @property
    def n_nodes(self) -> int:
        return len(self.names)

    @property
    def edges(self):
        return tuple(sorted(self.swap_rates))

    def swap_rate(self, u: int, w: int) -> float:
        return self.swap_rates[(u, w) if u < w else (w, u)]

    def dist(self, u: int, w: int) -> int:
        return self.distance_table.dist[u][w]

    def max_degree(self) -> int:
        return max((len(nb) for nb in self.neighbors), default=0)


def _bfs_from(neighbors, src: int) -> list:
    dist = [-1] * len(neighbors)
    dist[src] = 0
    frontier = deque([src])
    while frontier:
        u = frontier.popleft()
        for w in neighbors[u]:
            if dist[w] < 0:
                dist[w] = dist[u] + 1
                frontier.append(w)
    return dist


def build_graph(nodes, edges, swap_rates=None, *, max_swap_rate=float("inf"),
                max_degree=None) -> Graph:
    """Validate and freeze a graph description.

    ``nodes``: iterable of node names (order fixes dense indices).
    ``edges``: iterable of (u, v) name pairs, or (u, v, rate) triples.
    ``swap_rates``: optional map {(u, v): rate} overriding per-edge triples;
    missing edges default to rate 0.
    """
    names = tuple(str(n) for n in nodes)
    if not names:
        raise DisconnectedGraph("graph needs at least one node")
    if len(set(names)) != len(names):
        raise DuplicateEdge(f"duplicate node names in {names}")
    index = {n: i for i, n in enumerate(names)}

    rate_of = {}
    pairs = []
    for e in edges:
        if len(e) == 3:
            u, v, r = e
        else:
            u, v = e
            r = 0.0
        if u not in index or v not in index:
            raise DisconnectedGraph(f"edge ({u}, {v}) references unknown node")
        i, j = index[u], index[v]
        if i == j:
            raise DuplicateEdge(f"self-loop at node {u}")
        key = (i, j) if i < j else (j, i)
        if key in rate_of:
            raise DuplicateEdge(f"duplicate edge ({u}, {v})")
        rate_of[key] = float(r)
        pairs.append(key)
    if swap_rates:
        for (u, v), r in swap_rates.items():
            i, j = index[u], index[v]
            key = (i, j) if i < j else (j, i)
            if key not in rate_of:
                raise DisconnectedGraph(f"swap rate for non-edge ({u}, {v})")
            rate_of[key] = float(r)

    for (i, j), r in rate_of.items():
        if r < 0:
            raise NegativeRate(f"swap rate {r} on edge ({names[i]}, {names[j]})")
        if not r < max_swap_rate:
            raise SwapRateBoundExceeded(
                f"swap rate {r} on edge ({names[i]}, {names[j]}) reaches the "
                f"configured bound {max_swap_rate}")

    nbr = [[] for _ in names]
    for i, j in pairs:
        nbr[i].append(j)
        nbr[j].append(i)
    neighbors = tuple(tuple(sorted(ns)) for ns in nbr)

    if max_degree is not None:
        worst = max((len(ns) for ns in neighbors), default=0)
        if worst > max_degree:
            raise DegreeBoundExceeded(
                f"max vertex degree {worst} exceeds configured bound {max_degree}")

    dist0 = _bfs_from(neighbors, 0)
    if any(d < 0 for d in dist0):
        missing = [names[i] for i, d in enumerate(dist0) if d < 0]
        raise DisconnectedGraph(f"nodes unreachable from {names[0]}: {missing}")
    table = [dist0] + [_bfs_from(neighbors, s) for s in range(1, len(names))]
    dt = DistanceTable(tuple(tuple(row) for row in table))

    return Graph(names=names, index=index, neighbors=neighbors,
                 swap_rates=dict(sorted(rate_of.items())), distance_table=dt)


def distances(g: Graph) -> DistanceTable:
    """Exact BFS hop counts for all node pairs (precomputed at build time)."""
    return g.distance_table


def routing_candidates(g: Graph, v: int, dest: int) -> tuple:
    """Neighbors of ``v`` exactly one hop closer to ``dest``, ascending index.

    Nonempty whenever v != dest on a connected graph.
    """
    if v == dest:
        raise SameNode(f"routing from {g.names[v]} to itself")
    dv = g.dist(v, dest)
    return tuple(w for w in g.neighbors[v] if g.dist(w, dest) == dv - 1)


def routing_kernel(g: Graph, v: int, dest: int) -> dict:
    """Uniform distribution over the greedy candidates, as {node index: prob}.

    Only defined for dist(v, dest) > 1; at distance <= 1 the customer leaves
    the network instead of being routed.
    """
    if g.dist(v, dest) <= 1:
        raise DestinationTooClose(
            f"dist({g.names[v]}, {g.names[dest]}) <= 1: customer exits, no routing")
    cands = routing_candidates(g, v, dest)
    p = 1.0 / len(cands)
    return {w: p for w in cands}


def routing_kernel_value(g: Graph, v: int, dest: int, w: int) -> float:
    """Kernel value with the exit convention: 0 whenever dist(v, dest) <= 1."""
    if v == dest or g.dist(v, dest) <= 1:
        return 0.0
    dv = g.dist(v, dest)
    if g.dist(w, dest) != dv - 1 or w not in g.neighbors[v]:
        return 0.0
    return 1.0 / len(routing_candidates(g, v, dest))
