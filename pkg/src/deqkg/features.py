"""Shortest-path distance features between query endpoints.

Distances are hop counts over the directed union graph (edges of every
relation), capped at ``cap``. When a query triplet (i, k, j) is itself an
observed edge it is ignored while measuring, so a model cannot read the
answer off the distance.
"""
from __future__ import annotations

from typing import Iterable, NamedTuple

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import shortest_path

from .graph import KnowledgeGraph, Triplet

UNREACHABLE = -1
DEFAULT_CAP = 10


class DistanceFeature(NamedTuple):
    dist_forward: int
    dist_backward: int
    cap: int


def _exclusions(exclude) -> list[Triplet]:
    if exclude is None:
        return []
    if len(exclude) == 3 and all(np.isscalar(x) for x in exclude):
        return [Triplet(*map(int, exclude))]
    return [Triplet(*map(int, t)) for t in exclude]


def shortest_distance(
    g: KnowledgeGraph,
    src: int,
    dst: int,
    exclude=None,
    cap: int = DEFAULT_CAP,
) -> int:
    """Capped BFS hop count from ``src`` to ``dst``.

    ``exclude`` is a triplet or a list of triplets removed before the search;
    an edge i->j survives if some other relation still connects i to j.
    Returns ``UNREACHABLE`` when no path of length <= cap exists.
    """
    if not (0 <= src < g.num_nodes and 0 <= dst < g.num_nodes):
        raise IndexError(f"node index out of range: ({src}, {dst})")
    if cap < 1:
        raise ValueError("cap must be >= 1")
    if src == dst:
        return 0
    dropped = {t for t in _exclusions(exclude) if t in g}
    adj: dict[int, set[int]] = {}
    for h, r, t in g.triplets.tolist():
        if (h, r, t) in dropped:
            continue
        adj.setdefault(h, set()).add(t)
    seen = {src}
    frontier = [src]
    for depth in range(1, cap + 1):
        nxt = []
        for u in frontier:
            for v in adj.get(u, ()):
                if v == dst:
                    return depth
                if v not in seen:
                    seen.add(v)
                    nxt.append(v)
        if not nxt:
            break
        frontier = nxt
    return UNREACHABLE


class DistanceTable:
    """Cached capped distances on one graph, computed once per source node."""

    def __init__(self, g: KnowledgeGraph, cap: int = DEFAULT_CAP):
        if cap < 1:
            raise ValueError("cap must be >= 1")
        self.graph = g
        self.cap = int(cap)
        N = g.num_nodes
        t = g.triplets
        pairs, counts = (np.unique(t[:, [0, 2]], axis=0, return_counts=True)
                         if len(t) else (np.zeros((0, 2), np.int64), np.zeros(0, np.int64)))
        self._multiplicity = {(int(a), int(b)): int(c) for (a, b), c in zip(pairs, counts)}
        self._adj = csr_matrix(
            (np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(N, N)
        )
        self._out = [[] for _ in range(N)]
        for a, b in pairs.tolist():
            self._out[a].append(b)
        self._rows: dict[int, np.ndarray] = {}

    def _ensure_rows(self, sources: Iterable[int]) -> None:
        missing = sorted({int(s) for s in sources} - self._rows.keys())
        if not missing:
            return
        dist = shortest_path(self._adj, directed=True, unweighted=True, indices=missing)
        dist = np.atleast_2d(dist)
        for s, row in zip(missing, dist):
            out = np.full(row.shape, UNREACHABLE, dtype=np.int64)
            ok = np.isfinite(row) & (row <= self.cap)
            out[ok] = row[ok].astype(np.int64)
            self._rows[s] = out

    def distance(self, src: int, dst: int) -> int:
        self._ensure_rows([src])
        return int(self._rows[src][dst])

    def _bfs_without_edge(self, src: int, dst: int) -> int:
        # src->dst removed; only the first hop out of src can use that edge on a simple path
        seen = {src}
        frontier = [src]
        for depth in range(1, self.cap + 1):
            nxt = []
            for u in frontier:
                for v in self._out[u]:
                    if u == src and v == dst:
                        continue
                    if v == dst:
                        return depth
                    if v not in seen:
                        seen.add(v)
                        nxt.append(v)
            if not nxt:
                break
            frontier = nxt
        return UNREACHABLE

    def features(self, queries) -> np.ndarray:
        """(n, 2) int array of [d(i, j), d(j, i)], each query excluded from its own search."""
        q = np.asarray(queries, dtype=np.int64).reshape(-1, 3)
        out = np.empty((len(q), 2), dtype=np.int64)
        if not len(q):
            return out
        self._ensure_rows(np.concatenate([q[:, 0], q[:, 2]]))
        present = self.graph.triplet_set()
        for n, (i, k, j) in enumerate(q.tolist()):
            fwd = self._rows[i][j]
            bwd = self._rows[j][i]
            # removing i->j never shortens or lengthens a simple path j ~> i
            if i != j and (i, k, j) in present and self._multiplicity[(i, j)] == 1:
                fwd = self._bfs_without_edge(i, j)
            out[n, 0] = fwd
            out[n, 1] = bwd
        return out


def distance_features(g: KnowledgeGraph, queries, cap: int = DEFAULT_CAP) -> list[DistanceFeature]:
    table = DistanceTable(g, cap)
    return [DistanceFeature(int(a), int(b), cap) for a, b in table.features(queries)]


def encode_distances(d: np.ndarray, cap: int) -> np.ndarray:
    """Scale capped distances to [0, 1]; unreachable maps to 1."""
    d = np.asarray(d, dtype=np.float64)
    d = np.where(d == UNREACHABLE, cap + 1, d)
    return d / (cap + 1)
