"""Immutable knowledge-graph container, permutation actions and triplet files.

Nodes and relations are 0-based integer indices. Files on disk carry string
names; names are mapped to indices in order of first appearance.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np


class GraphValidationError(ValueError):
    pass


class TripletParseError(ValueError):
    pass


class Triplet(NamedTuple):
    head: int
    relation: int
    tail: int


def _as_triplet_array(triplets) -> np.ndarray:
    arr = np.asarray(triplets, dtype=np.int64)
    if arr.size == 0:
        return np.zeros((0, 3), dtype=np.int64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise GraphValidationError(f"triplets must have shape (n, 3), got {arr.shape}")
    return arr


class KnowledgeGraph:
    """Directed multi-relational graph with a binary adjacency tensor.

    The triplet array is deduplicated, sorted lexicographically by
    (head, relation, tail) and read-only.
    """

    __slots__ = ("num_nodes", "num_relations", "_triplets", "_rel_slices", "_set")

    def __init__(self, triplets, num_nodes: int, num_relations: int):
        if num_nodes < 1:
            raise GraphValidationError("num_nodes must be positive")
        if num_relations < 1:
            raise GraphValidationError("num_relations must be positive")
        arr = _as_triplet_array(triplets)
        if len(arr):
            bad = (
                (arr[:, 0] < 0) | (arr[:, 0] >= num_nodes)
                | (arr[:, 2] < 0) | (arr[:, 2] >= num_nodes)
                | (arr[:, 1] < 0) | (arr[:, 1] >= num_relations)
            )
            if bad.any():
                h, r, t = arr[np.argmax(bad)]
                raise GraphValidationError(
                    f"triplet ({h}, {r}, {t}) out of range for "
                    f"num_nodes={num_nodes}, num_relations={num_relations}"
                )
            arr = np.unique(arr, axis=0)
        arr.setflags(write=False)
        self.num_nodes = int(num_nodes)
        self.num_relations = int(num_relations)
        self._triplets = arr
        order = np.lexsort((arr[:, 2], arr[:, 0], arr[:, 1])) if len(arr) else np.zeros(0, dtype=np.int64)
        by_rel = arr[order]
        bounds = np.searchsorted(by_rel[:, 1], np.arange(num_relations + 1))
        self._rel_slices = tuple(
            _readonly(by_rel[bounds[k]:bounds[k + 1], [0, 2]]) for k in range(num_relations)
        )
        self._set = None

    @property
    def triplets(self) -> np.ndarray:
        return self._triplets

    @property
    def num_triplets(self) -> int:
        return len(self._triplets)

    def __len__(self) -> int:
        return len(self._triplets)

    def relation_edges(self, k: int) -> np.ndarray:
        """(head, tail) pairs of relation ``k`` as an (n, 2) array."""
        return self._rel_slices[k]

    @property
    def per_relation_adjacency(self) -> tuple[np.ndarray, ...]:
        return self._rel_slices

    def triplet_set(self) -> frozenset[Triplet]:
        if self._set is None:
            self._set = frozenset(Triplet(*map(int, t)) for t in self._triplets)
        return self._set

    def __contains__(self, triplet) -> bool:
        return Triplet(*map(int, triplet)) in self.triplet_set()

    def dense(self) -> np.ndarray:
        """Binary adjacency tensor of shape (N, R, N)."""
        adj = np.zeros((self.num_nodes, self.num_relations, self.num_nodes), dtype=np.int8)
        if len(self._triplets):
            adj[self._triplets[:, 0], self._triplets[:, 1], self._triplets[:, 2]] = 1
        return adj

    def without(self, triplets) -> "KnowledgeGraph":
        drop = {Triplet(*map(int, t)) for t in triplets}
        keep = [t for t in self._triplets.tolist() if Triplet(*t) not in drop]
        return KnowledgeGraph(keep, self.num_nodes, self.num_relations)

    def __eq__(self, other) -> bool:
        if not isinstance(other, KnowledgeGraph):
            return NotImplemented
        return (
            self.num_nodes == other.num_nodes
            and self.num_relations == other.num_relations
            and np.array_equal(self._triplets, other._triplets)
        )

    def __hash__(self):
        return hash((self.num_nodes, self.num_relations, self._triplets.tobytes()))

    def __repr__(self) -> str:
        return (
            f"KnowledgeGraph(num_nodes={self.num_nodes}, "
            f"num_relations={self.num_relations}, num_triplets={len(self)})"
        )


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def build_graph(triplets: Iterable, num_nodes: int, num_relations: int) -> KnowledgeGraph:
    return KnowledgeGraph(list(triplets), num_nodes, num_relations)


@dataclass(frozen=True, eq=False)
class PermutationPair:
    """A node permutation ``node_perm`` and a relation permutation ``rel_perm``.

    ``node_perm[i]`` is the image of node ``i``.
    """

    node_perm: np.ndarray
    rel_perm: np.ndarray

    def __post_init__(self):
        node = _check_bijection(self.node_perm, "node_perm")
        rel = _check_bijection(self.rel_perm, "rel_perm")
        object.__setattr__(self, "node_perm", node)
        object.__setattr__(self, "rel_perm", rel)

    @classmethod
    def identity(cls, num_nodes: int, num_relations: int) -> "PermutationPair":
        return cls(np.arange(num_nodes), np.arange(num_relations))

    @property
    def num_nodes(self) -> int:
        return len(self.node_perm)

    @property
    def num_relations(self) -> int:
        return len(self.rel_perm)

    def inverse(self) -> "PermutationPair":
        return PermutationPair(np.argsort(self.node_perm), np.argsort(self.rel_perm))

    def then(self, other: "PermutationPair") -> "PermutationPair":
        """Composition ``other ∘ self`` (apply self first)."""
        return PermutationPair(other.node_perm[self.node_perm], other.rel_perm[self.rel_perm])

    def map_triplets(self, triplets) -> np.ndarray:
        arr = _as_triplet_array(triplets)
        return np.stack(
            [self.node_perm[arr[:, 0]], self.rel_perm[arr[:, 1]], self.node_perm[arr[:, 2]]], axis=1
        ) if len(arr) else arr.copy()

    def map_triplet(self, t) -> Triplet:
        h, r, tl = t
        return Triplet(int(self.node_perm[h]), int(self.rel_perm[r]), int(self.node_perm[tl]))

    def extend_inverse(self) -> "PermutationPair":
        """Relation permutation acting on a graph augmented by inverse relations."""
        R = self.num_relations
        return PermutationPair(self.node_perm, np.concatenate([self.rel_perm, self.rel_perm + R]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, PermutationPair):
            return NotImplemented
        return np.array_equal(self.node_perm, other.node_perm) and np.array_equal(
            self.rel_perm, other.rel_perm
        )

    def __hash__(self):
        return hash((self.node_perm.tobytes(), self.rel_perm.tobytes()))


def _check_bijection(p, name: str) -> np.ndarray:
    arr = np.array(p, dtype=np.int64).reshape(-1)
    if not np.array_equal(np.sort(arr), np.arange(len(arr))):
        raise GraphValidationError(f"{name} is not a bijection on [0, {len(arr)})")
    arr.setflags(write=False)
    return arr


def apply_permutation(g: KnowledgeGraph, p: PermutationPair) -> KnowledgeGraph:
    if p.num_nodes != g.num_nodes or p.num_relations != g.num_relations:
        raise GraphValidationError(
            f"permutation sizes ({p.num_nodes}, {p.num_relations}) do not match "
            f"graph sizes ({g.num_nodes}, {g.num_relations})"
        )
    return KnowledgeGraph(p.map_triplets(g.triplets), g.num_nodes, g.num_relations)


def augment_inverses(g: KnowledgeGraph) -> KnowledgeGraph:
    """Add (j, k + R, i) for every (i, k, j); the relation count doubles."""
    R = g.num_relations
    t = g.triplets
    inv = np.stack([t[:, 2], t[:, 1] + R, t[:, 0]], axis=1) if len(t) else t
    return KnowledgeGraph(np.concatenate([t, inv]), g.num_nodes, 2 * R)


def random_permutation_pair(num_nodes: int, num_relations: int, seed) -> PermutationPair:
    rng = np.random.default_rng(seed)
    return PermutationPair(rng.permutation(num_nodes), rng.permutation(num_relations))


# -- triplet files -----------------------------------------------------------


def read_triplets(
    path,
    node_names: Sequence[str] | None = None,
    relation_names: Sequence[str] | None = None,
) -> tuple[list[Triplet], list[str], list[str]]:
    """Parse a tab-separated triplet file.

    Returns the triplets and the node / relation name lists, where the list
    position is the index. Existing name lists may be passed in to share an
    index space across files; new names are appended.
    """
    nodes = list(node_names or [])
    rels = list(relation_names or [])
    node_ix = {n: i for i, n in enumerate(nodes)}
    rel_ix = {n: i for i, n in enumerate(rels)}
    out: list[Triplet] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip() or line.startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                if len(fields) == 1:
                    raise TripletParseError(
                        f"{path}:{lineno}: no tab separator found in {line!r}"
                    )
                raise TripletParseError(
                    f"{path}:{lineno}: expected 3 tab-separated fields, got {len(fields)}"
                )
            h, r, t = fields
            if not h or not r or not t:
                raise TripletParseError(f"{path}:{lineno}: empty field in {line!r}")
            for name in (h, t):
                if name not in node_ix:
                    node_ix[name] = len(nodes)
                    nodes.append(name)
            if r not in rel_ix:
                rel_ix[r] = len(rels)
                rels.append(r)
            out.append(Triplet(node_ix[h], rel_ix[r], node_ix[t]))
    return out, nodes, rels


def write_triplets(
    triplets,
    path,
    node_names: Sequence[str] | None = None,
    relation_names: Sequence[str] | None = None,
) -> None:
    """Write triplets (or a graph) as name lines sorted by (head, relation, tail) name."""
    arr = triplets.triplets if isinstance(triplets, KnowledgeGraph) else _as_triplet_array(triplets)
    rows = set()
    for h, r, t in arr.tolist():
        rows.add(
            (
                node_names[h] if node_names is not None else str(h),
                relation_names[r] if relation_names is not None else str(r),
                node_names[t] if node_names is not None else str(t),
            )
        )
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in sorted(rows):
            fh.write("\t".join(row) + "\n")


def write_names(names: Sequence[str], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for n in names:
            if "\n" in n:
                raise GraphValidationError(f"name {n!r} contains a newline")
            fh.write(n + "\n")


def read_names(path) -> list[str]:
    return Path(path).read_text(encoding="utf-8").splitlines()
