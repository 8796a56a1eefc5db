"""Dataset construction: FD-2 synthesis, subgraph sampling, splits and UQER rules."""
from __future__ import annotations

import itertools
import json
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .graph import (
    GraphValidationError,
    KnowledgeGraph,
    Triplet,
    read_triplets,
    write_triplets,
)


class DatasetError(ValueError):
    pass


class CoverageError(DatasetError):
    """A split could not keep every query node inside the observed graph."""

    def __init__(self, message: str, blocking_nodes):
        super().__init__(message)
        self.blocking_nodes = sorted(blocking_nodes)


def _triplet_list(triplets) -> list[Triplet]:
    if isinstance(triplets, KnowledgeGraph):
        triplets = triplets.triplets
    return [Triplet(*map(int, t)) for t in np.asarray(triplets, dtype=np.int64).reshape(-1, 3)]


# -- FD-2 --------------------------------------------------------------------


def generate_fd2(
    tree_depths: Sequence[int], relation_offset_per_tree: bool = True
) -> tuple[list[Triplet], list[Triplet]]:
    """Observed and query triplets of the FD-2 family of binary trees.

    Tree ``m`` is a complete binary tree in heap order: node ``v`` has parent
    ``ceil((v - 2) / 2)``. Each child points to its parent with relation
    ``2m`` when ``v`` is odd and ``2m + 1`` when ``v`` is even (0-based ``m``),
    and the same relation links it to its grandparent as a query. Trees get
    disjoint node ranges; with ``relation_offset_per_tree=False`` every tree
    reuses relations 0 and 1.
    """
    observed: list[Triplet] = []
    queries: list[Triplet] = []
    offset = 0
    for m, depth in enumerate(tree_depths):
        if depth < 1:
            raise DatasetError("tree depths must be >= 1")
        base_rel = 2 * m if relation_offset_per_tree else 0
        for d in range(1, depth + 1):
            for v in range(2 ** d - 1, 2 ** (d + 1) - 1):
                u1 = math.ceil((v - 2) / 2)
                u2 = math.ceil((u1 - 2) / 2)
                rel = base_rel + 1 if v % 2 == 0 else base_rel
                if u1 >= 0:
                    observed.append(Triplet(offset + v, rel, offset + u1))
                if u2 >= 0:
                    queries.append(Triplet(offset + v, rel, offset + u2))
        offset += 2 ** (depth + 1) - 1
    return observed, queries


def fd2_sizes(tree_depths: Sequence[int], relation_offset_per_tree: bool = True) -> tuple[int, int]:
    """(num_nodes, num_relations) of the graph built by :func:`generate_fd2`."""
    n = sum(2 ** (d + 1) - 1 for d in tree_depths)
    r = 2 * len(tree_depths) if relation_offset_per_tree else 2
    return n, r


def fd2_graph(tree_depths, relation_offset_per_tree=True) -> tuple[KnowledgeGraph, list[Triplet]]:
    observed, queries = generate_fd2(tree_depths, relation_offset_per_tree)
    n, r = fd2_sizes(tree_depths, relation_offset_per_tree)
    return KnowledgeGraph(observed, n, r), queries


# -- degree-bounded BFS sampling --------------------------------------------


def sample_subgraph(
    triplets, max_nodes: int, max_edges: int, max_degree: int, seed=None
) -> list[Triplet]:
    """Breadth-first subgraph sample from the highest-degree node.

    Every expanded node contributes at most ``max_degree`` of its incident
    triplets, drawn uniformly. Node and edge budgets are hard limits.
    """
    if min(max_nodes, max_edges, max_degree) < 1:
        raise DatasetError("budgets must be >= 1")
    raw = sorted(set(_triplet_list(triplets)))
    if not raw:
        raise DatasetError("cannot sample from an empty graph")
    rng = np.random.default_rng(seed)
    incident: dict[int, list[Triplet]] = {}
    for t in raw:
        incident.setdefault(t.head, []).append(t)
        if t.tail != t.head:
            incident.setdefault(t.tail, []).append(t)
    # highest degree, ties to the lowest index
    start = min(incident, key=lambda v: (-len(incident[v]), v))

    nodes = {start}
    edges: set[Triplet] = set()
    queue = deque([start])
    expanded = set()
    while queue:
        u = queue.popleft()
        if u in expanded:
            continue
        expanded.add(u)
        if len(nodes) >= max_nodes or len(edges) >= max_edges:
            continue
        cand = incident[u]
        if len(cand) > max_degree:
            pick = rng.choice(len(cand), size=max_degree, replace=False)
            cand = [cand[i] for i in sorted(pick)]
        for t in cand:
            if len(edges) >= max_edges:
                break
            other = t.tail if t.head == u else t.head
            if other not in nodes:
                if len(nodes) >= max_nodes:
                    continue
                nodes.add(other)
                queue.append(other)
            edges.add(t)
    return sorted(edges)


# -- splits ------------------------------------------------------------------


@dataclass
class DatasetBundle:
    """An observed graph plus disjoint train / valid / test query lists."""

    observed: KnowledgeGraph
    train: list[Triplet] = field(default_factory=list)
    valid: list[Triplet] = field(default_factory=list)
    test: list[Triplet] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)
    node_names: list[str] | None = None
    relation_names: list[str] | None = None

    def check(self) -> None:
        obs = self.observed.triplet_set()
        sets = {name: set(getattr(self, name)) for name in ("train", "valid", "test")}
        for name, s in sets.items():
            if len(s) != len(getattr(self, name)):
                raise DatasetError(f"{name} contains duplicate triplets")
            if s & obs:
                raise DatasetError(f"{name} overlaps the observed triplets")
        for a, b in itertools.combinations(sets, 2):
            if sets[a] & sets[b]:
                raise DatasetError(f"{a} and {b} overlap")
        seen = set(np.unique(self.observed.triplets[:, [0, 2]]).tolist()) if len(obs) else set()
        for name in ("valid", "test"):
            missing = {n for t in sets[name] for n in (t.head, t.tail)} - seen
            if missing:
                raise DatasetError(f"{name} nodes absent from observed graph: {sorted(missing)[:10]}")

    def counts(self) -> dict:
        return {
            "num_nodes": self.observed.num_nodes,
            "num_relations": self.observed.num_relations,
            "observed": len(self.observed),
            "train": len(self.train),
            "valid": len(self.valid),
            "test": len(self.test),
        }


def _split_sizes(n: int, ratios: Sequence[float]) -> list[int]:
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DatasetError(f"ratios must sum to 1, got {ratios}")
    tail = [math.floor(n * r + 1e-9) for r in ratios[1:]]
    return [n - sum(tail)] + tail


def coverage_holdout(
    triplets: Sequence[Triplet], n_holdout: int, rng: np.random.Generator, max_rounds: int = 10
) -> tuple[list[Triplet], list[Triplet]]:
    """Hold out ``n_holdout`` triplets whose endpoints stay present in the rest.

    Candidates are drawn in random order and discarded when removing them
    would leave one of their nodes without any remaining triplet. Returns
    (kept, held_out) with held_out in draw order.
    """
    triplets = list(triplets)
    if n_holdout == 0:
        return triplets, []
    for _ in range(max_rounds):
        degree: dict[int, int] = {}
        for t in triplets:
            degree[t.head] = degree.get(t.head, 0) + 1
            if t.tail != t.head:
                degree[t.tail] = degree.get(t.tail, 0) + 1
        held: list[int] = []
        for idx in rng.permutation(len(triplets)).tolist():
            t = triplets[idx]
            ends = {t.head, t.tail}
            if all(degree[v] > 1 for v in ends):
                for v in ends:
                    degree[v] -= 1
                held.append(idx)
                if len(held) == n_holdout:
                    held_set = set(held)
                    kept = [t for i, t in enumerate(triplets) if i not in held_set]
                    return kept, [triplets[i] for i in held]
    blocking = {v for v, d in degree.items() if d <= 1}
    raise CoverageError(
        f"only {len(held)} of {n_holdout} triplets can be held out without orphaning nodes",
        blocking,
    )


def split_dataset(
    triplets,
    ratios: Sequence[float] = (0.8, 0.1, 0.1),
    seed=0,
    num_nodes: int | None = None,
    num_relations: int | None = None,
) -> DatasetBundle:
    """Split triplets into an observed graph and held-out query sets.

    ``(observed, valid, test)`` for three ratios, ``(observed, test)`` for two.
    Held-out sizes are floored, the remainder stays observed, and every node of
    a held-out triplet keeps at least one observed triplet.
    """
    trip = sorted(set(_triplet_list(triplets)))
    if len(ratios) not in (2, 3):
        raise DatasetError("ratios must have two or three entries")
    sizes = _split_sizes(len(trip), ratios)
    rng = np.random.default_rng(seed)
    kept, held = coverage_holdout(trip, sum(sizes[1:]), rng)
    if num_nodes is None:
        num_nodes = 1 + max((max(t.head, t.tail) for t in trip), default=0)
    if num_relations is None:
        num_relations = 1 + max((t.relation for t in trip), default=0)
    observed = KnowledgeGraph(kept, num_nodes, num_relations)
    if len(ratios) == 3:
        valid, test = held[: sizes[1]], held[sizes[1]:]
    else:
        valid, test = [], held
    bundle = DatasetBundle(
        observed, [], sorted(valid), sorted(test),
        provenance={"generator": "split_dataset", "ratios": list(ratios), "seed": seed},
    )
    bundle.check()
    return bundle


# -- topic splitting -----------------------------------------------------------


class TopicGraph(NamedTuple):
    name: str
    graph: KnowledgeGraph
    node_ids: np.ndarray       # new index -> original node index
    relation_ids: np.ndarray   # new index -> original relation index


def topic_split(triplets, relation_groups: Mapping[str, Sequence[int]]) -> list[TopicGraph]:
    """Partition triplets by relation group and reindex each part densely."""
    owner: dict[int, str] = {}
    for name, rels in relation_groups.items():
        for r in rels:
            if r in owner:
                raise DatasetError(f"relation {r} appears in groups {owner[r]!r} and {name!r}")
            owner[int(r)] = name
    trip = _triplet_list(triplets)
    stray = {t.relation for t in trip} - owner.keys()
    if stray:
        raise DatasetError(f"relations not covered by any group: {sorted(stray)}")
    out = []
    for name, rels in relation_groups.items():
        part = [t for t in trip if owner[t.relation] == name]
        node_ids = np.array(sorted({v for t in part for v in (t.head, t.tail)}), dtype=np.int64)
        rel_ids = np.array(sorted(int(r) for r in rels), dtype=np.int64)
        nmap = {int(v): i for i, v in enumerate(node_ids)}
        rmap = {int(r): i for i, r in enumerate(rel_ids)}
        re = [(nmap[t.head], rmap[t.relation], nmap[t.tail]) for t in part]
        g = KnowledgeGraph(re, max(len(node_ids), 1), max(len(rel_ids), 1))
        out.append(TopicGraph(name, g, node_ids, rel_ids))
    return out


# -- forest fire -------------------------------------------------------------


def forest_fire_sample(
    g: KnowledgeGraph, target_nodes: int, burn_prob: float = 0.8, seed=None, max_restarts: int = 1000
) -> tuple[set[int], list[Triplet]]:
    """Forest-fire node sample and its induced triplets.

    Each burning node ignites ``Geometric`` many unburnt neighbours (mean
    ``burn_prob / (1 - burn_prob)``), ignoring edge direction. When the fire
    dies out a new random unburnt node is lit.
    """
    N = g.num_nodes
    if not 1 <= target_nodes <= N:
        raise DatasetError(f"target_nodes must be in [1, {N}]")
    if not 0 <= burn_prob < 1:
        raise DatasetError("burn_prob must be in [0, 1)")
    rng = np.random.default_rng(seed)
    nbrs: list[set[int]] = [set() for _ in range(N)]
    for h, _, t in g.triplets.tolist():
        if h != t:
            nbrs[h].add(t)
            nbrs[t].add(h)
    sampled: set[int] = set()
    visited: set[int] = set()
    queue: deque[int] = deque()
    restarts = 0
    while len(sampled) < target_nodes:
        if not queue:
            if restarts > max_restarts:
                raise DatasetError("forest fire exhausted its restarts")
            pool = np.array(sorted(set(range(N)) - visited))
            start = int(rng.choice(pool))
            visited.add(start)
            queue.append(start)
            restarts += 1
        u = queue.popleft()
        sampled.add(u)
        fresh = sorted(nbrs[u] - visited)
        n_burn = min(len(fresh), int(rng.geometric(1.0 - burn_prob)) - 1)
        if n_burn > 0:
            for v in rng.choice(fresh, size=n_burn, replace=False).tolist():
                visited.add(v)
                queue.append(v)
    induced = [Triplet(*t) for t in g.triplets.tolist() if t[0] in sampled and t[2] in sampled]
    return sampled, induced


# -- UQER Horn clauses ---------------------------------------------------------


@dataclass(frozen=True)
class UQERClause:
    """Horn clause with universally quantified, pairwise distinct variables.

    ``atoms`` lists the body as 0-based (node var, relation var, node var)
    indices into E_1..E_M and C_1..C_K. The head is (E_1, C_1, E_h), h in {1, 2}.
    """

    num_node_vars: int
    num_rel_vars: int
    head_var: int
    atoms: tuple[tuple[int, int, int], ...]

    def __post_init__(self):
        M, K, h = self.num_node_vars, self.num_rel_vars, self.head_var
        if M < 1 or K < 1:
            raise DatasetError("clause needs at least one node and one relation variable")
        if h not in (1, 2) or h > M:
            raise DatasetError("head_var must be 1 or 2 and at most M")
        atoms = tuple(sorted({tuple(map(int, a)) for a in self.atoms}))
        for u, c, v in atoms:
            if not (0 <= u < M and 0 <= v < M and 0 <= c < K):
                raise DatasetError(f"atom {(u, c, v)} out of range for M={M}, K={K}")
        used_nodes = {x for u, _, v in atoms for x in (u, v)}
        used_rels = {c for _, c, _ in atoms}
        for u in range(h, M):
            if u not in used_nodes:
                raise DatasetError(f"node variable E_{u + 1} never appears in the body")
        for c in range(1, K):
            if c not in used_rels:
                raise DatasetError(f"relation variable C_{c + 1} never appears in the body")
        object.__setattr__(self, "atoms", atoms)

    @property
    def indicator(self) -> np.ndarray:
        B = np.zeros((self.num_node_vars, self.num_rel_vars, self.num_node_vars), dtype=np.int8)
        for u, c, v in self.atoms:
            B[u, c, v] = 1
        return B

    @classmethod
    def from_indicator(cls, B, head_var: int) -> "UQERClause":
        B = np.asarray(B)
        if B.ndim != 3 or B.shape[0] != B.shape[2] or not np.isin(B, (0, 1)).all():
            raise DatasetError("indicator must be a binary M x K x M array")
        return cls(B.shape[0], B.shape[1], head_var, tuple(map(tuple, np.argwhere(B == 1))))


# Chains (E1, C1, E3) ∧ (E3, C, E2) => (E1, C1, E2): C equal to C1 or distinct from it.
FD2_CLAUSES = (
    UQERClause(3, 1, 2, ((0, 0, 2), (2, 0, 1))),
    UQERClause(3, 2, 2, ((0, 0, 2), (2, 1, 1))),
)


def _assignment_count(n: int, k: int) -> int:
    return math.perm(n, k) if n >= k else 0


def uqer_derive(clause: UQERClause, g: KnowledgeGraph, budget: float = 1e7) -> set[Triplet]:
    """All head triplets derivable from ``g`` by one application of ``clause``.

    Enumerates injective relation assignments first, then extends node
    assignments variable by variable, checking each atom once both of its
    node variables are bound.
    """
    M, K = clause.num_node_vars, clause.num_rel_vars
    if g.num_nodes < M or g.num_relations < K:
        raise DatasetError("graph is smaller than the clause's variable counts")
    total = _assignment_count(g.num_nodes, M) * _assignment_count(g.num_relations, K)
    if total > budget:
        raise DatasetError(
            f"{total:.3g} assignments exceed the budget of {budget:.3g}; use a smaller graph"
        )
    present = g.triplet_set()
    # atoms become checkable once the later of their two node variables is bound
    ready: list[list[tuple[int, int, int]]] = [[] for _ in range(M)]
    for u, c, v in clause.atoms:
        ready[max(u, v)].append((u, c, v))
    nodes = range(g.num_nodes)
    derived: set[Triplet] = set()
    h = clause.head_var - 1

    for rels in itertools.permutations(range(g.num_relations), K):
        assign = [-1] * M

        def extend(pos: int) -> None:
            if pos == M:
                derived.add(Triplet(assign[0], rels[0], assign[h]))
                return
            used = set(assign[:pos])
            for n in nodes:
                if n in used:
                    continue
                assign[pos] = n
                if all((assign[u], rels[c], assign[v]) in present for u, c, v in ready[pos]):
                    extend(pos + 1)
            assign[pos] = -1

        extend(0)
    return derived


def uqer_derive_all(clauses, g: KnowledgeGraph, budget: float = 1e7) -> set[Triplet]:
    out: set[Triplet] = set()
    for c in clauses:
        out |= uqer_derive(c, g, budget)
    return out


def write_clause(clause: UQERClause, path) -> None:
    """Text form: ``M``, ``K`` and ``h`` lines, then one 1-based ``u c u'`` line per atom."""
    lines = [f"M {clause.num_node_vars}", f"K {clause.num_rel_vars}", f"h {clause.head_var}"]
    lines += [f"{u + 1} {c + 1} {v + 1}" for u, c, v in clause.atoms]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_clause(path) -> UQERClause:
    header: dict[str, int] = {}
    atoms = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if parts[0] in ("M", "K", "h") and len(parts) == 2:
                header[parts[0]] = int(parts[1])
            elif len(parts) == 3:
                atoms.append(tuple(int(x) - 1 for x in parts))
            else:
                raise ValueError(line)
        except ValueError:
            raise DatasetError(f"{path}:{lineno}: cannot parse {line!r}") from None
    for key in ("M", "K", "h"):
        if key not in header:
            raise DatasetError(f"{path}: missing {key} line")
    return UQERClause(header["M"], header["K"], header["h"], tuple(atoms))


# -- bundle directories ------------------------------------------------------------


BUNDLE_FILES = ("observed", "train", "valid", "test")


def write_bundle(bundle: DatasetBundle, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    nodes = bundle.node_names or [f"e{i}" for i in range(bundle.observed.num_nodes)]
    rels = bundle.relation_names or [f"r{k}" for k in range(bundle.observed.num_relations)]
    write_triplets(bundle.observed, out / "observed.tsv", nodes, rels)
    for name in ("train", "valid", "test"):
        write_triplets(getattr(bundle, name), out / f"{name}.tsv", nodes, rels)
    meta = {
        "provenance": bundle.provenance,
        "counts": bundle.counts(),
        "nodes": nodes,
        "relations": rels,
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_bundle(in_dir) -> DatasetBundle:
    d = Path(in_dir)
    meta_path = d / "meta.json"
    if not meta_path.exists():
        raise DatasetError(f"{d}: not a dataset bundle (meta.json missing)")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    nodes, rels = list(meta["nodes"]), list(meta["relations"])
    parts = {}
    for name in BUNDLE_FILES:
        path = d / f"{name}.tsv"
        trip, n2, r2 = read_triplets(path, nodes, rels) if path.exists() else ([], nodes, rels)
        if len(n2) != len(nodes) or len(r2) != len(rels):
            raise DatasetError(f"{path}: names missing from meta.json")
        parts[name] = trip
    try:
        observed = KnowledgeGraph(parts["observed"], len(nodes), len(rels))
    except GraphValidationError as exc:
        raise DatasetError(str(exc)) from exc
    bundle = DatasetBundle(
        observed, sorted(parts["train"]), sorted(parts["valid"]), sorted(parts["test"]),
        provenance=meta.get("provenance", {}), node_names=nodes, relation_names=rels,
    )
    bundle.check()
    return bundle


def fd2_bundles(
    depths_train: Sequence[int], depths_test: Sequence[int], valid_ratio: float = 0.1, seed: int = 0
) -> tuple[DatasetBundle, DatasetBundle]:
    """Train and test FD-2 bundles with disjoint node and relation names.

    Training queries are divided into train / valid; test queries all go to test.
    """
    obs, q = generate_fd2(depths_train)
    n, r = fd2_sizes(depths_train)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(q))
    n_valid = math.floor(len(q) * valid_ratio + 1e-9)
    valid = sorted(q[i] for i in order[:n_valid])
    train = sorted(q[i] for i in order[n_valid:])
    train_bundle = DatasetBundle(
        KnowledgeGraph(obs, n, r), train, valid, [],
        provenance={"generator": "fd2", "depths": list(depths_train), "valid_ratio": valid_ratio,
                    "seed": seed, "role": "train"},
        node_names=[f"train_e{i}" for i in range(n)],
        relation_names=[f"train_r{k}" for k in range(r)],
    )
    obs_t, q_t = generate_fd2(depths_test)
    n_t, r_t = fd2_sizes(depths_test)
    test_bundle = DatasetBundle(
        KnowledgeGraph(obs_t, n_t, r_t), [], [], sorted(q_t),
        provenance={"generator": "fd2", "depths": list(depths_test), "seed": seed, "role": "test"},
        node_names=[f"test_e{i}" for i in range(n_t)],
        relation_names=[f"test_r{k}" for k in range(r_t)],
    )
    train_bundle.check()
    test_bundle.check()
    return train_bundle, test_bundle
