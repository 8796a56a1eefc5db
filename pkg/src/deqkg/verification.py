"""Numerical audits of the symmetry properties the models are built to have.

Failures are returned as data. Every audit here has a negative control in
the test suite so a silently passing harness is caught.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from . import deq
from .evalkit import REPORT_VERSION
from .graph import KnowledgeGraph, PermutationPair, apply_permutation, random_permutation_pair

ScoreFn = Callable[[KnowledgeGraph, np.ndarray], np.ndarray]


@dataclass
class InvarianceAudit:
    trials: int
    max_abs_gap: float
    max_rel_gap: float
    failing_cases: list = field(default_factory=list)   # (graph seed, permutation seed, query)
    tolerance: float = 1e-5

    @property
    def passed(self) -> bool:
        return not self.failing_cases

    def to_dict(self) -> dict:
        return {
            "version": REPORT_VERSION,
            "kind": "invariance_audit",
            "trials": self.trials,
            "max_abs_gap": self.max_abs_gap,
            "max_rel_gap": self.max_rel_gap,
            "tolerance": self.tolerance,
            "passed": self.passed,
            "failing_cases": [[int(a), int(b), [int(x) for x in q]] for a, b, q in self.failing_cases],
        }

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")


def random_audit_graph(seed, node_range=(5, 30), relation_range=(2, 5)) -> KnowledgeGraph:
    """Erdos-Renyi graph per relation with edge probability 2/N, no self-loops."""
    rng = np.random.default_rng(seed)
    N = int(rng.integers(node_range[0], node_range[1] + 1))
    R = int(rng.integers(relation_range[0], relation_range[1] + 1))
    mask = rng.random((R, N, N)) < 2.0 / N
    mask[:, np.arange(N), np.arange(N)] = False
    k, i, j = np.nonzero(mask)
    return KnowledgeGraph(np.stack([i, k, j], axis=1), N, R)


def random_queries(g: KnowledgeGraph, n: int, rng: np.random.Generator) -> np.ndarray:
    """Half observed triplets (when there are any), half uniform random ones."""
    n_obs = min(n // 2, g.num_triplets)
    obs = g.triplets[rng.choice(g.num_triplets, size=n_obs, replace=False)] if n_obs else np.zeros((0, 3), np.int64)
    m = n - n_obs
    rand = np.stack([rng.integers(g.num_nodes, size=m), rng.integers(g.num_relations, size=m),
                     rng.integers(g.num_nodes, size=m)], axis=1)
    return np.concatenate([obs, rand]).astype(np.int64)


def _rel_gap(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    scale = np.maximum(np.abs(a), np.abs(b))
    diff = np.abs(a - b)
    return np.divide(diff, scale, out=np.zeros_like(diff), where=scale > 0)


def check_double_invariance(
    score_fn: ScoreFn,
    graph_gen: Callable[[int], KnowledgeGraph] = random_audit_graph,
    trials: int = 100,
    tol: float = 1e-5,
    seed: int = 0,
    queries_per_trial: int = 10,
) -> InvarianceAudit:
    """Compare ``score_fn(g, q)`` with ``score_fn(p(g), p(q))`` on random trials."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    max_abs = max_rel = 0.0
    failing = []
    for t in range(trials):
        g_seed, p_seed = seed * 1_000_003 + 2 * t, seed * 1_000_003 + 2 * t + 1
        g = graph_gen(g_seed)
        p = random_permutation_pair(g.num_nodes, g.num_relations, p_seed)
        q = random_queries(g, queries_per_trial, np.random.default_rng([seed, t]))
        a = np.asarray(score_fn(g, q), dtype=np.float64)
        b = np.asarray(score_fn(apply_permutation(g, p), p.map_triplets(q)), dtype=np.float64)
        ab, rel = np.abs(a - b), _rel_gap(a, b)
        max_abs = max(max_abs, float(ab.max()))
        max_rel = max(max_rel, float(rel.max()))
        for n in np.flatnonzero(rel > tol):
            failing.append((g_seed, p_seed, tuple(int(x) for x in q[n])))
    return InvarianceAudit(trials, max_abs, max_rel, failing, tol)


# -- graph-level tensors ------------------------------------------------------------


def score_tensor(triplet_fn: ScoreFn, g: KnowledgeGraph) -> np.ndarray:
    """The (N, R, N) tensor of scores of every possible triplet."""
    N, R = g.num_nodes, g.num_relations
    i, k, j = np.meshgrid(np.arange(N), np.arange(R), np.arange(N), indexing="ij")
    q = np.stack([i.ravel(), k.ravel(), j.ravel()], axis=1)
    return np.asarray(triplet_fn(g, q), dtype=np.float64).reshape(N, R, N)


def permute_tensor(T: np.ndarray, p: PermutationPair) -> np.ndarray:
    """Entry (phi i, tau k, phi j) of the result is entry (i, k, j) of ``T``."""
    out = np.empty_like(T)
    phi, tau = p.node_perm, p.rel_perm
    out[np.ix_(phi, tau, phi)] = T
    return out


def tensor_to_triplet_fn(tensor_fn: Callable[[KnowledgeGraph], np.ndarray]) -> ScoreFn:
    def triplet_fn(g, q):
        q = np.asarray(q, dtype=np.int64).reshape(-1, 3)
        return tensor_fn(g)[q[:, 0], q[:, 1], q[:, 2]]
    return triplet_fn


def equivariance_gap(triplet_fn: ScoreFn, g: KnowledgeGraph, n_perms: int = 10, seed: int = 0) -> float:
    """Largest entrywise |Gamma(p(g)) - p(Gamma(g))| over random permutation pairs."""
    base = score_tensor(triplet_fn, g)
    gap = 0.0
    for n in range(n_perms):
        p = random_permutation_pair(g.num_nodes, g.num_relations, [seed, n])
        lhs = score_tensor(triplet_fn, apply_permutation(g, p))
        gap = max(gap, float(np.max(np.abs(lhs - permute_tensor(base, p)))))
    return gap


def check_equivariant_construction(triplet_fn: ScoreFn, g: KnowledgeGraph, n_perms: int = 10,
                                   tol: float = 1e-8, seed: int = 0) -> bool:
    if g.num_nodes > 10:
        raise ValueError("the full score tensor is only built for graphs with at most 10 nodes")
    return equivariance_gap(triplet_fn, g, n_perms, seed) <= tol


# -- expressivity counterexample ----------------------------------------------------

# fixture labels -> 0-based indices: e1..e7 -> 0..6, r1..r4 -> 0..3
FIXTURE_NODES = {f"e{n + 1}": n for n in range(7)}
FIXTURE_RELATIONS = {f"r{n + 1}": n for n in range(4)}
FIXTURE_TRIPLETS = (
    (1, 0, 0), (2, 1, 0),   # e2 -r1-> e1, e3 -r2-> e1
    (3, 0, 1), (4, 1, 1),   # e4 -r1-> e2, e5 -r2-> e2
    (5, 0, 2), (6, 1, 2),   # e6 -r1-> e3, e7 -r2-> e3
)
# r3 and r4 have no observed triplets
FORCED_SCORE_GROUPS = (
    ((3, 3, 0), (6, 3, 0), (6, 2, 0), (3, 2, 0)),
    ((4, 3, 0), (5, 3, 0), (5, 2, 0), (4, 2, 0)),
)
# (relation, node) pairs whose combined embeddings must coincide
FORCED_EMBEDDING_PAIRS = (((0, 3), (1, 6)), ((0, 4), (1, 5)))


def counterexample_graph() -> KnowledgeGraph:
    return KnowledgeGraph(FIXTURE_TRIPLETS, 7, 4)


@dataclass
class CounterexampleReport:
    score_groups: list[list[float]]
    embedding_gaps: list[float]
    max_score_gap: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_score_gap <= self.tolerance and max(self.embedding_gaps) <= self.tolerance


def expressivity_counterexample(model, tol: float = 1e-5, corrupt_distances: bool = False) -> CounterexampleReport:
    """Check the score and embedding equalities that the fixture's symmetry forces.

    With ``corrupt_distances`` the distance inputs are replaced by the raw
    node indices, which breaks the symmetry and should fail the check.
    """
    import torch

    g = counterexample_graph()
    pg = model.prepare(g)
    groups, gap = [], 0.0
    with torch.no_grad():
        X = model.embed(pg).numpy()
        for group in FORCED_SCORE_GROUPS:
            q = np.asarray(group, dtype=np.int64)
            override = q[:, [0, 2]].astype(np.float64) if corrupt_distances else None
            s = model(pg, q, distance_override=override).numpy()
            groups.append(s.tolist())
            gap = max(gap, float(s.max() - s.min()))
    emb = [float(np.max(np.abs(X[a] - X[b]))) for a, b in FORCED_EMBEDDING_PAIRS]
    return CounterexampleReport(groups, emb, gap, tol)


# -- Monte Carlo averaging trend ----------------------------------------------------


@dataclass
class DEqTrend:
    Ms: list[int]
    gaps: np.ndarray       # (trials, len(Ms))
    slopes: np.ndarray     # per trial

    @property
    def mean_slope(self) -> float:
        return float(self.slopes.mean())

    @property
    def decreasing(self) -> int:
        """Trials where the gap at the largest M is below the gap at the smallest."""
        return int((self.gaps[:, -1] < self.gaps[:, 0]).sum())


def deq_trend(scorer=None, trials: int = 20, Ms: Sequence[int] = (1, 4, 16, 64), seed: int = 0,
              queries_per_trial: int = 5) -> DEqTrend:
    scorer = scorer or deq.RandomFeatureScorer()
    gaps = np.empty((trials, len(Ms)))
    for t in range(trials):
        g = random_audit_graph([seed, t, 0])
        p = random_permutation_pair(g.num_nodes, g.num_relations, [seed, t, 1])
        q = random_queries(g, queries_per_trial, np.random.default_rng([seed, t, 2]))
        for n, M in enumerate(Ms):
            gaps[t, n] = deq.invariance_gap(scorer, g, q, [p], M, seed=hash_seed(seed, t, M))
    slopes = np.array([deq.gap_slope(Ms, row) for row in gaps])
    return DEqTrend(list(Ms), gaps, slopes)


def hash_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(x) for x in parts]).generate_state(1)[0])


def deq_paired_test(scorer, g: KnowledgeGraph, query, p: PermutationPair, runs: int = 100,
                    M: int = 16, seed: int = 0) -> float:
    """p-value of a paired t-test between the two sides of the averaged score."""
    a = np.empty(runs)
    b = np.empty(runs)
    gp, qp = apply_permutation(g, p), p.map_triplet(query)
    for r in range(runs):
        a[r] = deq.deq_score(scorer, g, query, M, hash_seed(seed, r), stream=0)
        b[r] = deq.deq_score(scorer, gp, qp, M, hash_seed(seed, r), stream=1)
    return float(stats.ttest_rel(a, b).pvalue)
