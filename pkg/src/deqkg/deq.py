"""Random positional scorers and their Monte Carlo average.

A positional scorer is a deterministic function of the graph, the query and
a draw of random initial embeddings (V0 for nodes, R0 for relations). It is
equivariant only conditionally on that draw: relabelling the graph and
carrying the embedding rows along with the labels leaves the score unchanged.
Because the draw's distribution is exchangeable over rows, averaging scores
over independent draws estimates a doubly invariant quantity.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .graph import KnowledgeGraph, PermutationPair, apply_permutation


class PositionalScorer(Protocol):
    def sample_embeddings(self, g: KnowledgeGraph, rng: np.random.Generator
                          ) -> tuple[np.ndarray, np.ndarray]: ...

    def score_with(self, g: KnowledgeGraph, queries, V0: np.ndarray, R0: np.ndarray
                   ) -> np.ndarray: ...


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def relation_cooccurrence(g: KnowledgeGraph) -> np.ndarray:
    """Row-normalised count of nodes shared between each pair of relations."""
    R = g.num_relations
    inc = np.zeros((R, g.num_nodes))
    t = g.triplets
    if len(t):
        inc[t[:, 1], t[:, 0]] = 1.0
        inc[t[:, 1], t[:, 2]] = 1.0
    C = inc @ inc.T
    rows = C.sum(axis=1, keepdims=True)
    return np.divide(C, rows, out=np.zeros_like(C), where=rows > 0)


@dataclass
class RandomFeatureScorer:
    """Fixed-weight message passing over random initial embeddings with a DistMult readout.

    Weights come from ``weight_seed`` (or are passed in via ``weights``);
    only the initial embeddings are random per draw.
    """

    dim: int = 8
    rel_dim: int = 8
    num_layers: int = 2
    weight_seed: int = 0
    weights: dict | None = None

    def __post_init__(self):
        if self.dim < 1 or self.rel_dim < 1 or self.num_layers < 0:
            raise ValueError("dim and rel_dim must be >= 1, num_layers >= 0")
        if self.weights is None:
            rng = np.random.default_rng(self.weight_seed)
            d, dr = self.dim, self.rel_dim
            w = {"rel_self": glorot_uniform(rng, dr, dr),
                 "rel_nbr": glorot_uniform(rng, dr, dr),
                 "rel_to_node": glorot_uniform(rng, dr, d)}
            for layer in range(self.num_layers):
                w[f"self{layer}"] = glorot_uniform(rng, d, d)
                w[f"in{layer}"] = glorot_uniform(rng, d, d)
                w[f"out{layer}"] = glorot_uniform(rng, d, d)
            self.weights = w

    def sample_embeddings(self, g: KnowledgeGraph, rng: np.random.Generator):
        return (glorot_uniform(rng, g.num_nodes, self.dim),
                glorot_uniform(rng, g.num_relations, self.rel_dim))

    def relation_states(self, g: KnowledgeGraph, R0: np.ndarray) -> np.ndarray:
        w = self.weights
        C = relation_cooccurrence(g)
        R1 = np.tanh(R0 @ w["rel_self"] + C @ R0 @ w["rel_nbr"])
        return R1 @ w["rel_to_node"]

    def node_states(self, g: KnowledgeGraph, V0: np.ndarray, Rn: np.ndarray) -> np.ndarray:
        w = self.weights
        t = g.triplets
        N = g.num_nodes
        deg_in = np.bincount(t[:, 2], minlength=N).astype(float)[:, None] if len(t) else np.zeros((N, 1))
        deg_out = np.bincount(t[:, 0], minlength=N).astype(float)[:, None] if len(t) else np.zeros((N, 1))
        V = V0
        for layer in range(self.num_layers):
            agg_in = np.zeros_like(V)
            agg_out = np.zeros_like(V)
            if len(t):
                # messages are modulated elementwise by the relation's state
                np.add.at(agg_in, t[:, 2], V[t[:, 0]] * Rn[t[:, 1]])
                np.add.at(agg_out, t[:, 0], V[t[:, 2]] * Rn[t[:, 1]])
            agg_in = np.divide(agg_in, deg_in, out=np.zeros_like(V), where=deg_in > 0)
            agg_out = np.divide(agg_out, deg_out, out=np.zeros_like(V), where=deg_out > 0)
            V = np.tanh(V @ w[f"self{layer}"] + agg_in @ w[f"in{layer}"] + agg_out @ w[f"out{layer}"])
        return V

    def score_with(self, g: KnowledgeGraph, queries, V0, R0) -> np.ndarray:
        q = np.asarray(queries, dtype=np.int64).reshape(-1, 3)
        V0 = np.asarray(V0, dtype=np.float64)
        R0 = np.asarray(R0, dtype=np.float64)
        if V0.shape != (g.num_nodes, self.dim) or R0.shape != (g.num_relations, self.rel_dim):
            raise ValueError("embedding shapes do not match the graph")
        _check_queries(g, q)
        Rn = self.relation_states(g, R0)
        V = self.node_states(g, V0, Rn)
        return np.einsum("qd,qd,qd->q", V[q[:, 0]], Rn[q[:, 1]], V[q[:, 2]])


def _check_queries(g: KnowledgeGraph, q: np.ndarray) -> None:
    if len(q) and ((q[:, [0, 2]] < 0).any() or (q[:, [0, 2]] >= g.num_nodes).any()
                   or (q[:, 1] < 0).any() or (q[:, 1] >= g.num_relations).any()):
        raise IndexError("query index out of range")


def derive_seed(seed: int, m: int, stream: int = 0) -> int:
    """Seed of draw ``m`` in stream ``stream``."""
    state = np.random.SeedSequence([int(seed), int(stream), int(m)]).generate_state(2, np.uint64)
    return int(state[0])


def positional_scores(scorer: PositionalScorer, g: KnowledgeGraph, queries, draw_seed: int) -> np.ndarray:
    V0, R0 = scorer.sample_embeddings(g, np.random.default_rng(draw_seed))
    return scorer.score_with(g, queries, V0, R0)


def positional_score(scorer: PositionalScorer, g: KnowledgeGraph, query, draw_seed: int) -> float:
    return float(positional_scores(scorer, g, [query], draw_seed)[0])


def permute_embeddings(V0: np.ndarray, R0: np.ndarray, p: PermutationPair):
    """Embedding arrays that follow the labels: row ``phi(i)`` of the result is row ``i`` of ``V0``."""
    V = np.empty_like(V0)
    R = np.empty_like(R0)
    V[p.node_perm] = V0
    R[p.rel_perm] = R0
    return V, R


def draw_matrix(scorer: PositionalScorer, g: KnowledgeGraph, queries, M: int, seed: int,
                stream: int = 0, seeds: Sequence[int] | None = None) -> np.ndarray:
    """(M, num_queries) matrix of individual draws."""
    if seeds is None:
        if M < 1:
            raise ValueError("M must be >= 1")
        seeds = [derive_seed(seed, m, stream) for m in range(M)]
    elif not len(seeds):
        raise ValueError("seeds must be non-empty")
    return np.stack([positional_scores(scorer, g, queries, s) for s in seeds])


def deq_scores(scorer: PositionalScorer, g: KnowledgeGraph, queries, M: int, seed: int,
               stream: int = 0, seeds: Sequence[int] | None = None) -> np.ndarray:
    """Monte Carlo mean over ``M`` draws, summed in draw order."""
    return draw_matrix(scorer, g, queries, M, seed, stream, seeds).mean(axis=0)


def deq_score(scorer: PositionalScorer, g: KnowledgeGraph, query, M: int, seed: int,
              stream: int = 0, seeds: Sequence[int] | None = None) -> float:
    return float(deq_scores(scorer, g, [query], M, seed, stream, seeds)[0])


def invariance_gap(scorer: PositionalScorer, g: KnowledgeGraph, queries,
                   perms: Sequence[PermutationPair], M: int, seed: int,
                   shared_seeds: bool = False) -> float:
    """Largest |deq(g, q) - deq(p(g), p(q))| over queries and permutations.

    The permuted side uses an independent stream unless ``shared_seeds``.
    """
    if not perms:
        raise ValueError("perms must be non-empty")
    q = np.asarray(queries, dtype=np.int64).reshape(-1, 3)
    base = deq_scores(scorer, g, q, M, seed, stream=0)
    gap = 0.0
    for n, p in enumerate(perms):
        other = deq_scores(scorer, apply_permutation(g, p), p.map_triplets(q), M, seed,
                           stream=0 if shared_seeds else n + 1)
        gap = max(gap, float(np.max(np.abs(base - other))))
    return gap


def gap_slope(Ms: Sequence[int], gaps: Sequence[float]) -> float:
    """Least-squares slope of log(gap) against log(M)."""
    return float(np.polyfit(np.log(np.asarray(Ms, float)), np.log(np.asarray(gaps, float)), 1)[0])
