"""Doubly inductive link prediction on knowledge graphs.

Nodes and relation types at test time may both be unseen during training.
The package provides a doubly permutation-invariant encoder, a Monte Carlo
wrapper for random positional scorers, dataset tools and ranking evaluation.
"""
from .datasets import (
    FD2_CLAUSES,
    DatasetBundle,
    UQERClause,
    fd2_bundles,
    fd2_graph,
    forest_fire_sample,
    generate_fd2,
    sample_subgraph,
    split_dataset,
    topic_split,
    uqer_derive,
    uqer_derive_all,
)
from .deq import RandomFeatureScorer, deq_score, invariance_gap, positional_score
from .encoder import EncoderConfig, ISDEAPlus, init_encoder, load_checkpoint, save_checkpoint, score_triplets
from .evalkit import EvalReport, evaluate, random_baseline
from .features import distance_features, shortest_distance
from .graph import (
    KnowledgeGraph,
    PermutationPair,
    Triplet,
    apply_permutation,
    augment_inverses,
    build_graph,
    random_permutation_pair,
    read_triplets,
    write_triplets,
)
from .training import TrainConfig, TrainGraph, model_score_fn, train
from .verification import check_double_invariance, check_equivariant_construction, expressivity_counterexample

__version__ = "0.1.0"

__all__ = [
    "FD2_CLAUSES", "DatasetBundle", "UQERClause", "fd2_bundles", "fd2_graph", "forest_fire_sample", "generate_fd2",
    "sample_subgraph", "split_dataset", "topic_split", "uqer_derive", "uqer_derive_all",
    "RandomFeatureScorer", "deq_score", "invariance_gap", "positional_score",
    "EncoderConfig", "ISDEAPlus", "init_encoder", "load_checkpoint", "save_checkpoint", "score_triplets",
    "EvalReport", "evaluate", "random_baseline",
    "distance_features", "shortest_distance",
    "KnowledgeGraph", "PermutationPair", "Triplet", "apply_permutation", "augment_inverses", "build_graph",
    "random_permutation_pair", "read_triplets", "write_triplets",
    "TrainConfig", "TrainGraph", "model_score_fn", "train",
    "check_double_invariance", "check_equivariant_construction", "expressivity_counterexample",
]
