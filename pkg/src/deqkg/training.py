"""Masking, negative sampling, the cross-entropy objective and the training loop."""
from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
import torch

from .datasets import coverage_holdout
from .encoder import ISDEAPlus
from .evalkit import evaluate
from .graph import KnowledgeGraph, PermutationPair, Triplet

log = logging.getLogger(__name__)

EPS = 1e-12


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    n_nd: int = 2
    n_rl: int = 2
    mask_ratio: float = 0.1
    patience: int = 3
    valid_num_neg: int = 50
    seed: int = 0

    def validate(self) -> None:
        if self.n_nd < 0 or self.n_rl < 0 or self.n_nd + self.n_rl < 1:
            raise ValueError("need n_nd + n_rl >= 1 with both non-negative")
        if not 0 < self.mask_ratio < 1:
            raise ValueError("mask_ratio must be in (0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainGraph:
    """One training graph.

    With ``targets`` the observed graph stays fixed and the targets are the
    positives. Without, a fresh share of the observed triplets is masked out
    as positives every epoch. ``reference`` maps a reference labeling onto
    this graph's labeling; random draws are made in the reference frame so a
    relabelled copy of a graph sees the same learning signal.
    """

    observed: KnowledgeGraph
    targets: list[Triplet] | None = None
    valid: list[Triplet] = field(default_factory=list)
    reference: PermutationPair | None = None


@dataclass
class TrainHistory:
    seed: int
    epochs: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    valid_metrics: list[dict | None] = field(default_factory=list)
    times: list[float] = field(default_factory=list)
    best_epoch: int | None = None

    def records(self) -> list[dict]:
        return [
            {"epoch": e, "loss": l, "valid": v, "seconds": t}
            for e, l, v, t in zip(self.epochs, self.losses, self.valid_metrics, self.times)
        ]


# -- masking and negatives -----------------------------------------------------


def _reference_order(triplets: np.ndarray, reference: PermutationPair | None) -> np.ndarray:
    """Indices sorting ``triplets`` by their pre-image in the reference labeling."""
    if reference is None or not len(triplets):
        return np.arange(len(triplets))
    back = reference.inverse().map_triplets(triplets)
    return np.lexsort((back[:, 2], back[:, 1], back[:, 0]))


def self_supervised_mask(
    g: KnowledgeGraph, ratio: float, seed, reference: PermutationPair | None = None
) -> tuple[KnowledgeGraph, list[Triplet]]:
    """Hold out ``round(ratio * |triplets|)`` triplets as training targets.

    Candidates whose removal would leave a node without observed triplets are
    discarded and another draw is taken instead.
    """
    if not 0 < ratio < 1:
        raise ValueError("ratio must be in (0, 1)")
    trip = g.triplets[_reference_order(g.triplets, reference)]
    ordered = [Triplet(*t) for t in trip.tolist()]
    n = int(round(ratio * len(ordered)))
    rng = np.random.default_rng(seed)
    kept, held = coverage_holdout(ordered, n, rng)
    return KnowledgeGraph(kept, g.num_nodes, g.num_relations), held


class Negatives(NamedTuple):
    triplets: np.ndarray   # (n_nd + n_rl, 3), node corruptions first
    collided: np.ndarray   # True where every retry still hit a known positive


def sample_negatives(
    g: KnowledgeGraph,
    positive,
    n_nd: int,
    n_rl: int,
    seed,
    known: set | None = None,
    reference: PermutationPair | None = None,
    max_retries: int = 10,
) -> Negatives:
    """Corrupt the head or tail ``n_nd`` times and the relation ``n_rl`` times.

    ``known`` defaults to the graph's triplets plus the positive itself;
    corruptions landing in it are redrawn up to ``max_retries`` times and then
    kept with ``collided`` set.
    """
    if n_nd < 0 or n_rl < 0:
        raise ValueError("n_nd and n_rl must be non-negative")
    i, k, j = map(int, positive)
    if known is None:
        known = set(g.triplet_set()) | {(i, k, j)}
    rng = np.random.default_rng(seed)
    node_map = reference.node_perm if reference is not None else None
    rel_map = reference.rel_perm if reference is not None else None
    out = np.empty((n_nd + n_rl, 3), dtype=np.int64)
    flags = np.zeros(n_nd + n_rl, dtype=bool)
    for n in range(n_nd + n_rl):
        for attempt in range(max_retries + 1):
            if n < n_nd:
                side = rng.integers(2)
                x = int(rng.integers(g.num_nodes))
                x = int(node_map[x]) if node_map is not None else x
                cand = (x, k, j) if side == 0 else (i, k, x)
            else:
                r = int(rng.integers(g.num_relations))
                r = int(rel_map[r]) if rel_map is not None else r
                cand = (i, r, j)
            if cand not in known:
                break
        else:
            flags[n] = True
        out[n] = cand
    return Negatives(out, flags)


# -- objective -------------------------------------------------------------------


def loss(pos_scores, neg_scores_grouped) -> float:
    """Cross-entropy of positives against the mean log-complement of their negatives."""
    pos = np.asarray(pos_scores, dtype=np.float64).reshape(-1)
    total = 0.0
    if len(neg_scores_grouped) != len(pos):
        raise ValueError("need one negative group per positive")
    for s, group in zip(pos, neg_scores_grouped):
        g = np.asarray(group, dtype=np.float64).reshape(-1)
        if not (0 <= s <= 1) or ((g < 0) | (g > 1)).any():
            raise ValueError("scores must lie in [0, 1]")
        if not len(g):
            raise ValueError("each positive needs at least one negative")
        total -= math.log(max(s, EPS)) + np.log(np.maximum(1 - g, EPS)).mean()
    return float(total)


def loss_torch(pos: torch.Tensor, neg: torch.Tensor) -> torch.Tensor:
    """Same objective on tensors; ``neg`` has shape (P, n_nd + n_rl)."""
    return -(torch.log(pos.clamp(min=EPS)) + torch.log((1 - neg).clamp(min=EPS)).mean(dim=1)).sum()


# -- training loop ----------------------------------------------------------------


def model_score_fn(model: ISDEAPlus):
    """``score_fn(observed, triplets)`` for :func:`deqkg.evalkit.evaluate`, caching prepared graphs."""
    cache: dict[int, tuple] = {}

    def score_fn(g: KnowledgeGraph, triplets) -> np.ndarray:
        key = id(g)
        if key not in cache or cache[key][0] is not g:
            cache.clear()
            cache[key] = (g, model.prepare(g))
        return model.score(cache[key][1], triplets)

    return score_fn


def _as_train_graph(x) -> TrainGraph:
    if isinstance(x, TrainGraph):
        return x
    if isinstance(x, KnowledgeGraph):
        return TrainGraph(x)
    raise TypeError(f"expected KnowledgeGraph or TrainGraph, got {type(x).__name__}")


def _param_norms(model) -> dict[str, float]:
    return {n: float(p.detach().norm()) for n, p in model.named_parameters()}


def train(
    params: ISDEAPlus,
    graphs: Sequence,
    config: TrainConfig = TrainConfig(),
    start_epoch: int = 0,
    copy_params: bool = True,
) -> tuple[ISDEAPlus, TrainHistory]:
    """Fit the encoder on one or more training graphs with Adam.

    Mini-batches from different graphs are interleaved. When any graph has
    validation queries, the latest parameters reaching the best validation
    relation MRR are returned, and training stops once ``patience`` epochs in
    a row fall below that best.
    """
    config.validate()
    tgraphs = [_as_train_graph(x) for x in graphs]
    if not tgraphs:
        raise ValueError("need at least one training graph")
    for tg in tgraphs:
        if len(tg.observed) == 0:
            raise ValueError("training graphs must contain triplets")
    model = copy.deepcopy(params) if copy_params else params
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate,
                           weight_decay=config.weight_decay)
    history = TrainHistory(seed=config.seed)
    has_valid = any(tg.valid for tg in tgraphs)
    best_score, best_state, stale = -math.inf, None, 0
    n_neg = config.n_nd + config.n_rl

    for epoch in range(start_epoch, start_epoch + config.epochs):
        t0 = time.perf_counter()
        model.train()
        plans = []
        for gi, tg in enumerate(tgraphs):
            if tg.targets is not None:
                observed = tg.observed
                tt = np.asarray(tg.targets, dtype=np.int64).reshape(-1, 3)
                targets = [Triplet(*t) for t in tt[_reference_order(tt, tg.reference)].tolist()]
            else:
                observed, targets = self_supervised_mask(
                    tg.observed, config.mask_ratio, [config.seed, epoch, gi, 0], tg.reference)
            known = set(observed.triplet_set()) | set(tg.observed.triplet_set()) | set(targets)
            pg = model.prepare(observed)
            order = np.random.default_rng([config.seed, epoch, gi, 1]).permutation(len(targets))
            batches = [order[s:s + config.batch_size] for s in range(0, len(order), config.batch_size)]
            plans.append((gi, tg, pg, targets, known, batches))

        total, count = 0.0, 0
        n_rounds = max(len(p[5]) for p in plans)
        for b in range(n_rounds):
            for gi, tg, pg, targets, known, batches in plans:
                if b >= len(batches):
                    continue
                idx = batches[b]
                pos = np.array([targets[p] for p in idx], dtype=np.int64)
                negs = np.concatenate([
                    sample_negatives(pg.graph, targets[p], config.n_nd, config.n_rl,
                                     [config.seed, epoch, gi, 2, int(p)], known=known,
                                     reference=tg.reference).triplets
                    for p in idx
                ])
                X = model.embed(pg)
                s_pos = model(pg, pos, X=X)
                s_neg = model(pg, negs, X=X).view(len(idx), n_neg)
                batch_loss = loss_torch(s_pos, s_neg)
                if not torch.isfinite(batch_loss):
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch}, batch {b} of graph {gi}; "
                        f"parameter norms: {_param_norms(model)}"
                    )
                opt.zero_grad()
                (batch_loss / len(idx)).backward()
                opt.step()
                total += float(batch_loss.detach())
                count += len(idx)

        epoch_loss = total / max(count, 1)
        valid = None
        if has_valid:
            model.eval()
            valid = _validate(model, tgraphs, config)
            # ties go to the later, longer-trained checkpoint
            score = valid["relation_MRR"]
            if score >= best_score:
                best_score, stale = score, 0
                best_state = copy.deepcopy(model.state_dict())
                history.best_epoch = epoch
            else:
                stale += 1
        history.epochs.append(epoch)
        history.losses.append(epoch_loss)
        history.valid_metrics.append(valid)
        history.times.append(time.perf_counter() - t0)
        log.info("epoch %d loss %.6f valid %s", epoch, epoch_loss, valid)
        if has_valid and stale >= config.patience:
            break

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return model, history


def _validate(model: ISDEAPlus, tgraphs: list[TrainGraph], config: TrainConfig) -> dict:
    score_fn = model_score_fn(model)
    mrr, n = 0.0, 0
    node_mrr = 0.0
    for tg in tgraphs:
        if not tg.valid:
            continue
        rep = evaluate(score_fn, tg.observed, tg.valid, task="relation",
                       num_neg=config.valid_num_neg, seed=config.seed)
        rep_n = evaluate(score_fn, tg.observed, tg.valid, task="node",
                         num_neg=config.valid_num_neg, seed=config.seed)
        mrr += rep.metrics["MRR"] * rep.num_queries
        node_mrr += rep_n.metrics["MRR"] * rep_n.num_queries
        n += rep.num_queries
    return {"relation_MRR": mrr / n, "node_MRR": node_mrr / n}
