"""Ranking evaluation against sampled negatives, random baselines and report files.

Each positive is ranked against its negatives. Ties are resolved in
expectation over a uniformly random tie-break: the reported rank is the mean
rank of the tie group, and Hits@k / reciprocal rank are averaged over the
group's positions. A constant scorer therefore scores exactly the random
baseline.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .graph import KnowledgeGraph

REPORT_VERSION = 1
DEFAULT_KS = (1, 5, 10)
TASKS = ("node", "relation")

ScoreFn = Callable[[KnowledgeGraph, np.ndarray], np.ndarray]


class ReportFormatError(ValueError):
    pass


def harmonic(n: int) -> float:
    return float(sum(Fraction(1, i) for i in range(1, n + 1)))


def random_baseline(num_neg: int, ks: Sequence[int] = DEFAULT_KS) -> dict[str, float]:
    """Expected metrics of a uniformly random scorer with ``num_neg`` negatives."""
    if num_neg < 0:
        raise ValueError("num_neg must be >= 0")
    n = num_neg + 1
    out = {"MRR": harmonic(n) / n}
    for k in ks:
        out[f"Hits@{k}"] = min(k, n) / n
    return out


def tie_metrics(greater: int, ties: int, ks: Sequence[int]) -> tuple[float, float, dict[int, float]]:
    """(mean rank, expected reciprocal rank, expected Hits@k) for one positive.

    The positive occupies a uniformly random position in ``greater + 1 ..
    greater + 1 + ties``.
    """
    lo, hi = greater + 1, greater + 1 + ties
    size = ties + 1
    mean_rank = (lo + hi) / 2
    rr = sum(1.0 / r for r in range(lo, hi + 1)) / size
    hits = {k: max(0, min(k, hi) - lo + 1) / size for k in ks}
    return mean_rank, rr, hits


@dataclass
class QueryRank:
    triplet: tuple[int, int, int]
    greater: int
    ties: int
    num_negatives: int


@dataclass
class EvalReport:
    task: str
    num_negatives: int
    seed: int
    ks: list[int]
    metrics: dict[str, float]
    per_query: list[QueryRank]
    protocol: dict = field(default_factory=dict)

    @property
    def num_queries(self) -> int:
        return len(self.per_query)

    @property
    def mean_rank(self) -> float:
        return float(np.mean([(2 * q.greater + 2 + q.ties) / 2 for q in self.per_query]))

    def standard_errors(self) -> dict[str, float]:
        n = len(self.per_query)
        rr, hits = _per_query_values(self.per_query, self.ks)
        out = {"MRR": float(np.std(rr, ddof=1) / np.sqrt(n)) if n > 1 else float("nan")}
        for k in self.ks:
            out[f"Hits@{k}"] = float(np.std(hits[k], ddof=1) / np.sqrt(n)) if n > 1 else float("nan")
        return out


def _per_query_values(per_query, ks):
    rr = np.empty(len(per_query))
    hits = {k: np.empty(len(per_query)) for k in ks}
    for n, q in enumerate(per_query):
        _, r, h = tie_metrics(q.greater, q.ties, ks)
        rr[n] = r
        for k in ks:
            hits[k][n] = h[k]
    return rr, hits


def aggregate(per_query: Sequence[QueryRank], ks: Sequence[int]) -> dict[str, float]:
    if not per_query:
        raise ValueError("no queries to aggregate")
    rr, hits = _per_query_values(per_query, ks)
    out = {"MRR": float(rr.mean())}
    for k in ks:
        out[f"Hits@{k}"] = float(hits[k].mean())
    return out


def _query_rng(seed: int, task: str, side: str, triplet) -> np.random.Generator:
    # keyed by content so results do not depend on query order
    key = f"{seed}|{task}|{side}|{triplet[0]}|{triplet[1]}|{triplet[2]}".encode()
    digest = hashlib.blake2b(key, digest_size=16).digest()
    return np.random.default_rng(np.frombuffer(digest, dtype=np.uint32))


def make_negatives(
    query,
    num_nodes: int,
    num_relations: int,
    task: str,
    num_neg: int,
    seed: int,
    corrupt: str = "tail",
    relation_protocol: str = "sample",
    known: set | None = None,
) -> np.ndarray:
    """Negatives for one positive.

    Node task: ``num_neg`` distinct replacement tails (or heads), fewer when
    the graph is too small. Relation task: ``num_neg`` replacement relations
    drawn with replacement from the other relations, or every other relation
    once under ``relation_protocol="all"``. Known positives are dropped when
    ``known`` is given (filtered mode).
    """
    i, k, j = map(int, query)
    rng = _query_rng(seed, task, corrupt, (i, k, j))
    if task == "node":
        true_node = j if corrupt == "tail" else i
        pool = np.array([v for v in range(num_nodes) if v != true_node], dtype=np.int64)
        if known is not None:
            pool = np.array(
                [v for v in pool.tolist()
                 if ((i, k, v) if corrupt == "tail" else (v, k, j)) not in known],
                dtype=np.int64,
            )
        n = min(num_neg, len(pool))
        picked = rng.choice(pool, size=n, replace=False) if n else np.zeros(0, np.int64)
        neg = np.empty((n, 3), dtype=np.int64)
        neg[:, 0], neg[:, 1], neg[:, 2] = i, k, j
        neg[:, 2 if corrupt == "tail" else 0] = picked
        return neg
    if task == "relation":
        pool = np.array([r for r in range(num_relations) if r != k], dtype=np.int64)
        if known is not None:
            pool = np.array([r for r in pool.tolist() if (i, r, j) not in known], dtype=np.int64)
        if relation_protocol == "all":
            picked = pool
        elif len(pool):
            picked = rng.choice(pool, size=num_neg, replace=True)
        else:
            picked = np.zeros(0, np.int64)
        neg = np.empty((len(picked), 3), dtype=np.int64)
        neg[:, 0], neg[:, 1], neg[:, 2] = i, picked, j
        return neg
    raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")


def evaluate(
    score_fn: ScoreFn,
    observed: KnowledgeGraph,
    queries,
    task: str = "node",
    num_neg: int = 50,
    seed: int = 0,
    ks: Sequence[int] = DEFAULT_KS,
    corrupt: str = "tail",
    relation_protocol: str = "sample",
    filtered: bool = False,
    num_relations: int | None = None,
) -> EvalReport:
    """Rank every query against its negatives with ``score_fn(observed, triplets)``."""
    q = np.asarray(queries, dtype=np.int64).reshape(-1, 3)
    if not len(q):
        raise ValueError("queries must be non-empty")
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    R = num_relations or observed.num_relations
    known = None
    if filtered:
        known = set(observed.triplet_set()) | {tuple(t) for t in q.tolist()}
    # deterministic order by content
    q = q[np.lexsort((q[:, 2], q[:, 1], q[:, 0]))]
    blocks, owners = [], []
    for n, t in enumerate(q):
        neg = make_negatives(t, observed.num_nodes, R, task, num_neg, seed,
                             corrupt=corrupt, relation_protocol=relation_protocol, known=known)
        blocks.append(t[None, :])
        blocks.append(neg)
        owners.append(len(neg))
    batch = np.concatenate(blocks)
    scores = np.asarray(score_fn(observed, batch), dtype=np.float64).reshape(-1)
    if len(scores) != len(batch):
        raise ValueError("score_fn returned the wrong number of scores")
    per_query = []
    pos = 0
    for t, n_neg in zip(q.tolist(), owners):
        s_pos = scores[pos]
        s_neg = scores[pos + 1: pos + 1 + n_neg]
        pos += 1 + n_neg
        per_query.append(QueryRank(tuple(t), int((s_neg > s_pos).sum()),
                                   int((s_neg == s_pos).sum()), n_neg))
    return EvalReport(
        task=task, num_negatives=num_neg, seed=seed, ks=list(ks),
        metrics=aggregate(per_query, ks), per_query=per_query,
        protocol={"corrupt": corrupt, "relation_protocol": relation_protocol, "filtered": filtered,
                  "effective_negatives_min": int(min(owners)),
                  "effective_negatives_max": int(max(owners))},
    )


def merge_reports(a: EvalReport, b: EvalReport) -> EvalReport:
    if a.task != b.task or a.ks != b.ks:
        raise ValueError("reports must share task and k list")
    seen = {}
    for qr in a.per_query + b.per_query:
        seen[tuple(qr.triplet)] = qr
    per_query = [seen[k] for k in sorted(seen)]
    return EvalReport(a.task, a.num_negatives, a.seed, list(a.ks), aggregate(per_query, a.ks),
                      per_query, dict(a.protocol, merged=True))


# -- report files --------------------------------------------------------------

_REQUIRED = ("version", "task", "num_negatives", "seed", "ks", "metrics", "per_query", "protocol")


def report_to_dict(report: EvalReport) -> dict:
    return {
        "version": REPORT_VERSION,
        "task": report.task,
        "num_negatives": report.num_negatives,
        "seed": report.seed,
        "ks": list(report.ks),
        "num_queries": report.num_queries,
        "metrics": report.metrics,
        "protocol": report.protocol,
        "per_query": [[*q.triplet, q.greater, q.ties, q.num_negatives] for q in report.per_query],
    }


def report_write(report: EvalReport, path, **extra) -> None:
    d = report_to_dict(report)
    d.update(extra)
    Path(path).write_text(json.dumps(d, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def report_read(path) -> EvalReport:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ReportFormatError(f"{path}: not valid JSON ({exc})") from exc
    for key in _REQUIRED:
        if key not in d:
            raise ReportFormatError(f"{path}: missing field {key!r}")
    if d["version"] != REPORT_VERSION:
        raise ReportFormatError(f"{path}: unsupported report version {d['version']}")
    per_query = []
    for row in d["per_query"]:
        if len(row) != 6:
            raise ReportFormatError(f"{path}: per_query rows need 6 entries")
        h, r, t, g, ties, n = row
        per_query.append(QueryRank((h, r, t), g, ties, n))
    return EvalReport(d["task"], d["num_negatives"], d["seed"], list(d["ks"]),
                      dict(d["metrics"]), per_query, dict(d["protocol"]))
