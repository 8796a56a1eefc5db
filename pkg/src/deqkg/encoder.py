"""ISDEA+ encoder: relation-vs-complement channels, linear propagation, MLP combination.

For every relation ``k`` and node ``i`` the encoder keeps two channel vectors.
The first layer aggregates in-neighbours through relation ``k`` (channel one)
and through every other relation (channel two). Later layers propagate both
channels over the whole graph with no nonlinearity in between. The per-layer
outputs are concatenated and combined as

    X[k, i] = MLP1(h[k, i]) + MLP2(h_not[k, i])

A triplet (i, k, j) is scored by a small head on X[k, i], X[k, j] and the two
directed shortest-path distances between i and j.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .features import DEFAULT_CAP, DistanceTable, encode_distances
from .graph import KnowledgeGraph, augment_inverses

CHECKPOINT_VERSION = 1
AGGREGATIONS = ("mean", "sum", "max")


class EncoderConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 2
    hidden_dim: int = 32
    aggregation: str = "mean"
    use_distance: bool = True
    distance_cap: int = DEFAULT_CAP
    mlp_hidden_dims: tuple[int, ...] = (32,)
    augment_inverses: bool = True
    dtype: str = "float64"
    seed: int = 0

    def validate(self) -> None:
        if self.num_layers < 1:
            raise EncoderConfigError("num_layers must be >= 1")
        if self.hidden_dim < 1:
            raise EncoderConfigError("hidden_dim must be >= 1")
        if any(h < 1 for h in self.mlp_hidden_dims):
            raise EncoderConfigError("mlp_hidden_dims entries must be >= 1")
        if self.aggregation not in AGGREGATIONS:
            raise EncoderConfigError(f"aggregation must be one of {AGGREGATIONS}")
        if self.distance_cap < 1:
            raise EncoderConfigError("distance_cap must be >= 1")
        if self.dtype not in ("float64", "float32"):
            raise EncoderConfigError("dtype must be float64 or float32")

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32

    @property
    def concat_dim(self) -> int:
        # h^(0) is the 1-d all-ones vector
        return 1 + self.num_layers * self.hidden_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mlp_hidden_dims"] = list(self.mlp_hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        d = dict(d)
        if "mlp_hidden_dims" in d:
            d["mlp_hidden_dims"] = tuple(d["mlp_hidden_dims"])
        return cls(**d)


def _glorot_(w: torch.Tensor, gen: torch.Generator) -> None:
    fan_out, fan_in = w.shape
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    with torch.no_grad():
        w.uniform_(-limit, limit, generator=gen)


class PropagationLayer(nn.Module):
    """h' = W_self h + W_nbr AGG(neighbour h), no bias."""

    def __init__(self, d_in: int, d_out: int):
        super().__init__()
        self.self_weight = nn.Linear(d_in, d_out, bias=False)
        self.nbr_weight = nn.Linear(d_in, d_out, bias=False)

    def forward(self, h: torch.Tensor, agg: torch.Tensor) -> torch.Tensor:
        return self.self_weight(h) + self.nbr_weight(agg)


def _mlp(d_in: int, hidden: Sequence[int], d_out: int) -> nn.Sequential:
    layers: list[nn.Module] = []
    prev = d_in
    for h in hidden:
        layers += [nn.Linear(prev, h), nn.ReLU()]
        prev = h
    layers.append(nn.Linear(prev, d_out))
    return nn.Sequential(*layers)


@dataclass
class PreparedGraph:
    """Tensors derived from one observed graph, reusable across batches."""

    graph: KnowledgeGraph
    num_channels: int
    layer0_rel: torch.Tensor        # (C, N, 1) AGG over N_k(i) of the ones vector
    layer0_comp: torch.Tensor       # (C, N, 1) AGG over the union of N_k'(i), k' != k
    union_src: torch.Tensor         # deduplicated union edges j -> i
    union_dst: torch.Tensor
    union_deg: torch.Tensor         # (N,) in-degree in the union graph
    distances: DistanceTable


def _agg_of_ones(count: np.ndarray, how: str) -> np.ndarray:
    if how == "sum":
        return count.astype(np.float64)
    return (count > 0).astype(np.float64)


def prepare_graph(g: KnowledgeGraph, config: EncoderConfig) -> PreparedGraph:
    msg_graph = augment_inverses(g) if config.augment_inverses else g
    C, N = msg_graph.num_relations, msg_graph.num_nodes
    t = msg_graph.triplets
    rel_count = np.zeros((C, N), dtype=np.int64)
    only_via = np.zeros((C, N), dtype=np.int64)
    if len(t):
        np.add.at(rel_count, (t[:, 1], t[:, 2]), 1)
        pairs, inv, mult = np.unique(t[:, [0, 2]], axis=0, return_inverse=True, return_counts=True)
        inv = inv.reshape(-1)
        single = mult[inv] == 1
        np.add.at(only_via, (t[single, 1], t[single, 2]), 1)
    else:
        pairs = np.zeros((0, 2), dtype=np.int64)
    union_deg = np.bincount(pairs[:, 1], minlength=N) if len(pairs) else np.zeros(N, np.int64)
    comp_count = union_deg[None, :] - only_via
    dt = config.torch_dtype
    return PreparedGraph(
        graph=g,
        num_channels=C,
        layer0_rel=torch.tensor(_agg_of_ones(rel_count, config.aggregation), dtype=dt)[..., None],
        layer0_comp=torch.tensor(_agg_of_ones(comp_count, config.aggregation), dtype=dt)[..., None],
        union_src=torch.tensor(pairs[:, 0], dtype=torch.long),
        union_dst=torch.tensor(pairs[:, 1], dtype=torch.long),
        union_deg=torch.tensor(union_deg, dtype=dt),
        distances=DistanceTable(g, config.distance_cap),
    )


@dataclass
class NodeRelEmbeddings:
    """Per (relation, node) channel concatenations and combined embeddings."""

    h_rel: np.ndarray    # (C, N, 1 + T*d)
    h_comp: np.ndarray   # (C, N, 1 + T*d)
    X: np.ndarray        # (C, N, d)


class ISDEAPlus(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        config.validate()
        self.config = config
        d, T = config.hidden_dim, config.num_layers
        dims = [1] + [d] * T
        self.gnn1 = nn.ModuleList(PropagationLayer(dims[t], dims[t + 1]) for t in range(T))
        self.gnn2 = nn.ModuleList(PropagationLayer(dims[t], dims[t + 1]) for t in range(T))
        self.mlp1 = _mlp(config.concat_dim, config.mlp_hidden_dims, d)
        self.mlp2 = _mlp(config.concat_dim, config.mlp_hidden_dims, d)
        head_in = 2 * d * (2 if config.augment_inverses else 1) + (2 if config.use_distance else 0)
        self.head = nn.Sequential(nn.Linear(head_in, d), nn.ReLU(), nn.Linear(d, 1))
        self.to(config.torch_dtype)
        gen = torch.Generator().manual_seed(int(config.seed))
        for name, p in self.named_parameters():
            if p.ndim == 2:
                _glorot_(p, gen)
            else:
                nn.init.zeros_(p)

    def prepare(self, g: KnowledgeGraph) -> PreparedGraph:
        return prepare_graph(g, self.config)

    def _aggregate(self, h: torch.Tensor, pg: PreparedGraph) -> torch.Tensor:
        C, N, d = h.shape
        msgs = h[:, pg.union_src, :]
        how = self.config.aggregation
        if how == "max":
            idx = pg.union_dst.view(1, -1, 1).expand(C, -1, d)
            out = torch.zeros_like(h).scatter_reduce(1, idx, msgs, reduce="amax", include_self=False)
            return out
        out = torch.zeros_like(h).index_add(1, pg.union_dst, msgs)
        if how == "mean":
            out = out / pg.union_deg.clamp(min=1.0).view(1, N, 1)
        return out

    def channels(self, pg: PreparedGraph) -> tuple[torch.Tensor, torch.Tensor]:
        """Concatenated layer outputs (C, N, 1 + T*d) for both channels."""
        C, N = pg.num_channels, pg.graph.num_nodes
        ones = torch.ones((C, N, 1), dtype=self.config.torch_dtype)
        h1 = self.gnn1[0](ones, pg.layer0_rel)
        h2 = self.gnn2[0](ones, pg.layer0_comp)
        outs1, outs2 = [ones, h1], [ones, h2]
        for t in range(1, self.config.num_layers):
            h1 = self.gnn1[t](h1, self._aggregate(h1, pg))
            h2 = self.gnn2[t](h2, self._aggregate(h2, pg))
            outs1.append(h1)
            outs2.append(h2)
        return torch.cat(outs1, dim=-1), torch.cat(outs2, dim=-1)

    def embed(self, pg: PreparedGraph) -> torch.Tensor:
        h_rel, h_comp = self.channels(pg)
        return self.mlp1(h_rel) + self.mlp2(h_comp)

    def triplet_features(
        self, pg: PreparedGraph, queries, X: torch.Tensor | None = None, distance_override=None
    ) -> torch.Tensor:
        q = torch.as_tensor(np.asarray(queries, dtype=np.int64).reshape(-1, 3))
        if X is None:
            X = self.embed(pg)
        i, k, j = q[:, 0], q[:, 1], q[:, 2]
        parts = [X[k, i], X[k, j]]
        if self.config.augment_inverses:
            R = pg.graph.num_relations
            parts += [X[k + R, i], X[k + R, j]]
        if self.config.use_distance:
            if distance_override is not None:
                dist = np.asarray(distance_override, dtype=np.float64).reshape(-1, 2)
            else:
                raw = pg.distances.features(q.numpy())
                dist = encode_distances(raw, self.config.distance_cap)
            parts.append(torch.tensor(dist, dtype=X.dtype))
        return torch.cat(parts, dim=-1)

    def forward(self, pg: PreparedGraph, queries, X: torch.Tensor | None = None,
                distance_override=None) -> torch.Tensor:
        feats = self.triplet_features(pg, queries, X=X, distance_override=distance_override)
        return torch.sigmoid(self.head(feats)).squeeze(-1)

    def score(self, g: KnowledgeGraph | PreparedGraph, queries) -> np.ndarray:
        pg = g if isinstance(g, PreparedGraph) else self.prepare(g)
        with torch.no_grad():
            return self.forward(pg, queries).numpy().astype(np.float64)

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def init_encoder(config: EncoderConfig) -> ISDEAPlus:
    return ISDEAPlus(config)


def encode_nodes(params: ISDEAPlus, g: KnowledgeGraph) -> NodeRelEmbeddings:
    pg = params.prepare(g)
    with torch.no_grad():
        h_rel, h_comp = params.channels(pg)
        X = params.mlp1(h_rel) + params.mlp2(h_comp)
    return NodeRelEmbeddings(h_rel.numpy(), h_comp.numpy(), X.numpy())


def score_triplets(params: ISDEAPlus, g: KnowledgeGraph, queries) -> np.ndarray:
    return params.score(g, queries)


# -- checkpoints -------------------------------------------------------------


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: ISDEAPlus, path, **meta) -> None:
    header = {
        "version": CHECKPOINT_VERSION,
        "format": "deqkg-isdea-plus",
        "config": model.config.to_dict(),
        "seed": model.config.seed,
        **meta,
    }
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    arrays["__meta__"] = np.array(json.dumps(header, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[ISDEAPlus, dict]:
    with np.load(Path(path), allow_pickle=False) as data:
        if "__meta__" not in data:
            raise CheckpointError(f"{path}: missing metadata record")
        meta = json.loads(str(data["__meta__"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        model = ISDEAPlus(EncoderConfig.from_dict(meta["config"]))
        state = {k[len("param/"):]: torch.from_numpy(data[k].copy())
                 for k in data.files if k.startswith("param/")}
    missing = set(model.state_dict()) - set(state)
    if missing:
        raise CheckpointError(f"{path}: missing parameters {sorted(missing)}")
    model.load_state_dict(state)
    return model, meta
