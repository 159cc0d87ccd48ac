"""GCN message passing, GAT mention pooling and base/graph embedding fusion."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

FUSION_METHODS = ("none", "mean", "max", "tanh", "times")

ACTIVATIONS = {
    "identity": lambda x: x,
    "relu": torch.relu,
    "tanh": torch.tanh,
    "sigmoid": torch.sigmoid,
    "leaky_relu": F.leaky_relu,
    "elu": F.elu,
}


class DimensionMismatch(ValueError):
    pass


class EmptyMentionSet(ValueError):
    pass


@dataclass
class GCNLayerParams:
    weight: torch.Tensor  # (d_in, d_out)
    activation: str = "relu"


def _adjacency_tensor(graph) -> torch.Tensor:
    adj = getattr(graph, "adjacency", graph)
    return torch.as_tensor(np.asarray(adj) if not torch.is_tensor(adj) else adj)


def edges_with_self_loops(graph) -> tuple[torch.Tensor, torch.Tensor, int]:
    """Directed edge arrays ``(targets, sources)`` of the graph, self-loops added."""
    adj = _adjacency_tensor(graph) != 0
    n = adj.shape[0]
    adj = adj | torch.eye(n, dtype=torch.bool)
    targets, sources = adj.nonzero(as_tuple=True)
    return targets, sources, n


def propagate(H: torch.Tensor, targets: torch.Tensor, sources: torch.Tensor, n: int) -> torch.Tensor:
    """Sum over neighbours ``u`` of ``H[u] / sqrt(deg(v) deg(u))`` for every node ``v``."""
    deg = torch.zeros(n, dtype=H.dtype, device=H.device).index_add_(
        0, targets.to(H.device), torch.ones(targets.shape[0], dtype=H.dtype, device=H.device)
    )
    inv_sqrt = deg.pow(-0.5)
    coef = (inv_sqrt[targets] * inv_sqrt[sources]).unsqueeze(1)
    out = torch.zeros((n, H.shape[1]), dtype=H.dtype, device=H.device)
    return out.index_add_(0, targets.to(H.device), coef * H[sources])


def gcn_layer(H: torch.Tensor, graph, params: GCNLayerParams, edges=None) -> torch.Tensor:
    """One graph convolution: ``sigma(sum_u W h_u / c_vu)`` with symmetric ``c_vu``.

    ``graph`` is a ``DocumentGraph`` or a square adjacency; self-loops are
    added when absent. ``edges`` may carry a precomputed
    :func:`edges_with_self_loops` result.
    """
    targets, sources, n = edges if edges is not None else edges_with_self_loops(graph)
    W = params.weight
    if H.shape[0] != n:
        raise DimensionMismatch(f"{H.shape[0]} feature rows for {n} nodes")
    if H.shape[1] != W.shape[0]:
        raise DimensionMismatch(f"features have dim {H.shape[1]}, weight expects {W.shape[0]}")
    return ACTIVATIONS[params.activation](propagate(H @ W, targets, sources, n))


class GCN(nn.Module):
    """Stack of bias-free GCN layers; the activation sits between layers."""

    def __init__(self, dim: int, num_layers: int = 2, activation: str = "relu"):
        super().__init__()
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.layers = nn.ModuleList(nn.Linear(dim, dim, bias=False) for _ in range(num_layers))
        self.activation = activation

    def forward(self, H: torch.Tensor, edges) -> torch.Tensor:
        for i, lin in enumerate(self.layers):
            act = self.activation if i + 1 < len(self.layers) else "identity"
            H = gcn_layer(H, None, GCNLayerParams(lin.weight.T, act), edges=edges)
        return H


@dataclass
class GATParams:
    value: torch.Tensor  # (d, d) shared value transform
    score: torch.Tensor  # (2d, d_att) scoring projection of [query; mention]
    attn: torch.Tensor  # (d_att,)
    negative_slope: float = 0.2


def gat_aggregate(rows: torch.Tensor, params: GATParams, return_weights: bool = False):
    """Attention-pool an entity's mention rows into one vector.

    The entity acts as a virtual node joined to each mention; its query is
    the mention mean. Scores follow the dynamic-attention form
    ``a . LeakyReLU(S [q; h_i])`` and the output is ``sum_i alpha_i V h_i``.
    """
    if rows.ndim != 2 or rows.shape[0] == 0:
        raise EmptyMentionSet("an entity needs at least one mention row")
    query = rows.mean(dim=0, keepdim=True).expand_as(rows)
    hidden = F.leaky_relu(torch.cat([query, rows], dim=1) @ params.score, params.negative_slope)
    weights = torch.softmax(hidden @ params.attn, dim=0)
    out = weights @ (rows @ params.value)
    return (out, weights) if return_weights else out


class GATAggregator(nn.Module):
    def __init__(self, dim: int, heads: int = 1, att_dim: Optional[int] = None):
        super().__init__()
        att_dim = att_dim or dim
        self.value = nn.ModuleList(nn.Linear(dim, dim, bias=False) for _ in range(heads))
        self.score = nn.ModuleList(nn.Linear(2 * dim, att_dim, bias=False) for _ in range(heads))
        self.attn = nn.ParameterList(nn.Parameter(torch.randn(att_dim) / att_dim**0.5) for _ in range(heads))

    def params(self, head: int = 0) -> GATParams:
        return GATParams(self.value[head].weight.T, self.score[head].weight.T, self.attn[head])

    def forward(self, rows: torch.Tensor) -> torch.Tensor:
        outs = [gat_aggregate(rows, self.params(h)) for h in range(len(self.value))]
        return outs[0] if len(outs) == 1 else torch.stack(outs).mean(dim=0)


Array = Union[np.ndarray, torch.Tensor]


def fuse(h_base: Array, h_gnn: Array, method: str) -> Array:
    """Combine an entity's encoder embedding with its graph embedding elementwise."""
    if method not in FUSION_METHODS:
        raise ValueError(f"unknown fusion method {method!r}")
    if tuple(h_base.shape) != tuple(h_gnn.shape):
        raise DimensionMismatch(f"cannot fuse shapes {tuple(h_base.shape)} and {tuple(h_gnn.shape)}")
    if method == "none":
        return h_base
    if method == "mean":
        return (h_base + h_gnn) / 2
    if method == "times":
        return h_base * h_gnn
    if torch.is_tensor(h_base):
        return torch.maximum(h_base, h_gnn) if method == "max" else torch.tanh(h_base + h_gnn)
    return np.maximum(h_base, h_gnn) if method == "max" else np.tanh(h_base + h_gnn)


@dataclass
class EntityEmbeddingSet:
    base: torch.Tensor  # (num_entities, d)
    graph: Optional[torch.Tensor]  # None when the graph stage is bypassed
    fused: torch.Tensor


class GraphRefiner(nn.Module):
    """Encoder node rows -> fused per-entity vectors for one mini-document."""

    def __init__(
        self,
        dim: int,
        fusion: str = "none",
        gcn_layers: int = 2,
        gcn_activation: str = "relu",
        gat_heads: int = 1,
        use_gcn: bool = True,
        use_gat: bool = True,
    ):
        super().__init__()
        if fusion not in FUSION_METHODS:
            raise ValueError(f"unknown fusion method {fusion!r}")
        self.fusion = fusion
        self.use_gcn = use_gcn and gcn_layers > 0
        self.use_gat = use_gat
        self.gcn = GCN(dim, gcn_layers, gcn_activation) if self.use_gcn else None
        self.gat = GATAggregator(dim, gat_heads) if use_gat else None

    def forward(
        self,
        node_rows: torch.Tensor,
        edges,
        base_index: Sequence[Sequence[int]],
        mention_index: Sequence[Sequence[int]],
    ) -> EntityEmbeddingSet:
        """``base_index[e]``: node ids of entity ``e``'s annotated span;
        ``mention_index[e]``: all its mention-word node ids."""
        base = torch.stack([node_rows[list(ix)].mean(dim=0) for ix in base_index])
        if self.fusion == "none":
            return EntityEmbeddingSet(base=base, graph=None, fused=base)
        refined = self.gcn(node_rows, edges) if self.gcn is not None else node_rows
        graph_rows = []
        for ix in mention_index:
            rows = refined[list(ix)]
            graph_rows.append(self.gat(rows) if self.gat is not None else rows.mean(dim=0))
        graph = torch.stack(graph_rows)
        return EntityEmbeddingSet(base=base, graph=graph, fused=fuse(base, graph, self.fusion))
