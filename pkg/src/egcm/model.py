"""Edge-feature GraphSAGE encoder with a softmax edge classifier.

Layer k computes, for every node v,

    h_N(v) = mean over incident edges (u, v) of  [h_u^{k-1} || e_uv]
    h_v^k  = relu(W_k [h_v^{k-1} || h_N(v)] + b_k)

with dropout between layers, and edges are embedded as [z_u || z_v] in
stored (src, dst) order. Raw input edge features are used at every layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numcore as nc
from .graph import MessageIndex, TrafficGraph, message_index
from .numcore import Tensor


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 2
    hidden_dim: int = 128
    dropout: float = 0.2
    aggregator: str = "mean"
    num_classes: int = 2
    fanout: int | None = None

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if self.hidden_dim < 1:
            raise ValueError("hidden_dim must be >= 1")
        if self.aggregator != "mean":
            raise ValueError(f"unsupported aggregator {self.aggregator!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")


@dataclass(frozen=True, eq=False)
class ParameterSet:
    """Named trainable arrays in a fixed order.

    Layer k holds ``layer{k}.weight`` of shape ``(in_k, hidden)`` and
    ``layer{k}.bias``; the classifier maps ``2 * hidden`` to the class count.
    """

    names: tuple[str, ...]
    arrays: tuple[np.ndarray, ...]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[self.names.index(name)]

    def __len__(self) -> int:
        return len(self.arrays)

    def replace_arrays(self, arrays: Sequence[np.ndarray]) -> "ParameterSet":
        if [a.shape for a in arrays] != [a.shape for a in self.arrays]:
            raise nc.ShapeError("parameter shapes changed")
        return ParameterSet(self.names, tuple(np.asarray(a, dtype=np.float64) for a in arrays))

    def copy(self) -> "ParameterSet":
        return ParameterSet(self.names, tuple(a.copy() for a in self.arrays))

    @property
    def size(self) -> int:
        return int(sum(a.size for a in self.arrays))


def layer_shapes(config: ModelConfig, edge_dim: int, node_dim: int | None = None) -> list[tuple[str, tuple[int, ...]]]:
    node_dim = edge_dim if node_dim is None else node_dim
    h = config.hidden_dim
    shapes = []
    prev = node_dim
    for k in range(1, config.num_layers + 1):
        fan_in = prev + prev + edge_dim
        shapes.append((f"layer{k}.weight", (fan_in, h)))
        shapes.append((f"layer{k}.bias", (h,)))
        prev = h
    shapes.append(("classifier.weight", (2 * h, config.num_classes)))
    shapes.append(("classifier.bias", (config.num_classes,)))
    return shapes


def init_params(config: ModelConfig, edge_dim: int, seed: int = 0, node_dim: int | None = None) -> ParameterSet:
    """Glorot-uniform weights and zero biases from a seeded generator."""
    rng = np.random.default_rng(seed)
    names, arrays = [], []
    for name, shape in layer_shapes(config, edge_dim, node_dim):
        if name.endswith("weight"):
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            arrays.append(rng.uniform(-limit, limit, size=shape))
        else:
            arrays.append(np.zeros(shape))
        names.append(name)
    return ParameterSet(tuple(names), tuple(arrays))


# --------------------------------------------------------------------------
# building blocks
# --------------------------------------------------------------------------


def neighbor_mean(index: MessageIndex, h) -> Tensor:
    """Mean of neighbour states per node (canonical order).

    Forward sums in ascending edge-id order per node; backward uses the
    merged adjacency operator.
    """
    h = nc.as_tensor(h)
    if h.shape[0] != len(index.order):
        raise nc.ShapeError(f"node states cover {h.shape[0]} nodes, graph has {len(index.order)}")
    out = np.asarray(index.mean_op @ h.data[index.inc_nbr]) if len(index.inc_nbr) else np.zeros_like(h.data)

    def backward(g):
        h._accumulate(np.asarray(index.adj_t @ g))

    return nc.custom(out, (h,), backward, "neighbor_mean")


def aggregate(index: MessageIndex, h) -> Tensor:
    """``[mean h_u || mean e_uv]`` over each node's neighbourhood (canonical order).

    Isolated nodes get a zero vector.
    """
    return nc.concat([neighbor_mean(index, h), index.edge_mean])


def aggregate_neighbors(graph: TrafficGraph, v: int, node_states: np.ndarray, index: MessageIndex | None = None) -> np.ndarray:
    """Aggregated neighbourhood vector of node ``v`` (original node ids)."""
    index = index or message_index(graph)
    node_states = np.asarray(node_states, dtype=np.float64)
    if node_states.shape[0] != graph.num_nodes:
        raise nc.ShapeError("node_states must cover every node")
    agg = aggregate(index, node_states[index.order]).data
    return agg[index.rank[v]]


def node_update(h_self, h_neigh, weight, bias, dropout_p: float = 0.0, training: bool = False, rng=None) -> Tensor:
    x = nc.concat([h_self, h_neigh])
    out = nc.relu(nc.add(nc.matmul(x, weight), bias))
    return nc.dropout(out, dropout_p, training, rng)


def embed_edges(node_states, graph: TrafficGraph) -> Tensor:
    """``[z_src || z_dst]`` per edge, in edge-id order (original node ids)."""
    return nc.concat([nc.gather(node_states, graph.src), nc.gather(node_states, graph.dst)])


@dataclass
class ForwardResult:
    node_states: Tensor      # original node order
    edge_embeddings: Tensor  # edge order, width 2 * hidden
    logits: Tensor
    probs: Tensor
    index: MessageIndex = field(repr=False)


def forward(
    graph: TrafficGraph,
    params: ParameterSet | Sequence,
    config: ModelConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
    index: MessageIndex | None = None,
) -> ForwardResult:
    """Run the encoder and classifier over every edge of ``graph``.

    ``params`` may be a :class:`ParameterSet` or a sequence of tensors in
    :func:`layer_shapes` order (for differentiation).
    """
    if graph.num_nodes == 0:
        raise ValueError("forward needs a non-empty graph")
    arrays = params.arrays if isinstance(params, ParameterSet) else params
    p = [nc.as_tensor(a) for a in arrays]
    if len(p) != 2 * config.num_layers + 2:
        raise nc.ShapeError(f"expected {2 * config.num_layers + 2} parameter arrays, got {len(p)}")
    if index is None:
        index = message_index(graph, config.fanout, rng if config.fanout else None)

    h = nc.as_tensor(graph.node_features[index.order])
    for k in range(config.num_layers):
        last = k == config.num_layers - 1
        h = node_update(
            h,
            aggregate(index, h),
            p[2 * k],
            p[2 * k + 1],
            0.0 if last else config.dropout,
            training,
            rng,
        )
    z_edges = nc.concat([nc.gather(h, index.src), nc.gather(h, index.dst)])
    logits = nc.add(nc.matmul(z_edges, p[-2]), p[-1])
    probs = nc.softmax_rows(logits)
    return ForwardResult(nc.gather(h, index.rank), z_edges, logits, probs, index)


def predict_proba(graph: TrafficGraph, params: ParameterSet, config: ModelConfig) -> np.ndarray:
    return forward(graph, params, config, training=False).probs.data
