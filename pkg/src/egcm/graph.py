"""Endpoint/flow traffic graph and the neighbourhood index used for message passing.

Nodes are (ip, port) endpoints carrying all-ones feature vectors; every flow
record becomes its own edge (parallel edges are kept). Aggregation treats
edges as undirected while edges keep their stored (src, dst) direction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .flows import Endpoint, FlowRecord

logger = logging.getLogger(__name__)

GRAPH_FORMAT_VERSION = 1


def _ro(x, dtype) -> np.ndarray:
    x = np.array(x, dtype=dtype, copy=True)
    x.setflags(write=False)
    return x


@dataclass(frozen=True)
class Neighborhood:
    center: int
    pairs: tuple[tuple[int, int], ...]  # (neighbour node id, edge id)


@dataclass(frozen=True, eq=False)
class TrafficGraph:
    """Immutable node/edge store.

    ``endpoints[i]`` is ``None`` for virtual nodes. Arrays are read-only.
    """

    endpoints: tuple[Endpoint | None, ...]
    node_features: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    edge_features: np.ndarray
    labels: np.ndarray
    virtual: np.ndarray

    @classmethod
    def from_arrays(cls, endpoints, node_features, src, dst, edge_features, labels, virtual) -> "TrafficGraph":
        g = cls(
            tuple(endpoints),
            _ro(node_features, np.float64),
            _ro(src, np.int64),
            _ro(dst, np.int64),
            _ro(edge_features, np.float64),
            _ro(labels, np.int64),
            _ro(virtual, bool),
        )
        g.validate()
        return g

    @property
    def num_nodes(self) -> int:
        return len(self.endpoints)

    @property
    def num_edges(self) -> int:
        return len(self.src)

    @property
    def feature_dim(self) -> int:
        return self.edge_features.shape[1]

    @property
    def node_virtual(self) -> np.ndarray:
        return np.array([e is None for e in self.endpoints], dtype=bool)

    def validate(self) -> None:
        n, m = self.num_nodes, self.num_edges
        if not (len(self.dst) == len(self.labels) == len(self.virtual) == self.edge_features.shape[0] == m):
            raise ValueError("edge arrays have inconsistent lengths")
        if self.node_features.shape[0] != n:
            raise ValueError("node feature table does not match node count")
        if m and (self.src.min() < 0 or self.dst.min() < 0 or self.src.max() >= n or self.dst.max() >= n):
            raise ValueError("edge references an invalid node id")

    # -- incidence ---------------------------------------------------------

    @cached_property
    def incidence(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """CSR incidence: ``(indptr, edge_ids, neighbours, direction)``.

        Entries of a node are sorted by edge id; direction is +1 where the
        node is the edge's source and -1 where it is the destination. A
        self-loop appears twice in its node's list.
        """
        m = self.num_edges
        node = np.concatenate([self.src, self.dst])
        nbr = np.concatenate([self.dst, self.src])
        eid = np.concatenate([np.arange(m), np.arange(m)])
        direction = np.concatenate([np.ones(m, np.int8), -np.ones(m, np.int8)])
        order = np.lexsort((direction * -1, eid, node))
        indptr = np.zeros(self.num_nodes + 1, dtype=np.int64)
        np.cumsum(np.bincount(node, minlength=self.num_nodes), out=indptr[1:])
        return indptr, eid[order], nbr[order], direction[order]

    def degrees(self) -> np.ndarray:
        return np.diff(self.incidence[0])

    @cached_property
    def canonical_order(self) -> np.ndarray:
        """Node ids ordered by first appearance in the edge list.

        Nodes without edges follow in id order. Node-level kernels run in
        this order, which depends only on edge ids, so relabelling nodes
        cannot change row positions inside dense products.
        """
        seq = np.empty(2 * self.num_edges, dtype=np.int64)
        seq[0::2], seq[1::2] = self.src, self.dst
        _, first = np.unique(seq, return_index=True)
        seen = seq[np.sort(first)]
        isolated = np.setdiff1d(np.arange(self.num_nodes), seen, assume_unique=False)
        return np.concatenate([seen, isolated]).astype(np.int64)


def build_graph(records: Sequence[FlowRecord], node_dim: int | None = None) -> TrafficGraph:
    """One node per distinct (ip, port), one edge per record, in record order.

    Node features are all ones with width ``node_dim`` (defaults to the edge
    feature width).
    """
    ids: dict[Endpoint, int] = {}
    src = np.empty(len(records), dtype=np.int64)
    dst = np.empty(len(records), dtype=np.int64)
    for i, r in enumerate(records):
        src[i] = ids.setdefault(r.src, len(ids))
        dst[i] = ids.setdefault(r.dst, len(ids))
    dim = len(records[0].features) if records else 0
    feats = np.stack([r.features for r in records]) if records else np.zeros((0, dim))
    width = dim if node_dim is None else node_dim
    return TrafficGraph.from_arrays(
        endpoints=list(ids),
        node_features=np.ones((len(ids), width)),
        src=src,
        dst=dst,
        edge_features=feats,
        labels=[r.label for r in records],
        virtual=np.zeros(len(records), dtype=bool),
    )


def neighborhood(
    graph: TrafficGraph,
    v: int,
    fanout: int | None = None,
    rng: np.random.Generator | None = None,
) -> Neighborhood:
    """Incident (neighbour, edge) pairs of ``v``; sampled without replacement
    down to ``fanout`` when the degree exceeds it (``None`` means all)."""
    if not 0 <= v < graph.num_nodes:
        raise IndexError(f"node id {v} out of range [0, {graph.num_nodes})")
    indptr, eid, nbr, _ = graph.incidence
    lo, hi = indptr[v], indptr[v + 1]
    pick = np.arange(lo, hi)
    if fanout is not None and hi - lo > fanout:
        if rng is None:
            raise ValueError("neighbourhood sampling needs an rng")
        pick = np.sort(rng.choice(pick, size=fanout, replace=False))
    return Neighborhood(v, tuple(zip(nbr[pick].tolist(), eid[pick].tolist())))


def add_virtual_edges(graph: TrafficGraph, batch) -> TrafficGraph:
    """Append one isolated virtual dyad per mixed sample in ``batch``.

    ``batch`` needs ``features`` (k x d) and ``labels`` (k,). Existing nodes
    and edges are untouched; a new graph is returned.
    """
    feats = np.asarray(batch.features, dtype=np.float64)
    k = len(batch.labels)
    if k == 0:
        return graph
    if feats.ndim != 2 or feats.shape[1] != graph.feature_dim:
        raise ValueError(f"mixup feature dimension {feats.shape[-1]} does not match graph edge dimension {graph.feature_dim}")
    n = graph.num_nodes
    new_src = n + 2 * np.arange(k)
    return TrafficGraph.from_arrays(
        endpoints=graph.endpoints + (None,) * (2 * k),
        node_features=np.vstack([graph.node_features, np.ones((2 * k, graph.node_features.shape[1]))]),
        src=np.concatenate([graph.src, new_src]),
        dst=np.concatenate([graph.dst, new_src + 1]),
        edge_features=np.vstack([graph.edge_features, feats]),
        labels=np.concatenate([graph.labels, np.asarray(batch.labels, dtype=np.int64)]),
        virtual=np.concatenate([graph.virtual, np.ones(k, dtype=bool)]),
    )


# --------------------------------------------------------------------------
# message-passing index
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MessageIndex:
    """Sparse operators for mean aggregation, expressed in canonical node order.

    ``mean_op`` (n x 2m) averages the rows gathered at ``inc_nbr`` /
    ``inc_edge``; within a row, columns ascend by edge id so the summation
    order is fixed. ``adj`` is the equivalent n x n operator used for the
    backward pass, and ``edge_mean`` the (constant) mean of incident edge
    features.
    """

    order: np.ndarray
    rank: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    inc_nbr: np.ndarray
    inc_edge: np.ndarray
    mean_op: sp.csr_matrix
    adj_t: sp.csr_matrix
    edge_mean: np.ndarray


def message_index(
    graph: TrafficGraph,
    fanout: int | None = None,
    rng: np.random.Generator | None = None,
) -> MessageIndex:
    n, m = graph.num_nodes, graph.num_edges
    order = graph.canonical_order
    rank = np.empty(n, dtype=np.int64)
    rank[order] = np.arange(n)
    src, dst = rank[graph.src], rank[graph.dst]

    node = np.concatenate([src, dst])
    nbr = np.concatenate([dst, src])
    eid = np.concatenate([np.arange(m), np.arange(m)])
    flip = np.concatenate([np.zeros(m, np.int8), np.ones(m, np.int8)])
    srt = np.lexsort((flip, eid, node))
    node, nbr, eid = node[srt], nbr[srt], eid[srt]

    if fanout is not None and len(node):
        if rng is None:
            raise ValueError("neighbourhood sampling needs an rng")
        keys = rng.random(len(node))
        by_key = np.lexsort((keys, node))
        starts = np.searchsorted(node[by_key], node[by_key], side="left")
        within = np.arange(len(node)) - starts
        keep = np.zeros(len(node), dtype=bool)
        keep[by_key[within < fanout]] = True
        node, nbr, eid = node[keep], nbr[keep], eid[keep]

    deg = np.bincount(node, minlength=n)
    w = 1.0 / deg[node] if len(node) else np.zeros(0)
    cols = np.arange(len(node))
    mean_op = sp.csr_matrix((w, (node, cols)), shape=(n, len(node)))
    mean_op.has_sorted_indices = True
    adj = sp.csr_matrix((w, (node, nbr)), shape=(n, n))
    edge_mean = np.asarray(mean_op @ graph.edge_features[eid]) if len(node) else np.zeros((n, graph.feature_dim))
    return MessageIndex(order, rank, src, dst, nbr, eid, mean_op, adj.T.tocsr(), edge_mean)


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------


def save_graph(graph: TrafficGraph, path: str | Path, **extra: np.ndarray) -> None:
    """Write a versioned ``.npz`` container (node table, edge table, extras)."""
    ips = np.array([e.ip if e else "" for e in graph.endpoints], dtype=str)
    ports = np.array([e.port if e else -1 for e in graph.endpoints], dtype=np.int64)
    with open(path, "wb") as fh:
        np.savez(
            fh,
            format_version=np.array([GRAPH_FORMAT_VERSION]),
            node_ip=ips,
            node_port=ports,
            node_features=graph.node_features,
            src=graph.src,
            dst=graph.dst,
            edge_features=graph.edge_features.astype("<f8"),
            labels=graph.labels,
            virtual=graph.virtual,
            **{f"extra_{k}": v for k, v in extra.items()},
        )


def load_graph(path: str | Path) -> tuple[TrafficGraph, dict[str, np.ndarray]]:
    with np.load(path, allow_pickle=False) as z:
        version = int(z["format_version"][0])
        if version != GRAPH_FORMAT_VERSION:
            raise ValueError(f"unsupported graph format version {version}")
        endpoints = [Endpoint(str(ip), int(p)) if p >= 0 else None for ip, p in zip(z["node_ip"], z["node_port"])]
        g = TrafficGraph.from_arrays(
            endpoints, z["node_features"], z["src"], z["dst"], z["edge_features"], z["labels"], z["virtual"]
        )
        extra = {k[len("extra_"):]: z[k] for k in z.files if k.startswith("extra_")}
    return g, extra
