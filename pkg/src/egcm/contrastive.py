"""InfoNCE over edge embeddings.

Anchors are the real attack edges of the (augmented) training graph. Each
anchor gets one positive drawn from the other real attack edges plus the
label-1 virtual edges, and ``gamma`` negatives drawn from the real benign
edges. Similarity is the raw dot product (no temperature).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .graph import TrafficGraph
from .numcore import Tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ContrastiveConfig:
    gamma: int = 10
    theta: float = 1.0

    def __post_init__(self):
        if self.gamma < 1:
            raise ValueError("gamma must be >= 1")
        if self.theta < 0:
            raise ValueError("theta must be >= 0")


@dataclass(frozen=True, eq=False)
class ContrastiveSets:
    anchors: np.ndarray    # (N,)
    positives: np.ndarray  # (N,)
    negatives: np.ndarray  # (N, gamma)

    def __len__(self) -> int:
        return len(self.anchors)


def build_contrastive_sets(
    graph: TrafficGraph, config: ContrastiveConfig, rng: np.random.Generator, warn: bool = True
) -> ContrastiveSets:
    labels, virtual = graph.labels, graph.virtual
    anchors = np.flatnonzero((labels == 1) & ~virtual)
    benign = np.flatnonzero((labels == 0) & ~virtual)
    if len(anchors) == 0:
        raise ValueError("contrastive sets need at least one real attack edge")
    if len(benign) == 0:
        raise ValueError("contrastive sets need at least one real benign edge")
    pool = np.flatnonzero(labels == 1)  # real attack edges and label-1 virtual edges, sorted
    if len(pool) < 2:
        raise ValueError("no positive candidate: the only attack edge cannot be its own positive")

    # draw from the pool with the anchor's own slot removed
    slot = np.searchsorted(pool, anchors)
    r = rng.integers(0, len(pool) - 1, size=len(anchors))
    r += r >= slot
    positives = pool[r]

    g = config.gamma
    if len(benign) < g:
        if warn:
            logger.warning("benign pool (%d) smaller than gamma (%d); sampling negatives with replacement", len(benign), g)
        negatives = benign[rng.integers(0, len(benign), size=(len(anchors), g))]
    else:
        negatives = _rows_without_replacement(benign, len(anchors), g, rng)
    return ContrastiveSets(anchors, positives, negatives)


def _rows_without_replacement(pool: np.ndarray, rows: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """``rows`` independent k-subsets of ``pool``, each uniform without replacement."""
    if len(pool) < 8 * k:
        return np.stack([pool[rng.choice(len(pool), size=k, replace=False)] for _ in range(rows)]) if rows else np.zeros((0, k), np.int64)
    out = rng.integers(0, len(pool), size=(rows, k))
    while True:
        s = np.sort(out, axis=1)
        dup = np.flatnonzero((s[:, 1:] == s[:, :-1]).any(axis=1))
        if len(dup) == 0:
            return pool[out]
        out[dup] = rng.integers(0, len(pool), size=(len(dup), k))


def _scores_to_loss(s_pos: np.ndarray, s_neg: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean InfoNCE from scores, plus d loss / d s_pos and d loss / d s_neg."""
    n = len(s_pos)
    logits = np.concatenate([s_pos[:, None], s_neg], axis=1)
    top = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - top)
    denom = e.sum(axis=1, keepdims=True)
    lse = top[:, 0] + np.log(denom[:, 0])
    loss = float(np.mean(lse - s_pos))
    q = e / denom
    return loss, (q[:, 0] - 1.0) / n, q[:, 1:] / n


def infonce_loss(anchors, positives, negatives) -> Tensor:
    """Mean over anchors of ``-log(exp(s+) / (exp(s+) + sum_j exp(s-_j)))``.

    ``anchors`` and ``positives`` are (N, D); ``negatives`` is (N, gamma, D).
    """
    a, p, neg = nc.as_tensor(anchors), nc.as_tensor(positives), nc.as_tensor(negatives)
    if a.data.ndim != 2 or p.shape != a.shape or neg.data.ndim != 3 or neg.shape[0] != a.shape[0] or neg.shape[2] != a.shape[1]:
        raise nc.ShapeError(f"infonce_loss: incompatible shapes {a.shape}, {p.shape}, {neg.shape}")
    if a.shape[0] == 0:
        raise ValueError("infonce_loss is undefined for zero anchors")
    s_pos = np.einsum("nd,nd->n", a.data, p.data)
    s_neg = np.einsum("nd,ngd->ng", a.data, neg.data)
    loss, d_pos, d_neg = _scores_to_loss(s_pos, s_neg)

    def backward(g):
        g = float(g)
        if a.requires_grad:
            a._accumulate(g * (d_pos[:, None] * p.data + np.einsum("ng,ngd->nd", d_neg, neg.data)))
        if p.requires_grad:
            p._accumulate(g * d_pos[:, None] * a.data)
        if neg.requires_grad:
            neg._accumulate(g * d_neg[:, :, None] * a.data[:, None, :])

    return nc.custom(np.asarray(loss), (a, p, neg), backward, "infonce")


def contrastive_loss(edge_embeddings, sets: ContrastiveSets) -> Tensor:
    """InfoNCE read directly off an edge-embedding matrix.

    Same value as ``infonce_loss`` on gathered rows, but the negatives are
    processed one column at a time so no (N, gamma, D) block is built.
    """
    z = nc.as_tensor(edge_embeddings)
    if len(sets) == 0:
        raise ValueError("infonce_loss is undefined for zero anchors")
    za = z.data[sets.anchors]
    zp = z.data[sets.positives]
    s_pos = np.einsum("nd,nd->n", za, zp)
    s_neg = np.stack([np.einsum("nd,nd->n", za, z.data[sets.negatives[:, j]]) for j in range(sets.negatives.shape[1])], axis=1)
    loss, d_pos, d_neg = _scores_to_loss(s_pos, s_neg)

    def backward(g):
        g = float(g)
        acc = np.zeros_like(z.data)
        da = d_pos[:, None] * zp
        for j in range(sets.negatives.shape[1]):
            zn = z.data[sets.negatives[:, j]]
            da += d_neg[:, j, None] * zn
            np.add.at(acc, sets.negatives[:, j], d_neg[:, j, None] * za)
        np.add.at(acc, sets.anchors, da)
        np.add.at(acc, sets.positives, d_pos[:, None] * za)
        z._accumulate(g * acc)

    return nc.custom(np.asarray(loss), (z,), backward, "infonce")
