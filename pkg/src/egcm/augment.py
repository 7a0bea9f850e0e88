"""Multi-pattern Mixup over edge features.

Two patterns are generated from the labelled edge pool:

* ``HU``: an unharmful edge ``x_i`` mixed with a harmful edge ``x_j`` using
  ``lambda ~ Beta(alpha, alpha)``; the label is 1 iff ``0 < lambda < 0.5``
  (the harmful share dominates). ``lambda == 0.5`` is labelled 0.
* ``HH``: two harmful edges mixed with ``lambda ~ Beta(beta, beta)``; the
  label is always 1.

Class 1 means harmful (attack) throughout.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

MIXUP_FORMAT_VERSION = 1
HU, HH = "HU", "HH"


@dataclass(frozen=True)
class MixupConfig:
    alpha: float = 0.3
    beta: float = 0.2
    sigma: int = 200
    label_threshold: float = 0.5

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be > 0")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")


@dataclass(frozen=True, eq=False)
class MixupBatch:
    features: np.ndarray   # (k, d)
    labels: np.ndarray     # (k,) in {0, 1}
    patterns: np.ndarray   # (k,) of "HU" / "HH"
    lambdas: np.ndarray    # (k,)
    sources: np.ndarray    # (k, 2) edge ids (i, j)

    def __len__(self) -> int:
        return len(self.labels)

    def to_json(self) -> str:
        return json.dumps(
            {
                "version": MIXUP_FORMAT_VERSION,
                "features": [[float(x).hex() for x in row] for row in self.features],
                "labels": self.labels.tolist(),
                "patterns": self.patterns.tolist(),
                "lambdas": [float(x).hex() for x in self.lambdas],
                "sources": self.sources.tolist(),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "MixupBatch":
        d = json.loads(text)
        if d.get("version") != MIXUP_FORMAT_VERSION:
            raise ValueError(f"unsupported MixupBatch version {d.get('version')!r}")
        feats = [[float.fromhex(x) for x in row] for row in d["features"]]
        return cls(
            features=np.array(feats, dtype=np.float64).reshape(len(d["labels"]), -1),
            labels=np.array(d["labels"], dtype=np.int64),
            patterns=np.array(d["patterns"], dtype="<U2"),
            lambdas=np.array([float.fromhex(x) for x in d["lambdas"]]),
            sources=np.array(d["sources"], dtype=np.int64).reshape(-1, 2),
        )

    @classmethod
    def empty(cls, dim: int) -> "MixupBatch":
        return cls(np.zeros((0, dim)), np.zeros(0, np.int64), np.zeros(0, "<U2"), np.zeros(0), np.zeros((0, 2), np.int64))


def sample_beta(a: float, rng: np.random.Generator, size=None):
    """Draw from the symmetric Beta(a, a)."""
    if a <= 0:
        raise ValueError(f"Beta parameter must be > 0, got {a}")
    return rng.beta(a, a, size=size)


def hu_label(lam, threshold: float = 0.5):
    return ((lam > 0) & (lam < threshold)).astype(np.int64)


def _mix(xi: np.ndarray, xj: np.ndarray, lam: np.ndarray) -> np.ndarray:
    lam = np.asarray(lam, dtype=np.float64)[..., None] if np.ndim(lam) else float(lam)
    out = lam * xi + (1.0 - lam) * xj
    # clip the 1-ulp rounding that can land just outside [min, max]
    return np.clip(out, np.minimum(xi, xj), np.maximum(xi, xj))


def mix_pair(x_i, x_j, lam: float, pattern: str, threshold: float = 0.5) -> tuple[np.ndarray, int]:
    """Mix two edge-feature vectors.

    For ``HU`` ``x_i`` must be the unharmful edge and ``x_j`` the harmful one.
    """
    x_i = np.asarray(x_i, dtype=np.float64)
    x_j = np.asarray(x_j, dtype=np.float64)
    if x_i.shape != x_j.shape:
        raise ValueError(f"feature dimension mismatch: {x_i.shape} vs {x_j.shape}")
    x_hat = _mix(x_i, x_j, lam)
    if pattern == HH:
        return x_hat, 1
    if pattern == HU:
        return x_hat, int(hu_label(np.asarray(lam), threshold))
    raise ValueError(f"unknown mixup pattern {pattern!r}")


def mp_mixup(
    features: np.ndarray,
    labels: Sequence[int],
    config: MixupConfig,
    rng: np.random.Generator,
    edge_ids: Sequence[int] | None = None,
) -> MixupBatch:
    """Sample ``sigma`` HU pairs then ``sigma`` HH pairs, with replacement.

    ``edge_ids`` names the rows of ``features`` in the source graph (defaults
    to row positions) and is recorded in ``sources``.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    ids = np.arange(len(labels)) if edge_ids is None else np.asarray(edge_ids, dtype=np.int64)
    if config.sigma == 0:
        return MixupBatch.empty(features.shape[1] if features.ndim == 2 else 0)
    harmful = np.flatnonzero(labels == 1)
    benign = np.flatnonzero(labels == 0)
    if len(harmful) == 0:
        raise ValueError("cannot augment: no minority samples")
    if len(benign) == 0:
        raise ValueError("cannot augment: no unharmful samples for HU pairs")
    s = config.sigma

    hu_i = benign[rng.integers(0, len(benign), size=s)]
    hu_j = harmful[rng.integers(0, len(harmful), size=s)]
    hu_lam = sample_beta(config.alpha, rng, size=s)
    hh_i = harmful[rng.integers(0, len(harmful), size=s)]
    hh_j = harmful[rng.integers(0, len(harmful), size=s)]
    hh_lam = sample_beta(config.beta, rng, size=s)

    i = np.concatenate([hu_i, hh_i])
    j = np.concatenate([hu_j, hh_j])
    lam = np.concatenate([hu_lam, hh_lam])
    mixed = _mix(features[i], features[j], lam)
    out_labels = np.concatenate([hu_label(hu_lam, config.label_threshold), np.ones(s, dtype=np.int64)])
    patterns = np.array([HU] * s + [HH] * s, dtype="<U2")
    return MixupBatch(mixed, out_labels, patterns, lam, np.stack([ids[i], ids[j]], axis=1))
