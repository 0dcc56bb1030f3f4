"""Test-time inference modes over a frozen feature extractor.

All modes precompute training features once into a FeatureCache and then
apply the NW vote with differently assembled supports: Random (k per
class), Full (entire training set, class-balanced by cyclic duplication),
Ensemble (average of per-environment predictions), Cluster (per-class
k-means centroids), exact k-NN and HNSW, plus a linear probe trained on
the frozen features.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .errors import ConfigError, ContractError, CoverageError
from .featnet import FeatureNet, LinearHead
from .hnsw import HnswIndex
from .kmeans import kmeans
from .nwhead import cross_entropy, nw_predict, onehot
from .optim import Adam
from .rng import Rng
from .support import SupportBatch
from .tensor import Tape, backward

log = logging.getLogger(__name__)

MODE_KINDS = ("random", "full", "ensemble", "cluster", "knn", "hnsw", "probe")
_DEFAULT_K = {"random": 3, "cluster": 3, "knn": 20, "hnsw": 20}


@dataclass
class InferenceMode:
    kind: str
    k: int | None = None

    def __post_init__(self):
        if self.kind not in MODE_KINDS:
            raise ConfigError(f"unknown inference mode {self.kind!r}; choose from {MODE_KINDS}")
        if self.k is None:
            self.k = _DEFAULT_K.get(self.kind)
        if self.k is not None and self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")


class FeatureCache:
    """Precomputed features for every training example, with partitions."""

    def __init__(self, features: np.ndarray, labels, envs, n_classes: int):
        self.features = np.asarray(features, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.envs = np.asarray(envs, dtype=np.int64)
        self.indices = np.arange(len(self.labels))
        self.n_classes = int(n_classes)
        self.env_ids = sorted(int(v) for v in np.unique(self.envs))
        self.by_class = {c: self.indices[self.labels == c] for c in range(self.n_classes)}
        self.by_env_class = {
            (env, c): self.indices[(self.envs == env) & (self.labels == c)]
            for env in self.env_ids
            for c in range(self.n_classes)
        }

    def __len__(self) -> int:
        return len(self.labels)


def build_cache(net: FeatureNet, ds_train: Dataset) -> FeatureCache:
    """Extract features for the whole training set with a frozen net."""
    feats = net.extract(ds_train.X).data
    return FeatureCache(feats, ds_train.y, ds_train.e, ds_train.n_classes)


def _support_from(cache: FeatureCache, idx: np.ndarray) -> SupportBatch:
    return SupportBatch(
        features=cache.features[idx],
        onehot_labels=onehot(cache.labels[idx], cache.n_classes),
        source_envs=cache.envs[idx],
        source_indices=idx.astype(np.int64),
    )


def _balanced_weights(buckets: dict[int, np.ndarray], require_all: bool) -> tuple[np.ndarray, np.ndarray]:
    """Class-balance by weighting every row of a class at max_count/count.

    The exact fractional form of duplicating minority rows up to the
    majority count: every datapoint participates, the vote is unchanged
    when counts already match, and the result cannot depend on row order.
    Returns (row indices, per-row multiplicities).
    """
    sizes = {c: len(b) for c, b in buckets.items()}
    populated = [c for c, n in sizes.items() if n]
    if not populated:
        raise CoverageError("no populated class buckets to balance")
    if require_all:
        for c, n in sorted(sizes.items()):
            if n == 0:
                raise CoverageError(f"no examples of class {c} in cache", class_id=c)
    target = max(sizes[c] for c in populated)
    idx = np.concatenate([buckets[c] for c in sorted(populated)])
    weights = np.concatenate([np.full(sizes[c], target / sizes[c]) for c in sorted(populated)])
    return idx, weights


def _weighted_nw(query_feats: np.ndarray, feats: np.ndarray, labels: np.ndarray,
                 n_classes: int, weights: np.ndarray | None = None) -> np.ndarray:
    """NW vote with per-row multiplicities: exp(-d) * w is softmax over
    similarity shifted by log(w)."""
    q = np.atleast_2d(query_feats)
    qq = (q * q).sum(axis=1)[:, None]
    nn = (feats * feats).sum(axis=1)[None, :]
    d = np.sqrt(np.maximum(qq + nn - 2.0 * (q @ feats.T), 0.0))
    logits = -d
    if weights is not None:
        logits = logits + np.log(weights)[None, :]
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    return w @ onehot(labels, n_classes)


def _nw_probs(query_feats: np.ndarray, support: SupportBatch) -> np.ndarray:
    return nw_predict(query_feats, support).data


def predict(mode: InferenceMode, cache: FeatureCache, query_feats, rng: Rng | None = None,
            probe: LinearHead | None = None, index: HnswIndex | None = None) -> np.ndarray:
    """Per-query class simplices under the requested inference mode."""
    if len(cache) == 0:
        raise ContractError("empty feature cache")
    q = np.atleast_2d(np.asarray(query_feats, dtype=np.float64))
    rng = rng if rng is not None else Rng(0)

    if mode.kind == "random":
        parts = []
        for c, bucket in sorted(cache.by_class.items()):
            if len(bucket) == 0:
                raise CoverageError(f"no examples of class {c} in cache", class_id=c)
            replace = len(bucket) < mode.k
            if replace:
                log.warning("class %d has %d cached rows; drawing %d with replacement", c, len(bucket), mode.k)
            parts.append(rng.choice(bucket, size=mode.k, replace=replace))
        return _nw_probs(q, _support_from(cache, np.concatenate(parts)))

    if mode.kind == "full":
        idx, weights = _balanced_weights(cache.by_class, require_all=True)
        return _weighted_nw(q, cache.features[idx], cache.labels[idx], cache.n_classes, weights)

    if mode.kind == "ensemble":
        per_env = []
        for env in cache.env_ids:
            buckets = {c: cache.by_env_class[(env, c)] for c in range(cache.n_classes)}
            missing = [c for c, b in buckets.items() if len(b) == 0]
            if len(missing) == cache.n_classes:
                log.warning("environment %s has no cached rows; skipping", env)
                continue
            if missing:
                log.warning("environment %s is missing classes %s; its vote covers the rest", env, missing)
            idx, weights = _balanced_weights(buckets, require_all=False)
            per_env.append(_weighted_nw(q, cache.features[idx], cache.labels[idx],
                                        cache.n_classes, weights))
        if not per_env:
            raise CoverageError("no environment could form a support")
        return np.mean(per_env, axis=0)

    if mode.kind == "cluster":
        feats_parts, label_parts = [], []
        for c, bucket in sorted(cache.by_class.items()):
            if len(bucket) == 0:
                raise CoverageError(f"no examples of class {c} in cache", class_id=c)
            k = mode.k
            if k > len(bucket):
                log.warning("cluster k=%d exceeds class %d bucket size %d; reducing", k, c, len(bucket))
                k = len(bucket)
            centroids, _, _ = kmeans(cache.features[bucket], k, rng)
            feats_parts.append(centroids)
            label_parts.extend([c] * len(centroids))
        support = SupportBatch(
            features=np.concatenate(feats_parts),
            onehot_labels=onehot(label_parts, cache.n_classes),
            source_envs=np.full(len(label_parts), -1, dtype=np.int64),
            source_indices=np.full(len(label_parts), -1, dtype=np.int64),
        )
        return _nw_probs(q, support)

    if mode.kind in ("knn", "hnsw"):
        return knn_predict(cache, q, mode.k, exact=(mode.kind == "knn"), rng=rng, index=index)

    if mode.kind == "probe":
        if probe is None:
            raise ContractError("probe mode needs a trained LinearHead (see train_probe)")
        return probe.predict_probs(q).data

    raise ConfigError(f"unknown inference mode {mode.kind!r}")


def _exact_neighbors(cache: FeatureCache, q: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """(indices, distances) of the k nearest cached rows per query; ties in
    distance break toward the lower dataset index."""
    qq = (q * q).sum(axis=1)[:, None]
    nn = (cache.features * cache.features).sum(axis=1)[None, :]
    d2 = np.maximum(qq + nn - 2.0 * (q @ cache.features.T), 0.0)
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    rows = np.arange(len(q))[:, None]
    return order, np.sqrt(d2[rows, order])


def knn_predict(cache: FeatureCache, query_feats, k: int, exact: bool = True,
                rng: Rng | None = None, index: HnswIndex | None = None) -> np.ndarray:
    """NW vote restricted to the k nearest cached rows per query."""
    if len(cache) == 0:
        raise ContractError("empty feature cache")
    if k < 1 or k > len(cache):
        raise ContractError(f"k must be in [1, {len(cache)}], got {k}")
    q = np.atleast_2d(np.asarray(query_feats, dtype=np.float64))
    if exact:
        idx, dist = _exact_neighbors(cache, q, k)
    else:
        if index is None:
            index = HnswIndex(cache.features, rng=rng if rng is not None else Rng(0))
        idx = np.empty((len(q), k), dtype=np.int64)
        dist = np.empty((len(q), k))
        for i, row in enumerate(q):
            idx[i], dist[i] = index.search(row, k)
    # softmax over -distance within each query's own k neighbors
    w = np.exp(-dist + dist.min(axis=1, keepdims=True))
    w /= w.sum(axis=1, keepdims=True)
    labels = cache.labels[idx]
    probs = np.zeros((len(q), cache.n_classes))
    for c in range(cache.n_classes):
        probs[:, c] = (w * (labels == c)).sum(axis=1)
    return probs


def train_probe(cache: FeatureCache, lr: float = 0.05, epochs: int = 200) -> LinearHead:
    """Fit a linear softmax classifier on the cached (frozen) features."""
    head = LinearHead(cache.features.shape[1], cache.n_classes)
    labels = onehot(cache.labels, cache.n_classes)
    opt = Adam(lr=lr)
    for _ in range(epochs):
        tape = Tape()
        tape.watch(*head.parameters())
        loss = cross_entropy(head.predict_probs(cache.features), labels)
        grads = backward(tape, loss)
        opt.step(head.parameters(), grads)
    return head


def dump_neighbors(cache: FeatureCache, query_feats, top_k: int):
    """Ranked nearest neighbors per query plus the averaged environment
    histogram of those neighbors.

    Returns (neighbors, histogram): ``neighbors[i]`` is a list of
    (dataset index, distance, label, env) ascending by distance with ties
    broken by index; ``histogram`` maps env id to its normalized share
    among the top_k across all queries.
    """
    if top_k < 1 or top_k > len(cache):
        raise ContractError(f"top_k must be in [1, {len(cache)}], got {top_k}")
    q = np.atleast_2d(np.asarray(query_feats, dtype=np.float64))
    idx, dist = _exact_neighbors(cache, q, top_k)
    neighbors = []
    env_counts = {env: 0 for env in cache.env_ids}
    for row_idx, row_dist in zip(idx, dist):
        entry = []
        for i, d in zip(row_idx.tolist(), row_dist.tolist()):
            env = int(cache.envs[i])
            entry.append((i, d, int(cache.labels[i]), env))
            env_counts[env] += 1
        neighbors.append(entry)
    total = max(sum(env_counts.values()), 1)
    histogram = {env: count / total for env, count in env_counts.items()}
    return neighbors, histogram
