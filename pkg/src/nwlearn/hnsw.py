"""Hierarchical navigable small-world graph for approximate nearest neighbors.

A layered proximity graph over a fixed feature matrix: greedy descent
through the sparse upper layers, then a best-first beam search on the base
layer, which holds every node. Distances are squared Euclidean internally
(monotone in the true distance). Only the level draws consume randomness;
given the Rng the build is deterministic, with ties broken by node id.

Adjacency is stored as fixed-capacity int arrays per layer so the beam
search can run as a numba kernel; a pure-numpy implementation of the same
search is used when numba is unavailable.
"""

from __future__ import annotations

import heapq

import numpy as np

from .errors import ConfigError, ContractError
from .rng import Rng

try:
    from numba import njit

    _HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is an optional accelerator
    _HAS_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap if not args else wrap(*args)


DEFAULT_M = 16
DEFAULT_EF_CONSTRUCTION = 200
DEFAULT_EF_SEARCH = 100


@njit(cache=True)
def _sift_up(d, i, pos, sign):
    # binary heap on (sign*dist, id) with lexicographic ties by id
    while pos > 0:
        parent = (pos - 1) // 2
        if (sign * d[pos], i[pos]) < (sign * d[parent], i[parent]):
            d[pos], d[parent] = d[parent], d[pos]
            i[pos], i[parent] = i[parent], i[pos]
            pos = parent
        else:
            break


@njit(cache=True)
def _sift_down(d, i, size, sign):
    pos = 0
    while True:
        left = 2 * pos + 1
        if left >= size:
            break
        child = left
        right = left + 1
        if right < size and (sign * d[right], i[right]) < (sign * d[left], i[left]):
            child = right
        if (sign * d[child], i[child]) < (sign * d[pos], i[pos]):
            d[pos], d[child] = d[child], d[pos]
            i[pos], i[child] = i[child], i[pos]
            pos = child
        else:
            break


@njit(cache=True)
def _beam_search_kernel(features, norms, nbr, cnt, entry_i, entry_d, ef, q, qq):
    """Best-first beam search from one entry point; returns the best-`ef`
    (squared distance, id) pairs found, unordered."""
    n = features.shape[0]
    dim = features.shape[1]
    visited = np.zeros(n, np.bool_)
    visited[entry_i] = True

    cand_d = np.empty(n + 1, np.float64)  # min-heap of frontier nodes
    cand_i = np.empty(n + 1, np.int64)
    cand_d[0] = entry_d
    cand_i[0] = entry_i
    cand_size = 1

    best_d = np.empty(ef, np.float64)  # max-heap of current results
    best_i = np.empty(ef, np.int64)
    best_d[0] = entry_d
    best_i[0] = entry_i
    best_size = 1

    while cand_size > 0:
        d0 = cand_d[0]
        i0 = cand_i[0]
        cand_size -= 1
        cand_d[0] = cand_d[cand_size]
        cand_i[0] = cand_i[cand_size]
        _sift_down(cand_d, cand_i, cand_size, 1.0)

        if best_size >= ef and d0 > best_d[0]:
            break
        for t in range(cnt[i0]):
            j = nbr[i0, t]
            if visited[j]:
                continue
            visited[j] = True
            acc = 0.0
            for k in range(dim):
                acc += features[j, k] * q[k]
            dj = norms[j] - 2.0 * acc + qq
            if best_size < ef:
                best_d[best_size] = dj
                best_i[best_size] = j
                _sift_up(best_d, best_i, best_size, -1.0)
                best_size += 1
            elif dj < best_d[0]:
                best_d[0] = dj
                best_i[0] = j
                _sift_down(best_d, best_i, best_size, -1.0)
            else:
                continue
            cand_d[cand_size] = dj
            cand_i[cand_size] = j
            _sift_up(cand_d, cand_i, cand_size, 1.0)
            cand_size += 1
    return best_d[:best_size], best_i[:best_size]


@njit(cache=True)
def _descend_kernel(features, norms, nbr, cnt, cur, curd, q, qq):
    """Greedy walk to the locally closest node (strictly improving)."""
    dim = features.shape[1]
    while True:
        best_j = -1
        best_d = curd
        for t in range(cnt[cur]):
            j = nbr[cur, t]
            acc = 0.0
            for k in range(dim):
                acc += features[j, k] * q[k]
            dj = norms[j] - 2.0 * acc + qq
            if dj < best_d:
                best_d = dj
                best_j = j
        if best_j < 0:
            return cur, curd
        cur = best_j
        curd = best_d


class _Layer:
    """Fixed-capacity adjacency: nbr[v, :cnt[v]] are v's neighbor ids."""

    def __init__(self, n: int, cap: int):
        self.nbr = np.full((n, cap), -1, dtype=np.int64)
        self.cnt = np.zeros(n, dtype=np.int64)
        self.cap = cap

    def neighbors(self, v: int) -> np.ndarray:
        return self.nbr[v, : self.cnt[v]]

    def set_neighbors(self, v: int, ids):
        k = len(ids)
        self.nbr[v, :k] = ids
        self.cnt[v] = k


class HnswIndex:
    def __init__(
        self,
        features,
        m: int = DEFAULT_M,
        ef_construction: int = DEFAULT_EF_CONSTRUCTION,
        ef_search: int = DEFAULT_EF_SEARCH,
        rng: Rng | None = None,
    ):
        feats = np.ascontiguousarray(features, dtype=np.float64)
        if feats.ndim != 2 or len(feats) == 0:
            raise ContractError("HnswIndex needs a non-empty feature matrix")
        if m < 2 or ef_construction < 1 or ef_search < 1:
            raise ConfigError(f"bad HNSW params m={m}, ef_construction={ef_construction}, ef_search={ef_search}")
        self.features = feats
        self.m = m
        self.m0 = 2 * m  # base layer keeps twice the edges
        self.ef_construction = ef_construction
        self.ef_search = ef_search
        self._norms = (feats * feats).sum(axis=1)
        n = len(feats)
        rng = rng if rng is not None else Rng(0)
        level_mult = 1.0 / np.log(m)
        levels = (-np.log(rng.random(n)) * level_mult).astype(np.int64)
        self._layers: list[_Layer] = []
        self._entry: int | None = None
        for i in range(n):
            self._insert(i, int(levels[i]))

    def __len__(self) -> int:
        return len(self.features)

    # -- distance helpers (squared, via ||x||^2 - 2 x.q + ||q||^2) ----------

    def _dist_many(self, q: np.ndarray, qq: float, ids) -> np.ndarray:
        return self._norms[ids] - 2.0 * (self.features[ids] @ q) + qq

    def _dist_one(self, q: np.ndarray, i: int) -> float:
        diff = self.features[i] - q
        return float(diff @ diff)

    def _new_layer(self) -> _Layer:
        cap = self.m0 if not self._layers else self.m
        return _Layer(len(self.features), cap)

    # -- construction --------------------------------------------------------

    def _insert(self, i: int, level: int):
        if self._entry is None:
            for _ in range(level + 1):
                self._layers.append(self._new_layer())
            self._entry = i
            return
        q = self.features[i]
        qq = float(self._norms[i])
        top = len(self._layers) - 1
        cur = self._entry
        curd = self._dist_one(q, cur)
        for layer_idx in range(top, level, -1):
            cur, curd = self._descend(q, qq, cur, curd, self._layers[layer_idx])
        entry = (curd, cur)
        for layer_idx in range(min(level, top), -1, -1):
            layer = self._layers[layer_idx]
            found = self._search_layer(q, qq, entry, self.ef_construction, layer)
            neighbors = self._select_heuristic(found, self.m)
            layer.set_neighbors(i, [j for _, j in neighbors])
            for d, j in neighbors:
                links = layer.neighbors(j)
                if len(links) + 1 <= layer.cap:
                    layer.nbr[j, layer.cnt[j]] = i
                    layer.cnt[j] += 1
                else:
                    extended = np.append(links, i)
                    dl = self._dist_many(self.features[j], float(self._norms[j]), extended)
                    cand = sorted(zip(dl.tolist(), extended.tolist()))
                    layer.set_neighbors(j, [x for _, x in self._select_heuristic(cand, layer.cap)])
            entry = found[0]  # descend from the closest point found
        for _ in range(top + 1, level + 1):
            layer = self._new_layer()
            self._layers.append(layer)
            self._entry = i

    def _descend(self, q, qq: float, cur: int, curd: float, layer: _Layer) -> tuple[int, float]:
        if _HAS_NUMBA:
            cur, curd = _descend_kernel(self.features, self._norms, layer.nbr, layer.cnt,
                                        cur, curd, q, qq)
            return int(cur), float(curd)
        while True:
            neigh = layer.neighbors(cur)
            if len(neigh) == 0:
                return cur, curd
            dists = self._dist_many(q, qq, neigh)
            j = int(np.argmin(dists))
            if dists[j] < curd:
                cur, curd = int(neigh[j]), float(dists[j])
            else:
                return cur, curd

    def _search_layer(self, q, qq: float, entry: tuple[float, int], ef: int,
                      layer: _Layer) -> list[tuple[float, int]]:
        """Beam search from one entry; returns (dist, id) ascending."""
        if _HAS_NUMBA:
            best_d, best_i = _beam_search_kernel(
                self.features, self._norms, layer.nbr, layer.cnt,
                entry[1], entry[0], ef, q, qq)
            return sorted(zip(best_d.tolist(), best_i.tolist()))
        visited = np.zeros(len(self.features), dtype=bool)
        visited[entry[1]] = True
        cand = [entry]
        best = [(-entry[0], entry[1])]
        worst = entry[0]
        n_best = 1
        while cand:
            d, i = heapq.heappop(cand)
            if n_best >= ef and d > worst:
                break
            neigh = layer.neighbors(i)
            ids = neigh[~visited[neigh]]
            if ids.size == 0:
                continue
            visited[ids] = True
            dists = self._dist_many(q, qq, ids)
            for j, dj in zip(ids.tolist(), dists.tolist()):
                if n_best < ef:
                    heapq.heappush(best, (-dj, j))
                    heapq.heappush(cand, (dj, j))
                    n_best += 1
                    worst = -best[0][0]
                elif dj < worst:
                    heapq.heapreplace(best, (-dj, j))
                    heapq.heappush(cand, (dj, j))
                    worst = -best[0][0]
        return sorted((-nd, i) for nd, i in best)

    def _select_heuristic(self, candidates, cap: int) -> list[tuple[float, int]]:
        """Diversifying neighbor selection: keep a candidate only if it is
        closer to the query than to every already-kept neighbor."""
        if len(candidates) <= cap:
            return list(candidates)
        ids = np.array([i for _, i in candidates], dtype=np.int64)
        d_to_q = np.array([d for d, _ in candidates])
        f = self.features[ids]
        norms = self._norms[ids]
        # min distance from each candidate to the kept set, updated lazily
        min_to_kept = np.full(len(ids), np.inf)
        out = []
        for a in range(len(ids)):
            if min_to_kept[a] >= d_to_q[a]:
                out.append((float(d_to_q[a]), int(ids[a])))
                if len(out) == cap:
                    break
                d_a = norms + norms[a] - 2.0 * (f @ f[a])
                np.minimum(min_to_kept, d_a, out=min_to_kept)
        return out

    # -- queries -------------------------------------------------------------

    def search(self, query, k: int, ef_search: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        """k approximate nearest rows; returns (indices, euclidean distances)
        ascending by (distance, index)."""
        q = np.ascontiguousarray(query, dtype=np.float64).reshape(-1)
        if k < 1 or k > len(self.features):
            raise ContractError(f"k must be in [1, {len(self.features)}], got {k}")
        ef = max(ef_search if ef_search is not None else self.ef_search, k)
        qq = float(q @ q)
        cur = self._entry
        curd = self._dist_one(q, cur)
        for layer_idx in range(len(self._layers) - 1, 0, -1):
            cur, curd = self._descend(q, qq, cur, curd, self._layers[layer_idx])
        found = self._search_layer(q, qq, (curd, cur), ef, self._layers[0])[:k]
        idx = np.array([i for _, i in found], dtype=np.int64)
        # the norm expansion can go epsilon-negative at zero distance
        dist = np.sqrt(np.maximum(np.array([d for d, _ in found]), 0.0))
        return idx, dist
