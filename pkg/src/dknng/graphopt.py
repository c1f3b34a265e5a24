"""Turn a kNN graph into a fixed-degree, id-only search graph.

Pass 1 drops detour edges. Scanning a row from nearest to farthest, an edge
``u -> w`` is pruned when some already-kept neighbor ``v`` of ``u`` is
closer to ``w`` than ``u`` is.

Pass 2 refills every row to the requested degree. It takes the kept
forward edges first, then reverse edges (nearest first), then pruned
forward edges as padding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from .core import EMPTY_ID, ID_DTYPE, Dataset, KnnGraph, UsageError, pair_distance, precedes, row_size


@dataclass
class SearchGraph:
    ids: np.ndarray
    id_space: str = "local"

    def __post_init__(self):
        self.ids = np.ascontiguousarray(self.ids, dtype=ID_DTYPE)
        if self.ids.ndim != 2:
            raise UsageError(f"search graph ids must be 2-D, got {self.ids.shape}")

    @property
    def num_sources(self) -> int:
        return self.ids.shape[0]

    @property
    def out_degree(self) -> int:
        return self.ids.shape[1]

    @property
    def nbytes(self) -> int:
        return self.ids.nbytes

    @classmethod
    def from_knng(cls, graph: KnnGraph, out_degree: int | None = None) -> "SearchGraph":
        """Plain truncation, without any optimization."""
        d = graph.k if out_degree is None else out_degree
        return cls(graph.ids[:, :d].copy(), graph.id_space)


@njit(nogil=True, cache=True, parallel=True)
def _prune(data, metric, ids, dists, kept):
    n, k = ids.shape
    for u in prange(n):
        size = row_size(ids[u])
        for j in range(size):
            w = ids[u, j]
            duw = dists[u, j]
            keep = True
            for t in range(j):
                if not kept[u, t]:
                    continue
                v = ids[u, t]
                if pair_distance(data[v], data[w], metric) < duw:
                    keep = False
                    break
            kept[u, j] = keep


@njit(nogil=True, cache=True)
def _reverse_csr(ids, dists, kept):
    n, k = ids.shape
    counts = np.zeros(n + 1, np.int64)
    for u in range(n):
        for j in range(k):
            if kept[u, j]:
                counts[ids[u, j] + 1] += 1
    for i in range(n):
        counts[i + 1] += counts[i]
    rev_ids = np.empty(counts[n], ids.dtype)
    rev_d = np.empty(counts[n], dists.dtype)
    cursor = counts[:n].copy()
    for u in range(n):
        for j in range(k):
            if kept[u, j]:
                w = ids[u, j]
                rev_ids[cursor[w]] = u
                rev_d[cursor[w]] = dists[u, j]
                cursor[w] += 1
    return counts, rev_ids, rev_d


@njit(nogil=True, cache=True, inline="always")
def _push(out, row, size, v):
    if v < 0 or v == row:
        return size
    for t in range(size):
        if out[t] == v:
            return size
    out[size] = v
    return size + 1


@njit(nogil=True, cache=True, parallel=True)
def _fill(ids, kept, offsets, rev_ids, rev_d, out):
    n, k = ids.shape
    d = out.shape[1]
    for u in prange(n):
        size = 0
        for j in range(k):
            if size == d:
                break
            if kept[u, j]:
                size = _push(out[u], u, size, ids[u, j])
        if size < d:
            lo = offsets[u]
            hi = offsets[u + 1]
            m = hi - lo
            order = np.empty(m, np.int64)
            for t in range(m):
                order[t] = lo + t
            # insertion sort by (dist, id); reverse lists are short
            for t in range(1, m):
                cur = order[t]
                s = t
                while s > 0 and precedes(rev_d[cur], rev_ids[cur], rev_d[order[s - 1]], rev_ids[order[s - 1]]):
                    order[s] = order[s - 1]
                    s -= 1
                order[s] = cur
            for t in range(m):
                if size == d:
                    break
                size = _push(out[u], u, size, rev_ids[order[t]])
        for j in range(k):
            if size == d:
                break
            if not kept[u, j]:
                size = _push(out[u], u, size, ids[u, j])
        for t in range(size, d):
            out[u, t] = EMPTY_ID


def detour_mask(graph: KnnGraph, dataset: Dataset) -> np.ndarray:
    """Boolean ``N x k`` mask of edges that survive detour pruning."""
    kept = np.zeros(graph.ids.shape, np.bool_)
    _prune(dataset.data, dataset.metric.code, graph.ids, graph.dists, kept)
    return kept


def optimize_graph(graph: KnnGraph, dataset: Dataset, out_degree: int | None = None) -> SearchGraph:
    """Detour pruning plus reverse-edge augmentation into a degree-``out_degree`` graph."""
    d = graph.k if out_degree is None else out_degree
    if d > graph.k:
        raise UsageError(f"out_degree {d} exceeds graph k={graph.k}")
    if d < 1:
        raise UsageError("out_degree must be at least 1")
    if graph.num_sources != dataset.num_points:
        raise UsageError(
            f"graph has {graph.num_sources} rows but dataset has {dataset.num_points} points"
        )
    kept = detour_mask(graph, dataset)
    offsets, rev_ids, rev_d = _reverse_csr(graph.ids, graph.dists, kept)
    out = np.empty((graph.num_sources, d), ID_DTYPE)
    _fill(graph.ids, kept, offsets, rev_ids, rev_d, out)
    return SearchGraph(out, graph.id_space)
