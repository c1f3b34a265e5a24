"""Greedy best-first batch search over a search graph."""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, replace

import numba
import numpy as np
from numba import njit, prange

from .core import DIST_DTYPE, EMPTY_ID, ID_DTYPE, Dataset, UsageError, pair_distance, precedes
from .graphopt import SearchGraph, optimize_graph
from .parallel import worker_threads


@dataclass
class SearchParams:
    k_s: int = 10
    beam_width: int = 64
    num_entry_points: int = 16
    max_hops: int | None = None
    seed: int = 0
    # "beam": stop once every beam entry is expanded; "topk": once the best k_s are
    stop_rule: str = "beam"
    workers: int | None = None

    @property
    def hop_limit(self) -> int:
        return self.max_hops if self.max_hops is not None else 4 * self.beam_width

    def validate(self) -> None:
        if not 1 <= self.k_s <= self.beam_width:
            raise UsageError(f"need 1 <= k_s <= beam_width, got k_s={self.k_s}, beam={self.beam_width}")
        if self.num_entry_points < 1:
            raise UsageError("num_entry_points must be at least 1")
        if self.hop_limit < 1:
            raise UsageError("max_hops must be at least 1")
        if self.stop_rule not in ("beam", "topk"):
            raise UsageError(f"unknown stop_rule {self.stop_rule!r}")


@dataclass
class SearchResult:
    ids: np.ndarray
    dists: np.ndarray
    # distance evaluations per query
    scored: np.ndarray | None = None
    # ids scored per query, in order, padded with -1 (only when traced)
    trace: np.ndarray | None = None

    @property
    def num_queries(self) -> int:
        return self.ids.shape[0]

    @property
    def k_s(self) -> int:
        return self.ids.shape[1]


@njit(nogil=True, cache=True, inline="always")
def _beam_insert(b_ids, b_d, b_exp, n, cid, cd):
    cap = b_ids.shape[0]
    if n == cap:
        if not precedes(cd, cid, b_d[cap - 1], b_ids[cap - 1]):
            return n
        pos = cap - 1
    else:
        pos = n
        n += 1
    while pos > 0 and precedes(cd, cid, b_d[pos - 1], b_ids[pos - 1]):
        b_ids[pos] = b_ids[pos - 1]
        b_d[pos] = b_d[pos - 1]
        b_exp[pos] = b_exp[pos - 1]
        pos -= 1
    b_ids[pos] = cid
    b_d[pos] = cd
    b_exp[pos] = 0
    return n


@njit(nogil=True, cache=True, parallel=True)
def _search(queries, vectors, metric, graph, entries, beam_width, max_hops, prefix, n_chunks, out_ids, out_d, scored, trace):
    nq = queries.shape[0]
    nv = vectors.shape[0]
    deg = graph.shape[1]
    k_s = out_ids.shape[1]
    tracing = trace.shape[0] > 0
    chunk = (nq + n_chunks - 1) // n_chunks
    for c in prange(n_chunks):
        # visited marks are stamped with the query index, so they never need clearing
        stamp = np.full(nv, -1, np.int64)
        b_ids = np.empty(beam_width, np.int32)
        b_d = np.empty(beam_width, np.float32)
        b_exp = np.empty(beam_width, np.uint8)
        for q in range(c * chunk, min(nq, (c + 1) * chunk)):
            n = 0
            cnt = 0
            for t in range(entries.shape[1]):
                e = entries[q, t]
                if stamp[e] == q:
                    continue
                stamp[e] = q
                d = pair_distance(queries[q], vectors[e], metric)
                if tracing and cnt < trace.shape[1]:
                    trace[q, cnt] = e
                cnt += 1
                n = _beam_insert(b_ids, b_d, b_exp, n, e, d)
            hops = 0
            while hops < max_hops:
                pos = -1
                for i in range(min(prefix, n)):
                    if b_exp[i] == 0:
                        pos = i
                        break
                if pos < 0:
                    break
                b_exp[pos] = 1
                u = b_ids[pos]
                hops += 1
                for t in range(deg):
                    w = graph[u, t]
                    if w < 0:
                        break
                    if stamp[w] == q:
                        continue
                    stamp[w] = q
                    d = pair_distance(queries[q], vectors[w], metric)
                    if tracing and cnt < trace.shape[1]:
                        trace[q, cnt] = w
                    cnt += 1
                    n = _beam_insert(b_ids, b_d, b_exp, n, w, d)
            for t in range(k_s):
                if t < n:
                    out_ids[q, t] = b_ids[t]
                    out_d[q, t] = b_d[t]
                else:
                    out_ids[q, t] = -1
                    out_d[q, t] = np.inf
            scored[q] = cnt


def _as_matrix(x) -> np.ndarray:
    return x.data if isinstance(x, Dataset) else np.ascontiguousarray(x)


def entry_points(num_queries: int, num_points: int, params: SearchParams) -> np.ndarray:
    rng = np.random.default_rng(params.seed)
    count = min(params.num_entry_points, num_points)
    return rng.integers(0, num_points, size=(num_queries, count), dtype=np.int64)


def ann_search(
    queries,
    sgraph: SearchGraph,
    vectors: Dataset,
    params: SearchParams,
    *,
    trace: bool = False,
) -> SearchResult:
    """Find ``params.k_s`` approximate nearest neighbors in ``vectors`` for each query.

    Each query starts from random entry points and repeatedly expands the
    closest unexpanded beam entry. The loop ends when the stop rule's prefix
    of the beam is fully expanded or after ``max_hops`` expansions.
    """
    params.validate()
    q = _as_matrix(queries)
    if q.ndim != 2 or q.shape[1] != vectors.dims:
        raise UsageError(f"queries of shape {q.shape} do not match {vectors.dims}-dim vectors")
    if q.shape[0] == 0:
        raise UsageError("empty query set")
    if sgraph.num_sources != vectors.num_points:
        raise UsageError(
            f"search graph has {sgraph.num_sources} rows but there are {vectors.num_points} vectors"
        )
    if params.k_s > vectors.num_points:
        raise UsageError(f"k_s={params.k_s} exceeds the {vectors.num_points} searchable points")
    if isinstance(queries, Dataset) and queries.metric is not vectors.metric:
        raise UsageError("queries and vectors use different metrics")
    if q.dtype != vectors.data.dtype:
        q = q.astype(vectors.data.dtype)
    nq = q.shape[0]
    ids = np.empty((nq, params.k_s), ID_DTYPE)
    dists = np.empty((nq, params.k_s), DIST_DTYPE)
    scored = np.zeros(nq, np.int64)
    entries = entry_points(nq, vectors.num_points, params)
    hops = params.hop_limit
    width = entries.shape[1] + hops * sgraph.out_degree
    trace_buf = np.full((nq, width), EMPTY_ID, ID_DTYPE) if trace else np.zeros((0, 0), ID_DTYPE)
    prefix = params.beam_width if params.stop_rule == "beam" else params.k_s
    with worker_threads(params.workers):
        n_chunks = min(nq, 4 * numba.get_num_threads())
        _search(
            q, vectors.data, vectors.metric.code, sgraph.ids, entries,
            params.beam_width, hops, prefix, n_chunks, ids, dists, scored, trace_buf,
        )
    return SearchResult(ids, dists, scored, trace_buf if trace else None)


def search_throughput_probe(
    base: Dataset,
    sizes,
    queries,
    params: SearchParams,
    *,
    graph_k: int = 16,
    out_degree: int | None = None,
    repeats: int = 5,
    seed: int = 0,
) -> list[tuple[int, float]]:
    """Queries per second of ``ann_search`` on graphs over the first ``size`` points of ``base``.

    One graph is built per size. Each size reports the median rate over ``repeats`` timed runs.
    """
    from .nndescent import NnDescentParams, nn_descent

    sizes = [int(s) for s in sizes]
    if list(sorted(sizes)) != sizes:
        raise UsageError("sizes must be ascending")
    if sizes and sizes[-1] > base.num_points:
        raise UsageError(f"largest size {sizes[-1]} exceeds the {base.num_points} base points")
    q = _as_matrix(queries)
    if q.ndim != 2 or q.shape[0] == 0:
        raise UsageError("empty query set")
    table = []
    for size in sizes:
        part = base.slice(0, size)
        graph = nn_descent(part, NnDescentParams(k=graph_k, seed=seed, workers=params.workers))
        sgraph = optimize_graph(graph, part, out_degree)
        ann_search(q[: min(len(q), 16)], sgraph, part, params)  # warm-up
        rates = []
        for r in range(repeats):
            start = time.perf_counter()
            ann_search(q, sgraph, part, replace(params, seed=params.seed + r))
            rates.append(len(q) / (time.perf_counter() - start))
        table.append((size, statistics.median(rates)))
    return table
