"""NN-Descent kNN-graph construction with lock-free candidate buffers.

Each iteration runs three bulk-synchronous phases:

1. ``sample_neighbors`` splits every row into new/old lists and builds
   sampled reverse lists.
2. ``local_join`` compares pairs of neighbors of a common point on many
   workers. Promising pairs are appended to per-point candidate buffers.
   Each append reserves a slot with a compare-and-swap on the buffer's
   fill counter and then writes that slot. Nothing else is shared, and no
   worker ever waits on another.
3. ``apply_candidates`` gives each row to exactly one worker, which folds
   the buffered candidates into it and resets the buffer.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from ._atomics import atomic_add, atomic_cas
from .core import (
    DIST_DTYPE,
    FLAG_DTYPE,
    ID_DTYPE,
    Dataset,
    KnnGraph,
    UsageError,
    pair_distance,
    row_insert,
    row_size,
)
from .parallel import worker_threads

log = logging.getLogger(__name__)


@dataclass
class NnDescentParams:
    k: int = 32
    delta: float = 0.0001
    rho: float = 0.5
    max_iters: int = 100
    candidate_capacity: int | None = None
    seed: int = 0
    workers: int | None = None

    @property
    def capacity(self) -> int:
        return self.candidate_capacity if self.candidate_capacity is not None else 2 * self.k

    @property
    def sample_size(self) -> int:
        return max(1, math.ceil(self.rho * self.k))

    def validate(self, num_points: int) -> None:
        if not 1 <= self.k < num_points:
            raise UsageError(f"need 1 <= k < N, got k={self.k}, N={num_points}")
        if not 0.0 < self.rho <= 1.0:
            raise UsageError(f"rho must be in (0, 1], got {self.rho}")
        if self.delta < 0:
            raise UsageError(f"delta must be nonnegative, got {self.delta}")
        if self.capacity < self.k:
            raise UsageError(f"candidate_capacity {self.capacity} is smaller than k={self.k}")
        if self.max_iters < 1:
            raise UsageError("max_iters must be at least 1")


class CandidateBuffer:
    """Fixed-capacity per-point candidate lists with atomic fill counters."""

    def __init__(self, num_points: int, capacity: int):
        self.ids = np.empty((num_points, capacity), ID_DTYPE)
        self.dists = np.empty((num_points, capacity), DIST_DTYPE)
        self.fill = np.zeros(num_points, np.int32)
        self.worst = np.full(num_points, np.inf, DIST_DTYPE)
        # per-slot write counters, only allocated for audited runs
        self.audit = np.zeros(0, np.int32)

    @property
    def capacity(self) -> int:
        return self.ids.shape[1]

    def snapshot_worst(self, graph: KnnGraph) -> None:
        self.worst[:] = graph.dists[:, -1]

    def enable_audit(self) -> None:
        self.audit = np.zeros(self.ids.size, np.int32)

    def reset(self) -> None:
        self.fill[:] = 0
        if self.audit.size:
            self.audit[:] = 0

    def audit_violations(self) -> int:
        """Number of slots written other than exactly once below the fill mark."""
        if not self.audit.size:
            raise RuntimeError("audit was not enabled on this buffer")
        writes = self.audit.reshape(self.ids.shape)
        expected = np.arange(self.capacity)[None, :] < self.fill[:, None]
        bad = (writes != expected.astype(np.int32)).sum()
        return int(bad + (self.fill > self.capacity).sum())


@dataclass
class SampledLists:
    """Forward and reverse new/old neighbor lists for every point."""

    fwd_new: np.ndarray
    fwd_new_n: np.ndarray
    fwd_old: np.ndarray
    fwd_old_n: np.ndarray
    rev_new: np.ndarray
    rev_new_n: np.ndarray
    rev_old: np.ndarray
    rev_old_n: np.ndarray

    def joined(self):
        """``(new, new_n, old, old_n)`` with forward and reverse parts united."""
        n = self.fwd_new.shape[0]
        new = np.empty((n, self.fwd_new.shape[1] + self.rev_new.shape[1]), ID_DTYPE)
        old = np.empty((n, self.fwd_old.shape[1] + self.rev_old.shape[1]), ID_DTYPE)
        new_n = np.zeros(n, np.int32)
        old_n = np.zeros(n, np.int32)
        _join_lists(
            self.fwd_new, self.fwd_new_n, self.rev_new, self.rev_new_n,
            self.fwd_old, self.fwd_old_n, self.rev_old, self.rev_old_n,
            new, new_n, old, old_n,
        )
        return new, new_n, old, old_n


@njit(nogil=True, cache=True)
def _init_random(data, k, seed, metric, ids, dists, flags):
    np.random.seed(seed)
    n = data.shape[0]
    picks = np.empty(k, np.int64)
    for i in range(n):
        # Floyd's sampling of k distinct values from [0, n-2], then skip over i
        count = 0
        for j in range(n - 1 - k, n - 1):
            t = np.random.randint(0, j + 1)
            seen = False
            for s in range(count):
                if picks[s] == t:
                    seen = True
                    break
            picks[count] = j if seen else t
            count += 1
        size = 0
        for s in range(k):
            v = picks[s]
            if v >= i:
                v += 1
            d = pair_distance(data[i], data[v], metric)
            _, size = row_insert(ids[i], dists[i], flags[i], size, v, d, 1)


def init_random_graph(dataset: Dataset, k: int, seed: int = 0) -> KnnGraph:
    """Random kNN graph: k distinct non-self neighbors per row, true distances, sorted."""
    n = dataset.num_points
    if not 1 <= k < n:
        raise UsageError(f"need 1 <= k < N, got k={k}, N={n}")
    graph = KnnGraph.empty(n, k)
    graph.flags = np.ones((n, k), FLAG_DTYPE)
    _init_random(dataset.data, k, seed & 0xFFFFFFFF, dataset.metric.code, graph.ids, graph.dists, graph.flags)
    return graph


@njit(nogil=True, cache=True, inline="always")
def _reservoir_put(lists, counts, seen, j, value):
    cap = lists.shape[1]
    seen[j] += 1
    if counts[j] < cap:
        lists[j, counts[j]] = value
        counts[j] += 1
    else:
        r = np.random.randint(0, seen[j])
        if r < cap:
            lists[j, r] = value


@njit(nogil=True, cache=True)
def _sample(ids, flags, seed, fwd_new, fwd_new_n, fwd_old, fwd_old_n, rev_new, rev_new_n, rev_old, rev_old_n):
    np.random.seed(seed)
    n, k = ids.shape
    cap = fwd_new.shape[1]
    pos = np.empty(k, np.int64)
    for i in range(n):
        m = 0
        o = 0
        for j in range(k):
            if ids[i, j] < 0:
                continue
            if flags[i, j]:
                pos[m] = j
                m += 1
            else:
                fwd_old[i, o] = ids[i, j]
                o += 1
        fwd_old_n[i] = o
        take = min(m, cap)
        for t in range(take):
            s = t + np.random.randint(0, m - t)
            tmp = pos[t]
            pos[t] = pos[s]
            pos[s] = tmp
            fwd_new[i, t] = ids[i, pos[t]]
            flags[i, pos[t]] = 0
        fwd_new_n[i] = take
    seen_new = np.zeros(n, np.int64)
    seen_old = np.zeros(n, np.int64)
    for i in range(n):
        for t in range(fwd_new_n[i]):
            _reservoir_put(rev_new, rev_new_n, seen_new, fwd_new[i, t], i)
        for t in range(fwd_old_n[i]):
            _reservoir_put(rev_old, rev_old_n, seen_old, fwd_old[i, t], i)


@njit(nogil=True, cache=True, inline="always")
def _contains(row, size, value):
    for t in range(size):
        if row[t] == value:
            return True
    return False


@njit(nogil=True, cache=True)
def _join_lists(fn, fn_n, rn, rn_n, fo, fo_n, ro, ro_n, new, new_n, old, old_n):
    for i in range(fn.shape[0]):
        c = 0
        for t in range(fn_n[i]):
            new[i, c] = fn[i, t]
            c += 1
        for t in range(rn_n[i]):
            if not _contains(new[i], c, rn[i, t]):
                new[i, c] = rn[i, t]
                c += 1
        new_n[i] = c
        c = 0
        for t in range(fo_n[i]):
            v = fo[i, t]
            if not _contains(new[i], new_n[i], v) and not _contains(old[i], c, v):
                old[i, c] = v
                c += 1
        for t in range(ro_n[i]):
            v = ro[i, t]
            if not _contains(new[i], new_n[i], v) and not _contains(old[i], c, v):
                old[i, c] = v
                c += 1
        old_n[i] = c


def sample_neighbors(graph: KnnGraph, rho: float, seed: int, iteration: int) -> SampledLists:
    """Select up to ``ceil(rho*k)`` new neighbors per row (clearing their flags) plus all old ones.

    Reverse lists are the transposes of the forward lists, reservoir-sampled
    to the same bound.
    """
    if graph.flags is None:
        raise UsageError("graph rows carry no new/old flags")
    n, k = graph.ids.shape
    cap = max(1, math.ceil(rho * k))
    lists = SampledLists(
        fwd_new=np.full((n, cap), -1, ID_DTYPE),
        fwd_new_n=np.zeros(n, np.int32),
        fwd_old=np.full((n, k), -1, ID_DTYPE),
        fwd_old_n=np.zeros(n, np.int32),
        rev_new=np.full((n, cap), -1, ID_DTYPE),
        rev_new_n=np.zeros(n, np.int32),
        rev_old=np.full((n, cap), -1, ID_DTYPE),
        rev_old_n=np.zeros(n, np.int32),
    )
    _sample(
        graph.ids, graph.flags, (seed ^ iteration) & 0xFFFFFFFF,
        lists.fwd_new, lists.fwd_new_n, lists.fwd_old, lists.fwd_old_n,
        lists.rev_new, lists.rev_new_n, lists.rev_old, lists.rev_old_n,
    )
    return lists


def transpose_lists(lists: np.ndarray, counts: np.ndarray, num_points: int) -> list[np.ndarray]:
    """Unsampled reverse lists: ``j in result[i]`` iff ``i`` is in forward list ``j``."""
    src = np.repeat(np.arange(lists.shape[0]), counts)
    mask = np.arange(lists.shape[1])[None, :] < counts[:, None]
    dst = lists[mask]
    order = np.argsort(dst, kind="stable")
    bounds = np.searchsorted(dst[order], np.arange(num_points + 1))
    return [src[order[bounds[i]:bounds[i + 1]]] for i in range(num_points)]


@njit(nogil=True, cache=True, inline="always")
def _offer(buf_ids, buf_d, fill, worst, audit, u, v, d):
    if not d < worst[u]:
        return 0
    cap = buf_ids.shape[1]
    cur = atomic_cas(fill, u, -1, -1)
    while True:
        if cur >= cap:
            return 0
        seen = atomic_cas(fill, u, cur, cur + 1)
        if seen == cur:
            break
        cur = seen
    buf_ids[u, cur] = v
    buf_d[u, cur] = d
    if audit.shape[0] > 0:
        atomic_add(audit, u * cap + cur, 1)
    return 1


@njit(nogil=True, cache=True, parallel=True)
def _local_join(data, metric, new, new_n, old, old_n, buf_ids, buf_d, fill, worst, audit):
    n = new.shape[0]
    offered = np.zeros(n, np.int64)
    appended = np.zeros(n, np.int64)
    for p in prange(n):
        nn = new_n[p]
        no = old_n[p]
        o = 0
        a = 0
        for x in range(nn):
            u = new[p, x]
            for y in range(x + 1, nn):
                v = new[p, y]
                if u == v:
                    continue
                d = pair_distance(data[u], data[v], metric)
                a += _offer(buf_ids, buf_d, fill, worst, audit, u, v, d)
                a += _offer(buf_ids, buf_d, fill, worst, audit, v, u, d)
                o += 2
            for y in range(no):
                v = old[p, y]
                if u == v:
                    continue
                d = pair_distance(data[u], data[v], metric)
                a += _offer(buf_ids, buf_d, fill, worst, audit, u, v, d)
                a += _offer(buf_ids, buf_d, fill, worst, audit, v, u, d)
                o += 2
        offered[p] = o
        appended[p] = a
    return offered.sum(), appended.sum()


def local_join(dataset: Dataset, lists: SampledLists, buffers: CandidateBuffer) -> np.ndarray:
    """Evaluate neighbor pairs of every point and append improving candidates.

    Returns the per-point buffer fill counts. Candidates that arrive at a full
    buffer are dropped; later iterations get another chance at them.
    """
    new, new_n, old, old_n = lists.joined()
    offered, appended = _local_join(
        dataset.data, dataset.metric.code, new, new_n, old, old_n,
        buffers.ids, buffers.dists, buffers.fill, buffers.worst, buffers.audit,
    )
    log.debug("local join: %d offers, %d appended", offered, appended)
    return buffers.fill.copy()


@njit(nogil=True, cache=True, parallel=True)
def _apply(ids, dists, flags, buf_ids, buf_d, fill):
    n, k = ids.shape
    accepted = np.zeros(n, np.int64)
    for u in prange(n):
        f = fill[u]
        if f == 0:
            continue
        before = ids[u].copy()
        size = row_size(ids[u])
        for s in range(f):
            _, size = row_insert(ids[u], dists[u], flags[u], size, buf_ids[u, s], buf_d[u, s], 1)
        c = 0
        for t in range(size):
            if not _contains(before, k, ids[u, t]):
                c += 1
        accepted[u] = c
        fill[u] = 0
    return accepted.sum()


def apply_candidates(graph: KnnGraph, buffers: CandidateBuffer) -> int:
    """Fold buffered candidates into their rows and clear the buffers.

    Returns the number of row entries replaced by a new neighbor.
    """
    if graph.flags is None:
        graph.flags = np.zeros(graph.ids.shape, FLAG_DTYPE)
    accepted = int(_apply(graph.ids, graph.dists, graph.flags, buffers.ids, buffers.dists, buffers.fill))
    buffers.reset()
    return accepted


def nn_descent(
    dataset: Dataset,
    params: NnDescentParams,
    *,
    history: list[int] | None = None,
    audit: list[int] | None = None,
) -> KnnGraph:
    """Build an approximate kNN graph of ``dataset`` (local ids).

    ``history`` receives the accepted-update count of every iteration.
    Passing an ``audit`` list turns on per-slot write counting in the
    candidate buffers; it receives the violation count of every join phase.
    """
    n = dataset.num_points
    params.validate(n)
    graph = init_random_graph(dataset, params.k, params.seed)
    buffers = CandidateBuffer(n, params.capacity)
    if audit is not None:
        buffers.enable_audit()
    threshold = params.delta * params.k * n
    with worker_threads(params.workers):
        for it in range(1, params.max_iters + 1):
            lists = sample_neighbors(graph, params.rho, params.seed, it)
            buffers.snapshot_worst(graph)
            local_join(dataset, lists, buffers)
            if audit is not None:
                audit.append(buffers.audit_violations())
            updates = apply_candidates(graph, buffers)
            if history is not None:
                history.append(updates)
            log.debug("nn-descent iteration %d: %d updates", it, updates)
            if updates < threshold:
                break
    graph.flags = None
    return graph
