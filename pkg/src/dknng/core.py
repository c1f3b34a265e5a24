"""Shared types, distance metrics and bounded sorted neighbor-list operations.

Every neighbor row in this package is kept sorted ascending by ``(dist, id)``.
Rows are fixed-capacity arrays; unused trailing slots hold id ``-1`` and
distance ``+inf``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from numba import njit, prange

ID_DTYPE = np.int32
DIST_DTYPE = np.float32
FLAG_DTYPE = np.uint8

EMPTY_ID = -1


class UsageError(ValueError):
    """Invalid arguments or violated preconditions."""


class Metric(str, enum.Enum):
    L2 = "l2"
    COSINE = "cosine_distance"

    @classmethod
    def parse(cls, name: "str | Metric") -> "Metric":
        if isinstance(name, Metric):
            return name
        key = str(name).strip().lower()
        if key in ("l2", "euclidean"):
            return cls.L2
        if key in ("cosine", "cosine_distance", "angular"):
            return cls.COSINE
        raise UsageError(f"unknown metric {name!r}; expected 'l2' or 'cosine'")

    @property
    def code(self) -> int:
        return 0 if self is Metric.L2 else 1


ELEMENT_KINDS = {"float32": np.dtype(np.float32), "uint8": np.dtype(np.uint8)}


@dataclass
class Dataset:
    """``num_points`` fixed-dimensional vectors stored row-major."""

    data: np.ndarray
    metric: Metric = Metric.L2

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise UsageError(f"dataset must be a 2-D array, got shape {data.shape}")
        if data.dtype not in ELEMENT_KINDS.values():
            raise UsageError(f"unsupported element type {data.dtype}; use float32 or uint8")
        self.data = np.ascontiguousarray(data)
        self.metric = Metric.parse(self.metric)

    @property
    def num_points(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> int:
        return self.data.shape[1]

    @property
    def element_kind(self) -> str:
        return self.data.dtype.name

    def __len__(self) -> int:
        return self.num_points

    def slice(self, lo: int, hi: int) -> "Dataset":
        return Dataset(self.data[lo:hi], self.metric)

    def take(self, index) -> "Dataset":
        return Dataset(self.data[np.asarray(index)], self.metric)

    @staticmethod
    def concatenate(parts: Sequence["Dataset"]) -> "Dataset":
        if not parts:
            raise UsageError("nothing to concatenate")
        metric = parts[0].metric
        if any(p.metric is not metric for p in parts):
            raise UsageError("cannot concatenate datasets with different metrics")
        return Dataset(np.concatenate([p.data for p in parts], axis=0), metric)


class NeighborEntry(NamedTuple):
    id: int
    dist: float
    flag: bool = False


@dataclass
class KnnGraph:
    """``N x k`` neighbor ids and distances held as two separate matrices."""

    ids: np.ndarray
    dists: np.ndarray
    id_space: str = "local"
    flags: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.ids = np.ascontiguousarray(self.ids, dtype=ID_DTYPE)
        self.dists = np.ascontiguousarray(self.dists, dtype=DIST_DTYPE)
        if self.ids.ndim != 2 or self.ids.shape != self.dists.shape:
            raise UsageError(
                f"ids {self.ids.shape} and dists {self.dists.shape} must be matching 2-D matrices"
            )
        if self.id_space not in ("local", "global"):
            raise UsageError(f"id_space must be 'local' or 'global', not {self.id_space!r}")

    @property
    def num_sources(self) -> int:
        return self.ids.shape[0]

    @property
    def k(self) -> int:
        return self.ids.shape[1]

    @classmethod
    def empty(cls, num_sources: int, k: int, id_space: str = "local") -> "KnnGraph":
        return cls(
            np.full((num_sources, k), EMPTY_ID, ID_DTYPE),
            np.full((num_sources, k), np.inf, DIST_DTYPE),
            id_space,
        )

    def copy(self) -> "KnnGraph":
        flags = None if self.flags is None else self.flags.copy()
        return KnnGraph(self.ids.copy(), self.dists.copy(), self.id_space, flags)

    def truncate(self, k: int) -> "KnnGraph":
        if k > self.k:
            raise UsageError(f"cannot truncate a k={self.k} graph to k={k}")
        return KnnGraph(self.ids[:, :k].copy(), self.dists[:, :k].copy(), self.id_space)

    def row(self, r: int) -> list[NeighborEntry]:
        return [
            NeighborEntry(int(i), float(d))
            for i, d in zip(self.ids[r], self.dists[r])
            if i != EMPTY_ID
        ]

    def validate(self, self_offset: int = 0) -> None:
        """Raise ``ValueError`` if any row breaks the ordering, dedup or self-loop rules.

        ``self_offset`` is the id of row 0 in this graph's id space.
        """
        problems = _check_rows(self.ids, self.dists, self_offset)
        if problems >= 0:
            raise ValueError(f"row {problems} violates the kNN-graph invariants")


@njit(nogil=True, cache=True)
def l2_distance(a, b):
    acc = 0.0
    for i in range(a.shape[0]):
        t = np.float64(a[i]) - np.float64(b[i])
        acc += t * t
    return np.float32(math.sqrt(acc))


@njit(nogil=True, cache=True)
def cosine_distance(a, b):
    dot = 0.0
    na = 0.0
    nb = 0.0
    for i in range(a.shape[0]):
        x = np.float64(a[i])
        y = np.float64(b[i])
        dot += x * y
        na += x * x
        nb += y * y
    if na == 0.0 or nb == 0.0:
        return np.float32(1.0)
    d = 1.0 - dot / math.sqrt(na * nb)
    if d < 0.0:
        d = 0.0
    return np.float32(d)


@njit(nogil=True, cache=True)
def pair_distance(a, b, metric):
    if metric == 0:
        return l2_distance(a, b)
    return cosine_distance(a, b)


@njit(nogil=True, cache=True, inline="always")
def precedes(d1, i1, d2, i2):
    """Strict ``(dist, id)`` lexicographic order."""
    return d1 < d2 or (d1 == d2 and i1 < i2)


@njit(nogil=True, cache=True)
def row_insert(ids, dists, flags, size, cid, cdist, cflag):
    """Insert into a sorted fixed-capacity row; returns ``(accepted, new_size)``.

    ``flags`` may be a zero-length array when the row carries no flags.
    """
    cap = ids.shape[0]
    if size == cap:
        if cap == 0 or not precedes(cdist, cid, dists[cap - 1], ids[cap - 1]):
            return False, size
    for j in range(size):
        if ids[j] == cid:
            return False, size
    if size == cap:
        pos = cap - 1
    else:
        pos = size
        size += 1
    has_flags = flags.shape[0] > 0
    while pos > 0 and precedes(cdist, cid, dists[pos - 1], ids[pos - 1]):
        ids[pos] = ids[pos - 1]
        dists[pos] = dists[pos - 1]
        if has_flags:
            flags[pos] = flags[pos - 1]
        pos -= 1
    ids[pos] = cid
    dists[pos] = cdist
    if has_flags:
        flags[pos] = cflag
    return True, size


@njit(nogil=True, cache=True)
def row_size(ids):
    n = 0
    while n < ids.shape[0] and ids[n] != EMPTY_ID:
        n += 1
    return n


@njit(nogil=True, cache=True)
def merge_sorted(a_ids, a_d, b_ids, b_d, out_ids, out_d):
    """k-way (k = len(out_ids)) merge of two sorted rows, dropping repeated ids."""
    k = out_ids.shape[0]
    na = row_size(a_ids)
    nb = row_size(b_ids)
    i = 0
    j = 0
    n = 0
    while n < k and (i < na or j < nb):
        if j >= nb or (i < na and not precedes(b_d[j], b_ids[j], a_d[i], a_ids[i])):
            cid = a_ids[i]
            cd = a_d[i]
            i += 1
        else:
            cid = b_ids[j]
            cd = b_d[j]
            j += 1
        dup = False
        for t in range(n):
            if out_ids[t] == cid:
                dup = True
                break
        if not dup:
            out_ids[n] = cid
            out_d[n] = cd
            n += 1
    for t in range(n, k):
        out_ids[t] = EMPTY_ID
        out_d[t] = np.inf
    return n


@njit(nogil=True, cache=True, parallel=True)
def merge_rows_inplace(g_ids, g_d, r_ids, r_d):
    """Merge candidate rows ``r`` into graph rows ``g``; returns how many entries changed."""
    n, k = g_ids.shape
    changed = np.zeros(n, np.int64)
    for row in prange(n):
        out_ids = np.empty(k, g_ids.dtype)
        out_d = np.empty(k, g_d.dtype)
        merge_sorted(g_ids[row], g_d[row], r_ids[row], r_d[row], out_ids, out_d)
        c = 0
        for t in range(k):
            found = False
            for s in range(k):
                if g_ids[row, s] == out_ids[t]:
                    found = True
                    break
            if not found:
                c += 1
        changed[row] = c
        g_ids[row, :] = out_ids
        g_d[row, :] = out_d
    return changed.sum()


@njit(nogil=True, cache=True)
def _check_rows(ids, dists, offset):
    n, k = ids.shape
    for r in range(n):
        size = row_size(ids[r])
        for j in range(size, k):
            if ids[r, j] != EMPTY_ID:
                return r
        for j in range(size):
            if ids[r, j] == r + offset or dists[r, j] < 0:
                return r
            if j > 0 and not precedes(dists[r, j - 1], ids[r, j - 1], dists[r, j], ids[r, j]):
                return r
            for t in range(j):
                if ids[r, t] == ids[r, j]:
                    return r
    return -1


def distance(metric: Metric | str, a, b) -> float:
    """Distance between two vectors; smaller means more similar."""
    metric = Metric.parse(metric)
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 1 or a.shape != b.shape:
        raise UsageError(f"dimension mismatch: {a.shape} vs {b.shape}")
    if a.dtype != b.dtype:
        a = a.astype(np.float32)
        b = b.astype(np.float32)
    return float(pair_distance(a, b, metric.code))


def _row_arrays(row: Sequence[NeighborEntry], cap: int):
    ids = np.full(cap, EMPTY_ID, ID_DTYPE)
    dists = np.full(cap, np.inf, DIST_DTYPE)
    flags = np.zeros(cap, FLAG_DTYPE)
    for j, e in enumerate(row):
        ids[j] = e.id
        dists[j] = e.dist
        flags[j] = bool(e.flag)
    return ids, dists, flags


def knn_insert(row: list[NeighborEntry], cand: NeighborEntry, k: int) -> bool:
    """Insert ``cand`` into the sorted bounded list ``row`` in place.

    Rejects duplicates and candidates that do not beat the current k-th entry.
    """
    if len(row) > k:
        raise UsageError(f"row holds {len(row)} entries but k={k}")
    ids, dists, flags = _row_arrays(row, k)
    cand = NeighborEntry(*cand)
    accepted, size = row_insert(
        ids, dists, flags, len(row), ID_DTYPE(cand.id), DIST_DTYPE(cand.dist), FLAG_DTYPE(cand.flag)
    )
    if accepted:
        row[:] = [NeighborEntry(int(ids[j]), float(dists[j]), bool(flags[j])) for j in range(size)]
    return bool(accepted)


def merge_rows(
    row_a: Sequence[NeighborEntry], row_b: Sequence[NeighborEntry], k: int
) -> list[NeighborEntry]:
    """The ``k`` closest distinct entries of the union of two sorted rows."""
    a_ids, a_d, _ = _row_arrays(row_a, max(len(row_a), 1))
    b_ids, b_d, _ = _row_arrays(row_b, max(len(row_b), 1))
    out_ids = np.empty(k, ID_DTYPE)
    out_d = np.empty(k, DIST_DTYPE)
    n = merge_sorted(a_ids, a_d, b_ids, b_d, out_ids, out_d)
    return [NeighborEntry(int(out_ids[j]), float(out_d[j])) for j in range(n)]


def merge_into(graph: KnnGraph, ids: np.ndarray, dists: np.ndarray) -> int:
    """Merge per-row candidate lists into ``graph`` in place; returns changed-entry count."""
    ids = np.ascontiguousarray(ids, dtype=ID_DTYPE)
    dists = np.ascontiguousarray(dists, dtype=DIST_DTYPE)
    if ids.shape[0] != graph.num_sources or ids.shape != dists.shape:
        raise UsageError(
            f"candidate matrix {ids.shape} does not match graph with {graph.num_sources} rows"
        )
    return int(merge_rows_inplace(graph.ids, graph.dists, ids, dists))
