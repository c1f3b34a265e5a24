"""Distributed kNN-graph construction on simulated ranks.

Pipeline: partition -> local NN-Descent -> binary-tree refinement -> grouped
merge -> flat refinement -> id translation. The per-phase functions are
written SPMD-style: every rank calls them with its own ``RankHandle``.

Id spaces: the partition shuffles the points and gives each rank a
contiguous block of *global* ids, so rank blocks concatenated in rank order
stay contiguous. *External* ids are the row indices of the input dataset.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .annsearch import SearchParams, ann_search
from .core import ID_DTYPE, Dataset, KnnGraph, UsageError, merge_into
from .distsim import RankHandle, RankWorld
from .graphopt import SearchGraph, optimize_graph
from .nndescent import NnDescentParams, nn_descent
from .parallel import default_workers

log = logging.getLogger(__name__)

PHASES = ("local", "tree", "merge", "flat", "etc")


def _is_pow2(x: int) -> bool:
    return x >= 1 and (x & (x - 1)) == 0


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(1)[0])


@dataclass
class RefineConfig:
    P: int = 1
    M: int | None = None
    k: int = 32
    k_s: int | None = None
    nn_params: NnDescentParams | None = None
    search_params: SearchParams | None = None
    out_degree: int | None = None
    skip_tree_phase: bool = False
    double_buffer: bool = False
    seed: int = 0
    # bytes per rank for the concatenated group graph; None disables the fallback
    memory_budget: int | None = None
    workers: int | None = None
    timeout: float = 60.0

    def __post_init__(self):
        if self.M is None:
            self.M = 1 if self.P == 1 else 2
        if self.k_s is None:
            self.k_s = self.k
        nn = self.nn_params or NnDescentParams(k=self.k, seed=self.seed)
        self.nn_params = replace(nn, k=self.k)
        sp = self.search_params or SearchParams()
        self.search_params = replace(sp, k_s=self.k_s, beam_width=max(sp.beam_width, self.k_s), seed=self.seed)

    def validate(self) -> None:
        P, M = self.P, self.M
        if not _is_pow2(P):
            raise UsageError(f"rank count P={P} must be a power of two")
        if P == 1:
            if M != 1:
                raise UsageError(f"with a single rank M must be 1, got {M}")
        elif not (_is_pow2(M) and 2 <= M <= P):
            raise UsageError(f"group count M={M} must be a power of two with 2 <= M <= P={P}")
        if not 1 <= self.k_s:
            raise UsageError("k_s must be positive")
        if self.out_degree is not None and not 1 <= self.out_degree <= self.k:
            raise UsageError(f"out_degree must be in 1..k={self.k}")
        self.search_params.validate()

    @property
    def groups(self) -> int:
        """Groups left after the tree phase; skipping it leaves one rank per group."""
        return self.P if self.skip_tree_phase else self.M

    @property
    def tree_levels(self) -> int:
        return int(math.log2(self.P // self.groups))

    @property
    def group_size(self) -> int:
        return self.P // self.groups


@dataclass
class Partition:
    """Shuffled, contiguous block partition of a dataset over ``P`` ranks."""

    perm: np.ndarray  # global id -> external id
    offsets: np.ndarray  # rank r owns global ids offsets[r]:offsets[r+1]
    parts: list[Dataset]

    @property
    def num_ranks(self) -> int:
        return len(self.parts)

    @property
    def num_points(self) -> int:
        return int(self.offsets[-1])

    @property
    def inverse(self) -> np.ndarray:
        inv = np.empty_like(self.perm)
        inv[self.perm] = np.arange(len(self.perm), dtype=self.perm.dtype)
        return inv

    def span(self, lo_rank: int, hi_rank: int) -> tuple[int, int]:
        """Global id range covered by ranks ``lo_rank..hi_rank-1``."""
        return int(self.offsets[lo_rank]), int(self.offsets[hi_rank])

    def owner(self, gid) -> np.ndarray:
        return np.searchsorted(self.offsets, gid, side="right") - 1

    def to_local(self, gid):
        rank = self.owner(gid)
        return rank, np.asarray(gid) - self.offsets[rank]

    def to_global(self, rank, lid):
        return self.offsets[rank] + np.asarray(lid)

    def to_external(self, gid):
        return self.perm[gid]

    def externalize(self, graph: KnnGraph) -> KnnGraph:
        """Global-id graph with global row order -> external ids in dataset row order."""
        ids = np.where(graph.ids >= 0, self.perm[np.maximum(graph.ids, 0)], -1)
        out_ids = np.empty_like(ids)
        out_d = np.empty_like(graph.dists)
        out_ids[self.perm] = ids
        out_d[self.perm] = graph.dists
        return KnnGraph(out_ids, out_d, "global")


def partition_dataset(dataset: Dataset, P: int, seed: int = 0) -> Partition:
    n = dataset.num_points
    if not 1 <= P <= n:
        raise UsageError(f"cannot split {n} points over {P} ranks")
    if P == 1:
        perm = np.arange(n, dtype=np.int64)
    else:
        perm = np.random.default_rng(seed).permutation(n).astype(np.int64)
    base, extra = divmod(n, P)
    sizes = np.array([base + (r < extra) for r in range(P)], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    parts = [dataset.take(perm[offsets[r]:offsets[r + 1]]) for r in range(P)]
    return Partition(perm, offsets, parts)


class TreeStep(NamedTuple):
    group_lo: int
    group_hi: int  # exclusive
    partners: tuple[int, ...]


def tree_schedule(P: int, M: int, rank: int, level: int) -> TreeStep:
    """Own group and partner ranks of ``rank`` at tree ``level`` (group size ``2**level``)."""
    if not (_is_pow2(P) and _is_pow2(M) and M <= P):
        raise UsageError(f"invalid P={P}, M={M}")
    levels = int(math.log2(P // M))
    if not 0 <= level < levels:
        raise UsageError(f"level {level} outside 0..{levels - 1} for P={P}, M={M}")
    if not 0 <= rank < P:
        raise UsageError(f"rank {rank} outside 0..{P - 1}")
    size = 1 << level
    group = rank // size
    lo = group * size
    partner_lo = (group ^ 1) * size
    return TreeStep(lo, lo + size, tuple(range(partner_lo, partner_lo + size)))


@dataclass
class CostModel:
    S: float
    alpha: float
    beta: float
    # "constant": S per query; "log": S * log2(N/P) per query
    search_cost_mode: str = "constant"

    def __post_init__(self):
        if min(self.S, self.alpha, self.beta) < 0:
            raise UsageError("cost model parameters must be nonnegative")
        if self.search_cost_mode not in ("constant", "log"):
            raise UsageError(f"unknown search_cost_mode {self.search_cost_mode!r}")


def predicted_runtime(cm: CostModel, N: float, P: int, M: int) -> dict[str, float]:
    """Per-phase runtime prediction of the refinement pipeline (tree, merge, flat, total)."""
    if not (_is_pow2(P) and _is_pow2(M) and M <= P):
        raise UsageError(f"M={M} must be a power of two no larger than P={P} (also a power of two)")
    n = N / P
    S = cm.S * math.log2(n) if cm.search_cost_mode == "log" else cm.S
    round_trip = cm.alpha + n * cm.beta
    tree = S * n * math.log2(P / M) + (P / M - 1) * round_trip
    merge = (P / M) * round_trip
    flat = (M - 1) * (S * n + (P / M) * round_trip)
    return {"tree": tree, "merge": merge, "flat": flat, "total": tree + merge + flat}


@dataclass
class BuildTrace:
    """Per-phase snapshots and timings collected by :func:`build_distributed`."""

    snapshots: dict[str, dict[int, tuple[np.ndarray, np.ndarray]]] = field(default_factory=dict)
    timings: dict[int, dict[str, float]] = field(default_factory=dict)
    world: RankWorld | None = None
    partition: Partition | None = None
    keep_snapshots: bool = True

    def record(self, label: str, rank: int, graph: KnnGraph) -> None:
        if self.keep_snapshots:
            self.snapshots.setdefault(label, {})[rank] = (graph.ids.copy(), graph.dists.copy())

    @property
    def labels(self) -> list[str]:
        return list(self.snapshots)

    def graph(self, label: str) -> KnnGraph:
        """Snapshot ``label`` assembled over all ranks, in external ids and row order."""
        per_rank = self.snapshots[label]
        ranks = sorted(per_rank)
        g = KnnGraph(
            np.concatenate([per_rank[r][0] for r in ranks]),
            np.concatenate([per_rank[r][1] for r in ranks]),
            "global",
        )
        return self.partition.externalize(g)

    def phase_times(self) -> dict[str, float]:
        """Slowest rank's wall time for each phase."""
        return {p: max((t.get(p, 0.0) for t in self.timings.values()), default=0.0) for p in PHASES}


def _to_local_ids(graph: KnnGraph, lo: int, hi: int) -> KnnGraph:
    ids = graph.ids
    valid = ids >= 0
    if np.any(valid & ((ids < lo) | (ids >= hi))):
        raise RuntimeError(f"graph references ids outside the expected span [{lo}, {hi})")
    return KnnGraph(np.where(valid, ids - lo, -1), graph.dists, "local")


def _concat_graphs(graphs: list[KnnGraph], lo: int, hi: int) -> KnnGraph:
    g = KnnGraph(np.concatenate([x.ids for x in graphs]), np.concatenate([x.dists for x in graphs]), "global")
    return _to_local_ids(g, lo, hi)


def _search_and_merge(h: RankHandle, local: Dataset, G: KnnGraph, sg: SearchGraph, vectors: Dataset, lo: int, cfg: RefineConfig) -> int:
    params = replace(cfg.search_params, seed=derive_seed(cfg.seed, h.rank, lo), workers=_rank_workers(cfg))
    res = ann_search(local, sg, vectors, params)
    ids = np.where(res.ids >= 0, res.ids + lo, -1).astype(ID_DTYPE)
    return merge_into(G, ids, res.dists)


def _rank_workers(cfg: RefineConfig) -> int:
    if cfg.workers is not None:
        return cfg.workers
    return max(1, default_workers() // cfg.P)


class _RankState:
    def __init__(self, h: RankHandle, partition: Partition, cfg: RefineConfig):
        self.h = h
        self.partition = partition
        self.cfg = cfg
        self.local = partition.parts[h.rank]
        self.lo, self.hi = partition.span(h.rank, h.rank + 1)
        # datasets pulled during the tree phase, reused by the grouped merge
        self.pulled: dict[int, Dataset] = {h.rank: self.local}

    def get_data(self, rank: int) -> Dataset:
        if rank in self.pulled:
            return self.pulled[rank]
        return self.h.get(rank, "data", metric=self.local.metric)


def local_build(h: RankHandle, partition: Partition, cfg: RefineConfig) -> KnnGraph:
    """NN-Descent on this rank's block; returns a global-id graph."""
    local = partition.parts[h.rank]
    params = replace(cfg.nn_params, seed=cfg.nn_params.seed + h.rank, workers=_rank_workers(cfg))
    g = nn_descent(local, params)
    lo = int(partition.offsets[h.rank])
    return KnnGraph(g.ids + lo, g.dists, "global")


def binary_tree_refine(
    h: RankHandle, partition: Partition, G: KnnGraph, cfg: RefineConfig, *, state=None, trace: BuildTrace | None = None
) -> KnnGraph:
    """Hierarchical refinement until ``cfg.groups`` groups remain; updates ``G`` in place."""
    st = state or _RankState(h, partition, cfg)
    for level in range(cfg.tree_levels):
        step = tree_schedule(cfg.P, cfg.groups, h.rank, level)
        h.publish("knng", G)
        h.barrier()
        with h.phase("tree"):
            datasets = [h.get(p, "data", metric=st.local.metric) for p in step.partners]
            graphs = [h.get(p, "knng", id_space="global") for p in step.partners]
        st.pulled.update(zip(step.partners, datasets))
        lo, hi = partition.span(step.partners[0], step.partners[-1] + 1)
        vectors = Dataset.concatenate(datasets)
        sg = optimize_graph(_concat_graphs(graphs, lo, hi), vectors, cfg.out_degree)
        params = replace(cfg.search_params, seed=derive_seed(cfg.seed, h.rank, lo), workers=_rank_workers(cfg))
        res = ann_search(st.local, sg, vectors, params)
        # nobody may still be reading this level's graphs when they change
        h.barrier()
        merge_into(G, np.where(res.ids >= 0, res.ids + lo, -1), res.dists)
        h.barrier()
        if trace is not None:
            trace.record(f"tree{level}", h.rank, G)
    return G


def grouped_merge(
    h: RankHandle, partition: Partition, G: KnnGraph, cfg: RefineConfig, *, state=None
) -> tuple[SearchGraph, int]:
    """Search graph over the whole group, identical on every member; returns it with its first global id."""
    st = state or _RankState(h, partition, cfg)
    gs = cfg.group_size
    first = (h.rank // gs) * gs
    members = range(first, first + gs)
    lo, hi = partition.span(first, first + gs)
    if gs == 1:
        sg = optimize_graph(_to_local_ids(G, lo, hi), st.local, cfg.out_degree)
    else:
        h.publish("knng", G)
        h.barrier()
        with h.phase("merge"):
            graphs = [G if m == h.rank else h.get(m, "knng", id_space="global") for m in members]
            datasets = [st.get_data(m) for m in members]
        sg = optimize_graph(_concat_graphs(graphs, lo, hi), Dataset.concatenate(datasets), cfg.out_degree)
    h.publish("sgraph", sg)
    h.barrier()
    return sg, lo


def flat_refine(h: RankHandle, partition: Partition, G: KnnGraph, cfg: RefineConfig, *, trace: BuildTrace | None = None) -> KnnGraph:
    """Search every other group's graph with this rank's points; no barriers needed."""
    gs = cfg.group_size
    ngroups = cfg.groups
    own = h.rank // gs
    pos = h.rank % gs
    metric = partition.parts[h.rank].metric
    local = partition.parts[h.rank]
    # start with the next group so owners are not all hit at once
    targets = [(own + t) % ngroups for t in range(1, ngroups)]

    def fetch(group: int):
        first = group * gs
        sg = h.get(first + pos, "sgraph")
        vectors = Dataset.concatenate([h.get(m, "data", metric=metric) for m in range(first, first + gs)])
        return sg, vectors, partition.span(first, first + gs)[0]

    with h.phase("flat"):
        if cfg.double_buffer and len(targets) > 1:
            with ThreadPoolExecutor(max_workers=1, thread_name_prefix=f"prefetch-{h.rank}") as pool:
                pending = pool.submit(fetch, targets[0])
                for i in range(len(targets)):
                    sg, vectors, lo = pending.result()
                    if i + 1 < len(targets):
                        pending = pool.submit(fetch, targets[i + 1])
                    _search_and_merge(h, local, G, sg, vectors, lo, cfg)
        else:
            for group in targets:
                sg, vectors, lo = fetch(group)
                _search_and_merge(h, local, G, sg, vectors, lo, cfg)
    if trace is not None:
        trace.record("flat", h.rank, G)
    return G


def all_to_all_refine(h: RankHandle, partition: Partition, G: KnnGraph, cfg: RefineConfig) -> KnnGraph:
    """Baseline: search every other rank's own search graph directly."""
    local = partition.parts[h.rank]
    lo, hi = partition.span(h.rank, h.rank + 1)
    h.publish("sgraph", optimize_graph(_to_local_ids(G, lo, hi), local, cfg.out_degree))
    h.barrier()
    with h.phase("all-to-all"):
        for t in range(1, cfg.P):
            j = (h.rank + t) % cfg.P
            sg = h.get(j, "sgraph")
            vectors = h.get(j, "data", metric=local.metric)
            _search_and_merge(h, local, G, sg, vectors, partition.span(j, j + 1)[0], cfg)
    return G


def _group_footprint(partition: Partition, cfg: RefineConfig) -> int:
    n = partition.num_points / cfg.P * (cfg.P // cfg.M)
    d = cfg.out_degree or cfg.k
    item = partition.parts[0].data.itemsize
    return int(n * (cfg.k * 8 + d * 4 + partition.parts[0].dims * item))


def build_distributed(dataset: Dataset, cfg: RefineConfig, *, trace: BuildTrace | None = None) -> KnnGraph:
    """Build a kNN graph of ``dataset`` on ``cfg.P`` simulated ranks; external ids, input row order."""
    cfg.validate()
    cfg.nn_params.validate(-(-dataset.num_points // cfg.P))
    partition = partition_dataset(dataset, cfg.P, cfg.seed)
    if (
        cfg.memory_budget is not None
        and not cfg.skip_tree_phase
        and cfg.P > 1
        and _group_footprint(partition, cfg) > cfg.memory_budget
    ):
        log.info("group graph exceeds the memory budget; skipping the tree phase")
        cfg = replace(cfg, skip_tree_phase=True)
    world = RankWorld(cfg.P, timeout=cfg.timeout)
    if trace is not None:
        trace.world = world
        trace.partition = partition

    def body(h: RankHandle):
        times = {}
        st = _RankState(h, partition, cfg)
        t0 = time.perf_counter()
        h.publish("data", st.local)
        G = local_build(h, partition, cfg)
        if trace is not None:
            trace.record("local", h.rank, G)
        t1 = time.perf_counter()
        times["local"] = t1 - t0
        binary_tree_refine(h, partition, G, cfg, state=st, trace=trace)
        t2 = time.perf_counter()
        times["tree"] = t2 - t1
        if cfg.groups > 1:
            grouped_merge(h, partition, G, cfg, state=st)
        t3 = time.perf_counter()
        times["merge"] = t3 - t2
        flat_refine(h, partition, G, cfg, trace=trace)
        t4 = time.perf_counter()
        times["flat"] = t4 - t3
        ext = partition.to_external(G.ids)
        rows = partition.perm[st.lo:st.hi]
        times["etc"] = time.perf_counter() - t4
        if trace is not None:
            trace.timings[h.rank] = times
        return rows, ext, G.dists

    n, k = dataset.num_points, cfg.k
    out = KnnGraph.empty(n, k, "global")
    for rows, ids, dists in world.run(body):
        out.ids[rows] = ids
        out.dists[rows] = dists
    return out
