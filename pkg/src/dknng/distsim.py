"""In-process simulation of ranks with one-sided gets and barriers.

Every rank runs as its own thread. Ranks share a store of published regions.
Each region is serialized to bytes when published, so a reader always gets
an immutable snapshot. Serving a get needs no action from the owning rank.
The barrier is the only blocking primitive, and each barrier advances the
epoch counter.
"""

from __future__ import annotations

import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable

from . import wire
from .core import UsageError

log = logging.getLogger(__name__)


class DeadlockError(RuntimeError):
    """A barrier did not complete within the watchdog timeout."""


class RegionNotFound(KeyError):
    pass


@dataclass(frozen=True)
class CommRecord:
    reader: int
    owner: int
    region: str
    nbytes: int
    epoch: int
    phase: str = ""


@dataclass
class CommLog:
    records: list[CommRecord] = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def add(self, rec: CommRecord) -> None:
        with self._lock:
            self.records.append(rec)

    def select(self, *, reader=None, owner=None, region=None, phase=None) -> list[CommRecord]:
        out = []
        for r in self.records:
            if reader is not None and r.reader != reader:
                continue
            if owner is not None and r.owner != owner:
                continue
            if region is not None and r.region != region:
                continue
            if phase is not None and r.phase != phase:
                continue
            out.append(r)
        return out

    def total_bytes(self, **filters) -> int:
        return sum(r.nbytes for r in self.select(**filters))


class RankWorld:
    """Shared state of ``num_ranks`` simulated ranks."""

    def __init__(self, num_ranks: int, *, timeout: float = 60.0, log_comm: bool = True):
        if num_ranks < 1:
            raise UsageError(f"need at least one rank, got {num_ranks}")
        self.num_ranks = num_ranks
        self.timeout = timeout
        self.comm_log = CommLog() if log_comm else None
        self._store: dict[tuple[int, str], list[tuple[int, bytes]]] = {}
        self._store_lock = threading.Lock()
        self._barrier = threading.Barrier(num_ranks)
        self._epochs = [0] * num_ranks
        self._phases = [""] * num_ranks

    def handle(self, rank: int) -> "RankHandle":
        if not 0 <= rank < self.num_ranks:
            raise UsageError(f"rank {rank} outside 0..{self.num_ranks - 1}")
        return RankHandle(self, rank)

    def epoch(self, rank: int) -> int:
        return self._epochs[rank]

    def publish(self, rank: int, name: str, payload) -> int:
        blob = payload if isinstance(payload, (bytes, bytearray)) else wire.encode(payload)
        blob = bytes(blob)
        epoch = self._epochs[rank]
        with self._store_lock:
            versions = self._store.setdefault((rank, name), [])
            if versions and versions[-1][0] == epoch:
                raise UsageError(f"rank {rank} already published {name!r} in epoch {epoch}")
            versions.append((epoch, blob))
        return epoch

    def get_bytes(self, rank: int, target: int, name: str) -> bytes:
        if not 0 <= target < self.num_ranks:
            raise UsageError(f"target rank {target} outside 0..{self.num_ranks - 1}")
        epoch = self._epochs[rank]
        with self._store_lock:
            versions = self._store.get((target, name), ())
            blob = None
            for ver, data in reversed(versions):
                if ver <= epoch:
                    blob = data
                    break
        if blob is None:
            raise RegionNotFound(f"rank {target} has not published {name!r} by epoch {epoch}")
        if self.comm_log is not None:
            self.comm_log.add(CommRecord(rank, target, name, len(blob), epoch, self._phases[rank]))
        return blob

    def one_sided_get(self, rank: int, target: int, name: str, **decode_kw):
        return wire.decode(self.get_bytes(rank, target, name), **decode_kw)

    def barrier(self, rank: int) -> None:
        try:
            self._barrier.wait(self.timeout)
        except threading.BrokenBarrierError:
            raise DeadlockError(
                f"rank {rank} timed out or was aborted at barrier in epoch {self._epochs[rank]}"
            ) from None
        self._epochs[rank] += 1

    def abort(self) -> None:
        self._barrier.abort()

    def run(self, rank_body: Callable[["RankHandle"], Any]) -> list:
        """Run ``rank_body`` on every rank concurrently; returns per-rank results.

        The first rank failure aborts the world and is re-raised.
        """
        results: list = [None] * self.num_ranks
        failures: list[tuple[int, BaseException]] = []
        fail_lock = threading.Lock()

        def target(rank: int) -> None:
            try:
                results[rank] = rank_body(self.handle(rank))
            except BaseException as exc:  # noqa: BLE001 - re-raised in the caller
                with fail_lock:
                    failures.append((rank, exc))
                self.abort()

        threads = [
            threading.Thread(target=target, args=(r,), name=f"rank-{r}", daemon=True)
            for r in range(self.num_ranks)
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if failures:
            # a DeadlockError on other ranks is usually a consequence of the real failure
            primary = [f for f in failures if not isinstance(f[1], DeadlockError)] or failures
            rank, exc = primary[0]
            log.error("rank %d failed: %r", rank, exc)
            raise exc
        return results


class RankHandle:
    """One rank's view of the world, passed to the rank body."""

    def __init__(self, world: RankWorld, rank: int):
        self.world = world
        self.rank = rank

    @property
    def size(self) -> int:
        return self.world.num_ranks

    @property
    def epoch(self) -> int:
        return self.world.epoch(self.rank)

    def publish(self, name: str, payload) -> int:
        return self.world.publish(self.rank, name, payload)

    def get(self, target: int, name: str, **decode_kw):
        return self.world.one_sided_get(self.rank, target, name, **decode_kw)

    def barrier(self) -> None:
        self.world.barrier(self.rank)

    @contextmanager
    def phase(self, label: str):
        """Tag this rank's gets in the comm log with ``label``."""
        prev = self.world._phases[self.rank]
        self.world._phases[self.rank] = label
        try:
            yield
        finally:
            self.world._phases[self.rank] = prev


def spawn_world(num_ranks: int, rank_body: Callable[[RankHandle], Any], **world_kw) -> list:
    return RankWorld(num_ranks, **world_kw).run(rank_body)


def publish(handle: RankHandle, name: str, payload) -> int:
    return handle.publish(name, payload)


def one_sided_get(handle: RankHandle, target: int, name: str, **decode_kw):
    return handle.get(target, name, **decode_kw)


def barrier(handle: RankHandle) -> None:
    handle.barrier()
