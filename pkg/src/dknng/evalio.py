"""Vector file I/O, synthetic data, brute-force ground truth and recall metrics."""

from __future__ import annotations

import hashlib
import os
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit, prange

from . import wire
from .core import DIST_DTYPE, ID_DTYPE, Dataset, KnnGraph, Metric, UsageError, pair_distance, row_insert

_VEC_DTYPES = {
    "float32": np.dtype("<f4"),
    "uint8": np.dtype("u1"),
    "int32": np.dtype("<i4"),
}
_EXTENSIONS = {".fvecs": "float32", ".bvecs": "uint8", ".ivecs": "int32"}


class VecsFormatError(ValueError):
    pass


def _kind_for(path, elem_kind: str | None) -> str:
    if elem_kind is not None:
        if elem_kind not in _VEC_DTYPES:
            raise UsageError(f"unknown element kind {elem_kind!r}")
        return elem_kind
    ext = Path(path).suffix.lower()
    try:
        return _EXTENSIONS[ext]
    except KeyError:
        raise UsageError(f"cannot infer element kind from extension {ext!r}") from None


def read_vecs_array(path, elem_kind: str | None = None) -> np.ndarray:
    """Read an .fvecs/.bvecs/.ivecs file into an ``N x dims`` array."""
    kind = _kind_for(path, elem_kind)
    dtype = _VEC_DTYPES[kind]
    raw = Path(path).read_bytes()
    if not raw:
        return np.zeros((0, 0), dtype.newbyteorder("="))
    if len(raw) < 4:
        raise VecsFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    dims = int(np.frombuffer(raw, "<i4", 1)[0])
    if dims <= 0:
        raise VecsFormatError(f"{path}: row 0 has invalid dimension {dims}")
    row_bytes = 4 + dims * dtype.itemsize
    if len(raw) % row_bytes == 0:
        rows = len(raw) // row_bytes
        rec = np.frombuffer(raw, np.dtype([("d", "<i4"), ("v", dtype, (dims,))]), rows)
        bad = np.flatnonzero(rec["d"] != dims)
        if bad.size == 0:
            return rec["v"].astype(dtype.newbyteorder("="))
    # slow path: locate the first offending row for the diagnostic
    off = 0
    row = 0
    while off < len(raw):
        if off + 4 > len(raw):
            raise VecsFormatError(f"{path}: truncated dimension field at row {row} (byte {off})")
        d = int(np.frombuffer(raw, "<i4", 1, off)[0])
        if d != dims:
            raise VecsFormatError(f"{path}: row {row} has dimension {d}, expected {dims}")
        if off + row_bytes > len(raw):
            raise VecsFormatError(
                f"{path}: row {row} truncated ({len(raw) - off - 4} of {dims * dtype.itemsize} payload bytes)"
            )
        off += row_bytes
        row += 1
    raise VecsFormatError(f"{path}: malformed file")  # pragma: no cover


def read_vecs(path, elem_kind: str | None = None, metric: Metric | str = Metric.L2) -> Dataset:
    kind = _kind_for(path, elem_kind)
    if kind == "int32":
        raise UsageError("ivecs files hold ids, not vectors; use read_ivecs")
    return Dataset(read_vecs_array(path, kind), metric)


def read_ivecs(path) -> np.ndarray:
    return read_vecs_array(path, "int32")


def write_vecs(data, path, elem_kind: str | None = None) -> None:
    """Write vectors in the per-row ``int32 dims`` + payload layout."""
    arr = data.data if isinstance(data, Dataset) else np.asarray(data)
    kind = elem_kind or _EXTENSIONS.get(Path(path).suffix.lower()) or arr.dtype.name
    if kind not in _VEC_DTYPES:
        raise UsageError(f"cannot write element type {kind!r}")
    dtype = _VEC_DTYPES[kind]
    if arr.size == 0:
        Path(path).write_bytes(b"")
        return
    if arr.ndim != 2:
        raise UsageError(f"expected a 2-D array, got shape {arr.shape}")
    if arr.dtype.kind != dtype.kind:
        raise UsageError(f"array of {arr.dtype} cannot be written as {kind}")
    rec = np.empty(arr.shape[0], np.dtype([("d", "<i4"), ("v", dtype, (arr.shape[1],))]))
    rec["d"] = arr.shape[1]
    rec["v"] = arr
    Path(path).write_bytes(rec.tobytes())


def write_ivecs(ids: np.ndarray, path) -> None:
    write_vecs(np.asarray(ids, dtype=np.int32), path, "int32")


@dataclass
class GroundTruth:
    graph: KnnGraph
    dataset_hash: str
    k: int
    metric: Metric

    @property
    def ids(self) -> np.ndarray:
        return self.graph.ids

    @property
    def dists(self) -> np.ndarray:
        return self.graph.dists


def dataset_hash(dataset: Dataset) -> str:
    h = hashlib.sha256()
    h.update(f"{dataset.element_kind}:{dataset.num_points}x{dataset.dims}".encode())
    h.update(dataset.data.tobytes())
    return h.hexdigest()[:16]


@njit(nogil=True, cache=True, parallel=True)
def _exact_rows(data, queries_at, cands, metric, ids, dists):
    for r in prange(cands.shape[0]):
        q = queries_at + r
        size = 0
        flags = np.zeros(0, np.uint8)
        for c in range(cands.shape[1]):
            v = cands[r, c]
            if v == q:
                continue
            d = pair_distance(data[q], data[v], metric)
            _, size = row_insert(ids[q], dists[q], flags, size, v, d, 0)


def brute_force_knng(dataset: Dataset, k: int, *, cache_dir=None, block: int = 512) -> GroundTruth:
    """Exact kNN graph under the ``(dist, id)`` tie rule.

    A blocked matrix product shortlists ``k + 16`` candidates per row; their
    distances are then recomputed with the same kernel the graph builders
    use, so ties and rounding match exactly.
    """
    n = dataset.num_points
    if not 1 <= k < n:
        raise UsageError(f"need 1 <= k < N, got k={k}, N={n}")
    key = dataset_hash(dataset)
    cache_path = None
    if cache_dir is not None:
        cache_path = Path(cache_dir) / f"gt-{key}-k{k}-{dataset.metric.value}.bin"
        if cache_path.exists():
            return GroundTruth(wire.read_region(cache_path, id_space="global"), key, k, dataset.metric)
    x = dataset.data.astype(np.float64)
    if dataset.metric is Metric.COSINE:
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        x = np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)
    sq = np.einsum("ij,ij->i", x, x)
    short = min(n - 1, k + 16)
    ids = np.full((n, k), -1, ID_DTYPE)
    dists = np.full((n, k), np.inf, DIST_DTYPE)
    for lo in range(0, n, block):
        hi = min(n, lo + block)
        dot = x[lo:hi] @ x.T
        if dataset.metric is Metric.COSINE:
            score = -dot
        else:
            score = sq[lo:hi, None] - 2.0 * dot + sq[None, :]
        score[np.arange(hi - lo), np.arange(lo, hi)] = np.inf
        if short < n - 1:
            order = np.argpartition(score, short, axis=1)
            cands = order[:, :short].astype(np.int64)
            # smallest score left out of the shortlist
            outside = np.take_along_axis(score, order[:, short:short + 1], axis=1)[:, 0]
        else:
            cands = np.argsort(score, axis=1)[:, :short].astype(np.int64)
            outside = np.full(hi - lo, np.inf)
        _exact_rows(dataset.data, lo, cands, dataset.metric.code, ids, dists)
        # a row whose k-th distance comes too close to the shortlist boundary is rescanned in full
        if dataset.metric is Metric.COSINE:
            bound = 1.0 + outside
        else:
            bound = np.sqrt(np.maximum(outside, 0.0))
        kth = dists[lo:hi, k - 1].astype(np.float64)
        unsafe = np.flatnonzero(kth + 1e-4 * np.maximum(1.0, kth) >= bound)
        if unsafe.size:
            everyone = np.broadcast_to(np.arange(n, dtype=np.int64), (1, n))
            for r in unsafe:
                ids[lo + r] = -1
                dists[lo + r] = np.inf
                _exact_rows(dataset.data, lo + r, everyone, dataset.metric.code, ids, dists)
    gt = GroundTruth(KnnGraph(ids, dists, "global"), key, k, dataset.metric)
    if cache_path is not None:
        cache_path.parent.mkdir(parents=True, exist_ok=True)
        tmp = cache_path.with_suffix(".tmp")
        wire.write_region(tmp, gt.graph)
        os.replace(tmp, cache_path)
    return gt


def _graph_of(g) -> KnnGraph:
    return g.graph if isinstance(g, GroundTruth) else g


def _check_pair(test: KnnGraph, other: KnnGraph, k_eval: int) -> None:
    if test.id_space != other.id_space:
        raise UsageError(f"id-space mismatch: {test.id_space} vs {other.id_space}")
    if test.num_sources != other.num_sources:
        raise UsageError(f"row count mismatch: {test.num_sources} vs {other.num_sources}")
    if not 1 <= k_eval <= min(test.k, other.k):
        raise UsageError(f"k_eval={k_eval} must be within 1..{min(test.k, other.k)}")


def recall_at_k(test: KnnGraph, truth, k_eval: int) -> float:
    """Mean fraction of each row's top-``k_eval`` ids that appear in the true top-``k_eval``."""
    truth = _graph_of(truth)
    test = _graph_of(test)
    _check_pair(test, truth, k_eval)
    hits = 0
    for lo in range(0, test.num_sources, 8192):
        a = test.ids[lo:lo + 8192, :k_eval]
        b = truth.ids[lo:lo + 8192, :k_eval]
        match = (a[:, :, None] == b[:, None, :]) & (a[:, :, None] >= 0)
        hits += int(match.any(axis=2).sum())
    return hits / (test.num_sources * k_eval)


def distance_threshold_recall(test: KnnGraph, reference: KnnGraph, k_eval: int) -> float:
    """Per row, the share of test entries no farther than the reference's ``k_eval``-th distance."""
    test = _graph_of(test)
    reference = _graph_of(reference)
    _check_pair(test, reference, k_eval)
    threshold = reference.dists[:, k_eval - 1]
    within = (test.dists <= threshold[:, None]) & (test.ids >= 0)
    counts = np.minimum(within.sum(axis=1), k_eval)
    return float(counts.mean() / k_eval)


def synth_shifted_copies(dataset: Dataset, copies: int, epsilon: float) -> Dataset:
    """Stack ``copies`` copies, shifting copy ``c`` (c >= 2) along axis ``(c - 1) mod dims``.

    Each shift puts the copy's minimum on that axis exactly ``epsilon`` above
    the maximum of everything generated so far.
    """
    if not epsilon > 0:
        raise UsageError(f"epsilon must be positive, got {epsilon}")
    if copies < 1:
        raise UsageError(f"copies must be at least 1, got {copies}")
    if dataset.dims < 1 or dataset.num_points < 1:
        raise UsageError("dataset must have at least one point and one dimension")
    if dataset.element_kind != "float32":
        raise UsageError("shifted copies need a float dataset")
    base = dataset.data
    out = [base]
    upper = base.max(axis=0).astype(np.float64)
    lower = base.min(axis=0).astype(np.float64)
    for c in range(2, copies + 1):
        axis = (c - 1) % dataset.dims
        part = base.copy()
        start = np.float32(upper[axis] + epsilon)
        part[:, axis] = (base[:, axis].astype(np.float64) - lower[axis] + np.float64(start)).astype(np.float32)
        upper = np.maximum(upper, part.max(axis=0))
        out.append(part)
    return Dataset(np.concatenate(out, axis=0), dataset.metric)


_CLUSTERED = re.compile(r"^clustered(?:\((\d+)\))?$")


def gen_random_dataset(
    n: int,
    dims: int,
    distribution: str = "uniform",
    seed: int = 0,
    *,
    clusters: int = 8,
    center_scale: float = 1.0,
    metric: Metric | str = Metric.L2,
    return_labels: bool = False,
):
    """Seeded synthetic float32 data: ``uniform`` in [0, 1), ``gaussian``, or ``clustered(c)``.

    Clustered data draws ``c`` centers from N(0, center_scale^2) and unit-variance points around them.
    """
    if n < 1 or dims < 1:
        raise UsageError(f"need n >= 1 and dims >= 1, got n={n}, dims={dims}")
    rng = np.random.default_rng(seed)
    labels = np.zeros(n, np.int64)
    m = _CLUSTERED.match(distribution)
    if distribution == "uniform":
        data = rng.random((n, dims), dtype=np.float32)
    elif distribution == "gaussian":
        data = rng.standard_normal((n, dims), dtype=np.float32)
    elif m:
        c = int(m.group(1)) if m.group(1) else clusters
        if c < 1:
            raise UsageError("need at least one cluster")
        centers = rng.normal(0.0, center_scale, (c, dims))
        labels = rng.integers(0, c, n)
        data = (centers[labels] + rng.standard_normal((n, dims))).astype(np.float32)
    else:
        raise UsageError(f"unknown distribution {distribution!r}")
    ds = Dataset(data, metric)
    return (ds, labels) if return_labels else ds


def format_report(metrics: dict) -> str:
    """``name=value`` lines, one metric per line."""
    lines = []
    for key, value in metrics.items():
        if isinstance(value, float):
            value = repr(value)
        elif isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"malformed report line {line!r}")
        out[key] = value
    return out
