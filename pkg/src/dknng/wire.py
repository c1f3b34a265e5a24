"""Bit-exact little-endian region layout shared by the rank simulator and cache files.

Header: ``magic u32, kind u8, rows u64, cols u64, elem_kind u8`` (22 bytes),
followed by the row-major payload. Graph-like kinds (``knng``, ``result``)
carry the id matrix followed by a float32 distance matrix of the same
shape; ``elem_kind`` then describes the id matrix.
"""

from __future__ import annotations

import enum
import struct

import numpy as np

from .core import DIST_DTYPE, Dataset, KnnGraph, Metric

MAGIC = 0x474E4E4B  # b"KNNG" when written little-endian
HEADER = struct.Struct("<IBQQB")


class Kind(enum.IntEnum):
    DATASET = 1
    KNNG = 2
    SGRAPH = 3
    RESULT = 4


class ElemKind(enum.IntEnum):
    FLOAT32 = 1
    UINT8 = 2
    INT32 = 3
    INT64 = 4


_ELEM_DTYPES = {
    ElemKind.FLOAT32: np.dtype("<f4"),
    ElemKind.UINT8: np.dtype("u1"),
    ElemKind.INT32: np.dtype("<i4"),
    ElemKind.INT64: np.dtype("<i8"),
}
_DTYPE_ELEMS = {dt: ek for ek, dt in _ELEM_DTYPES.items()}


class WireFormatError(ValueError):
    pass


def _elem_kind(arr: np.ndarray) -> ElemKind:
    try:
        return _DTYPE_ELEMS[arr.dtype.newbyteorder("<")]
    except KeyError:
        raise WireFormatError(f"no wire element kind for dtype {arr.dtype}") from None


def _le(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()


def encode(obj) -> bytes:
    """Serialize a Dataset, KnnGraph, SearchGraph or SearchResult."""
    from .annsearch import SearchResult
    from .graphopt import SearchGraph

    if isinstance(obj, Dataset):
        mat = obj.data
        return HEADER.pack(MAGIC, Kind.DATASET, *mat.shape, _elem_kind(mat)) + _le(mat)
    if isinstance(obj, (KnnGraph, SearchResult)):
        kind = Kind.KNNG if isinstance(obj, KnnGraph) else Kind.RESULT
        ids = obj.ids
        return (
            HEADER.pack(MAGIC, kind, *ids.shape, _elem_kind(ids))
            + _le(ids)
            + _le(obj.dists.astype(DIST_DTYPE, copy=False))
        )
    if isinstance(obj, SearchGraph):
        ids = obj.ids
        return HEADER.pack(MAGIC, Kind.SGRAPH, *ids.shape, _elem_kind(ids)) + _le(ids)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def encoded_size(kind: Kind, rows: int, cols: int, elem_kind: ElemKind) -> int:
    """Byte size of a region with the given header fields."""
    n = rows * cols
    size = HEADER.size + n * _ELEM_DTYPES[elem_kind].itemsize
    if kind in (Kind.KNNG, Kind.RESULT):
        size += n * np.dtype(DIST_DTYPE).itemsize
    return size


def read_header(buf) -> tuple[Kind, int, int, ElemKind]:
    if len(buf) < HEADER.size:
        raise WireFormatError(f"region of {len(buf)} bytes is shorter than the header")
    magic, kind, rows, cols, elem = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise WireFormatError(f"bad magic 0x{magic:08x}")
    try:
        return Kind(kind), rows, cols, ElemKind(elem)
    except ValueError as exc:
        raise WireFormatError(str(exc)) from None


def decode(buf, *, metric: Metric | str = Metric.L2, id_space: str = "local"):
    """Inverse of :func:`encode`; arrays are copied out of ``buf``."""
    from .annsearch import SearchResult
    from .graphopt import SearchGraph

    kind, rows, cols, elem = read_header(buf)
    expected = encoded_size(kind, rows, cols, elem)
    if len(buf) != expected:
        raise WireFormatError(f"{kind.name} region should be {expected} bytes, got {len(buf)}")
    dtype = _ELEM_DTYPES[elem]
    n = rows * cols
    first = np.frombuffer(buf, dtype, n, HEADER.size).reshape(rows, cols).astype(dtype.newbyteorder("="))
    if kind is Kind.DATASET:
        return Dataset(first, metric)
    if kind is Kind.SGRAPH:
        return SearchGraph(first, id_space)
    off = HEADER.size + n * dtype.itemsize
    dists = np.frombuffer(buf, np.dtype("<f4"), n, off).reshape(rows, cols).astype(DIST_DTYPE)
    if kind is Kind.KNNG:
        return KnnGraph(first, dists, id_space)
    return SearchResult(first, dists)


def write_region(path, obj) -> None:
    with open(path, "wb") as f:
        f.write(encode(obj))


def read_region(path, **kwargs):
    with open(path, "rb") as f:
        return decode(f.read(), **kwargs)
