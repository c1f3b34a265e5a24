import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dknng.core import (
    Dataset,
    KnnGraph,
    Metric,
    NeighborEntry,
    UsageError,
    distance,
    knn_insert,
    merge_into,
    merge_rows,
)


def test_l2_pythagorean():
    assert distance("l2", [0.0, 0.0], [3.0, 4.0]) == 5.0


def test_cosine_same_direction_is_zero():
    v = np.array([0.3, -1.2, 2.0], np.float32)
    assert distance(Metric.COSINE, v, v) == pytest.approx(0.0, abs=1e-7)
    assert distance("cosine", v, 2 * v) == pytest.approx(0.0, abs=1e-7)


def test_cosine_orthogonal_is_one():
    assert distance("cosine", [1.0, 0.0], [0.0, 1.0]) == 1.0


def test_cosine_zero_vector():
    assert distance("cosine", [0.0, 0.0], [1.0, 2.0]) == 1.0


def test_distance_dimension_mismatch():
    with pytest.raises(UsageError):
        distance("l2", [1.0, 2.0], [1.0, 2.0, 3.0])


def test_uint8_distances_do_not_wrap():
    a = np.array([0, 255], np.uint8)
    b = np.array([255, 0], np.uint8)
    assert distance("l2", a, b) == pytest.approx(255 * math.sqrt(2), rel=1e-6)


def test_metric_parse():
    assert Metric.parse("L2") is Metric.L2
    assert Metric.parse("cosine") is Metric.COSINE
    with pytest.raises(UsageError):
        Metric.parse("manhattan")



@given(st.integers(1, 12).flatmap(lambda d: st.tuples(*[st.lists(st.floats(-100, 100, width=32), min_size=d, max_size=d)] * 2)))
@settings(max_examples=200, deadline=None)
def test_distances_symmetric_nonnegative(pair):
    a, b = (np.array(x, np.float32) for x in pair)
    for m in ("l2", "cosine"):
        d = distance(m, a, b)
        assert d >= 0
        assert d == distance(m, b, a)
    assert distance("l2", a, a) == 0.0


def test_knn_insert_evicts_farthest():
    row = [NeighborEntry(1, 0.1), NeighborEntry(2, 0.5)]
    assert knn_insert(row, NeighborEntry(3, 0.3), 2)
    assert [(e.id, e.dist) for e in row] == [(1, pytest.approx(0.1)), (3, pytest.approx(0.3))]


def test_knn_insert_rejects_duplicate():
    row = [NeighborEntry(1, 0.1)]
    assert not knn_insert(row, NeighborEntry(1, 0.1), 2)
    assert len(row) == 1


def test_knn_insert_rejects_farther_than_kth():
    row = [NeighborEntry(1, 0.1), NeighborEntry(2, 0.5)]
    assert not knn_insert(row, NeighborEntry(3, 0.9), 2)
    assert [e.id for e in row] == [1, 2]


def test_knn_insert_tie_broken_by_id():
    row = [NeighborEntry(5, 0.5)]
    assert knn_insert(row, NeighborEntry(2, 0.5), 3)
    assert [e.id for e in row] == [2, 5]
    # equal distance, larger id than the current k-th: not an improvement
    full = [NeighborEntry(1, 0.1), NeighborEntry(4, 0.5)]
    assert not knn_insert(full, NeighborEntry(7, 0.5), 2)
    assert knn_insert(full, NeighborEntry(3, 0.5), 2)
    assert [e.id for e in full] == [1, 3]


def test_merge_rows_examples():
    out = merge_rows([NeighborEntry(1, 0.1)], [NeighborEntry(2, 0.2)], 2)
    assert [e.id for e in out] == [1, 2]
    out = merge_rows([NeighborEntry(1, 0.1)], [NeighborEntry(1, 0.1)], 2)
    assert [e.id for e in out] == [1]


def _sorted_row(ids, dists):
    pairs = sorted(set(zip(dists, ids)))
    return [NeighborEntry(i, d) for d, i in pairs]


@given(
    st.lists(st.tuples(st.integers(0, 30), st.integers(0, 20)), min_size=0, max_size=20),
    st.lists(st.tuples(st.integers(0, 30), st.integers(0, 20)), min_size=0, max_size=20),
    st.integers(1, 25),
)
@settings(max_examples=300, deadline=None)
def test_merge_rows_matches_sorted_union(a, b, k):
    # distance is a function of the id so duplicates agree, as they do for real rows
    def row(entries):
        ids = sorted({i for i, _ in entries})
        return _sorted_row(ids, [float(np.float32((i * 7 % 11) / 4.0)) for i in ids])

    ra, rb = row(a), row(b)
    union = {e.id: e.dist for e in ra + rb}
    oracle = sorted(union.items(), key=lambda t: (t[1], t[0]))[:k]
    got = merge_rows(ra, rb, k)
    assert [(e.id, e.dist) for e in got] == oracle


def test_merge_rows_random_twenty(rng):
    for _ in range(50):
        ids_a = rng.choice(40, 20, replace=False)
        ids_b = rng.choice(40, 20, replace=False)
        dist_of = rng.random(40).astype(np.float32)
        ra = _sorted_row(ids_a.tolist(), dist_of[ids_a].tolist())
        rb = _sorted_row(ids_b.tolist(), dist_of[ids_b].tolist())
        union = sorted(set(ids_a) | set(ids_b), key=lambda i: (dist_of[i], i))[:10]
        assert [e.id for e in merge_rows(ra, rb, 10)] == union


def test_merge_into_only_admits_improvements():
    g = KnnGraph(np.array([[1, 2], [0, 2]]), np.array([[0.1, 0.5], [0.2, 0.3]]))
    changed = merge_into(g, np.array([[3, 1], [2, 1]]), np.array([[0.3, 0.1], [0.3, 0.9]]))
    assert changed == 1
    assert g.ids.tolist() == [[1, 3], [0, 2]]
    np.testing.assert_allclose(g.dists, [[0.1, 0.3], [0.2, 0.3]])


def test_graph_validate():
    good = KnnGraph(np.array([[1, 2], [2, 0], [0, 1]]), np.array([[0.1, 0.2], [0.1, 0.3], [0.2, 0.2]]))
    good.validate()
    unsorted = KnnGraph(np.array([[1, 2]]), np.array([[0.5, 0.2]]))
    with pytest.raises(ValueError):
        unsorted.validate(self_offset=10)
    selfloop = KnnGraph(np.array([[0, 2]]), np.array([[0.1, 0.2]]))
    with pytest.raises(ValueError):
        selfloop.validate()
    dup = KnnGraph(np.array([[1, 1]]), np.array([[0.1, 0.1]]))
    with pytest.raises(ValueError):
        dup.validate()
    tie_order = KnnGraph(np.array([[3, 2]]), np.array([[0.1, 0.1]]))
    with pytest.raises(ValueError):
        tie_order.validate(self_offset=9)


def test_graph_shape_checks():
    with pytest.raises(UsageError):
        KnnGraph(np.zeros((2, 3)), np.zeros((2, 2)))
    with pytest.raises(UsageError):
        KnnGraph(np.zeros((2, 2)), np.zeros((2, 2)), id_space="remote")


def test_dataset_checks():
    ds = Dataset(np.arange(12, dtype=np.float32).reshape(4, 3))
    assert (ds.num_points, ds.dims, ds.element_kind) == (4, 3, "float32")
    assert Dataset.concatenate([ds.slice(0, 1), ds.slice(1, 4)]).data.tolist() == ds.data.tolist()
    with pytest.raises(UsageError):
        Dataset(np.zeros(5, np.float32))
    with pytest.raises(UsageError):
        Dataset(np.zeros((2, 2), np.float64))
