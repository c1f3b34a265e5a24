import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from dknng.core import Dataset, KnnGraph, UsageError, distance
from dknng.evalio import (
    VecsFormatError,
    brute_force_knng,
    dataset_hash,
    distance_threshold_recall,
    format_report,
    gen_random_dataset,
    parse_report,
    read_ivecs,
    read_vecs,
    read_vecs_array,
    recall_at_k,
    synth_shifted_copies,
    write_ivecs,
    write_vecs,
)
from dknng.nndescent import NnDescentParams, nn_descent


def _raw(rows, fmt="<f4"):
    out = b""
    for r in rows:
        out += np.int32(len(r)).tobytes() + np.asarray(r, fmt).tobytes()
    return out


def test_read_two_rows(tmp_path):
    p = tmp_path / "a.fvecs"
    p.write_bytes(_raw([[1.0, 2.0], [3.0, 4.0]]))
    ds = read_vecs(p)
    assert (ds.num_points, ds.dims) == (2, 2)
    assert ds.data.tolist() == [[1, 2], [3, 4]]


@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=2, max_dims=2, min_side=1, max_side=8)))
@settings(max_examples=50, deadline=None)
def test_fvecs_round_trip_bytes(tmp_path_factory, arr):
    d = tmp_path_factory.mktemp("rt")
    p, q = d / "a.fvecs", d / "b.fvecs"
    write_vecs(arr, p)
    write_vecs(read_vecs(p), q)
    assert p.read_bytes() == q.read_bytes()
    assert read_vecs_array(p).tobytes() == arr.tobytes()


def test_bvecs_round_trip_and_size(tmp_path):
    arr = np.arange(15, dtype=np.uint8).reshape(3, 5)
    p = tmp_path / "a.bvecs"
    write_vecs(Dataset(arr), p)
    assert p.stat().st_size == 3 * (4 + 5)
    raw = p.read_bytes()
    write_vecs(read_vecs(p), tmp_path / "b.bvecs")
    assert (tmp_path / "b.bvecs").read_bytes() == raw
    assert read_vecs(p).data.dtype == np.uint8


def test_ivecs_round_trip(tmp_path):
    ids = np.array([[1, 2, 3], [4, 5, -1]], np.int32)
    p = tmp_path / "r.ivecs"
    write_ivecs(ids, p)
    assert np.array_equal(read_ivecs(p), ids)
    with pytest.raises(UsageError):
        read_vecs(p)


def test_empty_dataset_gives_empty_file(tmp_path):
    p = tmp_path / "e.fvecs"
    write_vecs(np.zeros((0, 4), np.float32), p)
    assert p.read_bytes() == b""


@pytest.mark.parametrize(
    "blob,match",
    [
        (_raw([[1.0, 2.0, 3.0], [1.0, 2.0]]), "row 1 has dimension 2"),
        (_raw([[1.0, 2.0]])[:-2], "truncated"),
        (b"\x01\x00", "truncated header"),
        (np.int32(0).tobytes(), "invalid dimension"),
        (np.int32(-3).tobytes() + b"\x00" * 12, "invalid dimension"),
        (_raw([[1.0], [2.0]]) + b"\x01", "truncated"),
    ],
)
def test_malformed_files_rejected(tmp_path, blob, match):
    p = tmp_path / "bad.fvecs"
    p.write_bytes(blob)
    with pytest.raises(VecsFormatError, match=match):
        read_vecs(p)


def test_unknown_extension(tmp_path):
    p = tmp_path / "x.txt"
    p.write_bytes(b"")
    with pytest.raises(UsageError):
        read_vecs(p)
    read_vecs(p, "float32")


def test_brute_force_line():
    ds = Dataset(np.array([[0.0], [1.0], [3.0]], np.float32))
    gt = brute_force_knng(ds, 1)
    assert gt.ids[:, 0].tolist() == [1, 0, 1]


def test_brute_force_full_rows():
    ds = gen_random_dataset(30, 3, seed=1)
    g = brute_force_knng(ds, 29).graph
    for r in range(30):
        d = [distance("l2", ds.data[r], ds.data[v]) for v in range(30)]
        order = sorted((np.float32(d[v]), v) for v in range(30) if v != r)
        assert g.ids[r].tolist() == [v for _, v in order]


@pytest.mark.parametrize("metric,dist", [("l2", "uniform"), ("cosine", "gaussian"), ("l2", "clustered(3)")])
def test_brute_force_matches_linear_scan(metric, dist):
    ds = gen_random_dataset(1000, 6, dist, seed=2, metric=metric)
    g = brute_force_knng(ds, 10, block=128).graph
    for q in range(0, 1000, 37):
        d = np.array([distance(metric, ds.data[q], ds.data[v]) for v in range(1000)], np.float32)
        d[q] = np.inf
        assert g.ids[q].tolist() == np.lexsort((np.arange(1000), d))[:10].tolist()


def test_brute_force_with_duplicates_and_ties():
    data = np.repeat(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], np.float32), 4, axis=0)
    g = brute_force_knng(Dataset(data), 5).graph
    g.validate()
    assert g.ids[0].tolist() == [1, 2, 3, 4, 5]


def test_ground_truth_cache(tmp_path):
    ds = gen_random_dataset(200, 4, seed=3)
    a = brute_force_knng(ds, 5, cache_dir=tmp_path)
    assert len(list(tmp_path.iterdir())) == 1
    b = brute_force_knng(ds, 5, cache_dir=tmp_path)
    assert np.array_equal(a.ids, b.ids) and a.dataset_hash == b.dataset_hash == dataset_hash(ds)
    assert dataset_hash(ds) != dataset_hash(gen_random_dataset(200, 4, seed=4))


def test_recall_examples():
    truth = KnnGraph(np.arange(10)[None, :] + 1, np.arange(10, dtype=np.float32)[None, :], "global")
    assert recall_at_k(truth, truth, 10) == 1.0
    disjoint = KnnGraph(truth.ids + 20, truth.dists, "global")
    assert recall_at_k(disjoint, truth, 10) == 0.0
    half = truth.ids.copy()
    half[0, 5:] += 100
    assert recall_at_k(KnnGraph(half, truth.dists, "global"), truth, 10) == 0.5
    with pytest.raises(UsageError):
        recall_at_k(KnnGraph(truth.ids, truth.dists, "local"), truth, 10)
    with pytest.raises(UsageError):
        recall_at_k(truth, truth, 11)


def test_brute_force_recall_is_one():
    ds = gen_random_dataset(300, 5, seed=6)
    gt = brute_force_knng(ds, 8)
    assert recall_at_k(gt.graph, gt, 8) == 1.0


def test_threshold_recall():
    ref = KnnGraph(np.array([[1, 2]]), np.array([[0.1, 0.5]]), "global")
    assert distance_threshold_recall(ref, ref, 2) == 1.0
    far = KnnGraph(np.array([[3, 4]]), np.array([[0.6, 0.7]]), "global")
    assert distance_threshold_recall(far, ref, 2) == 0.0
    # inclusive at the threshold, different ids
    tie = KnnGraph(np.array([[3, 4]]), np.array([[0.2, 0.5]]), "global")
    assert distance_threshold_recall(tie, ref, 2) == 1.0


def test_threshold_recall_can_be_asymmetric(truth_of):
    ds = gen_random_dataset(2000, 8, seed=7)
    exact = truth_of(ds, 10).graph
    rough = nn_descent(ds, NnDescentParams(k=10, max_iters=1, delta=0.0, workers=1))
    rough = KnnGraph(rough.ids, rough.dists, "global")
    assert distance_threshold_recall(exact, rough, 10) == 1.0
    assert distance_threshold_recall(rough, exact, 10) < 0.9


def test_shifted_copies_one_is_identity():
    ds = gen_random_dataset(20, 3, seed=0)
    assert np.array_equal(synth_shifted_copies(ds, 1, 0.5).data, ds.data)


def test_shifted_copies_unit_interval():
    ds = Dataset(np.linspace(0, 1, 11, dtype=np.float32)[:, None])
    out = synth_shifted_copies(ds, 2, 0.5).data[11:, 0]
    assert out.min() == 1.5 and out.max() == 2.5


@given(
    st.lists(st.integers(-512, 512), min_size=4, max_size=40),
    st.integers(1, 64),
    st.integers(2, 5),
)
@settings(max_examples=100, deadline=None)
def test_shifted_copies_gap_exact(values, eps_q, copies):
    # dyadic inputs keep every step exact in float32
    data = (np.array(values[: len(values) // 2 * 2], np.float32) / 8).reshape(-1, 2)
    eps = eps_q / 16
    out = synth_shifted_copies(Dataset(data), copies, eps).data
    n = len(data)
    prev_max = data.max(axis=0)
    for c in range(1, copies):
        part = out[c * n:(c + 1) * n]
        axis = c % 2
        assert part[:, axis].min() == np.float32(prev_max[axis] + eps)
        # within-copy pairwise differences are preserved exactly
        assert np.array_equal(part - part[0], data - data[0])
        prev_max = np.maximum(prev_max, part.max(axis=0))


def test_shifted_copies_keep_neighbors_within_copy():
    ds = gen_random_dataset(500, 4, seed=3)
    out = synth_shifted_copies(ds, 2, 0.25)
    nn = brute_force_knng(out, 1).ids[:, 0]
    assert np.all((nn < 500) == (np.arange(1000) < 500))


def test_shifted_copies_errors():
    ds = gen_random_dataset(5, 2, seed=0)
    for eps in (0.0, -1.0):
        with pytest.raises(UsageError):
            synth_shifted_copies(ds, 2, eps)
    with pytest.raises(UsageError):
        synth_shifted_copies(ds, 0, 1.0)
    with pytest.raises(UsageError):
        synth_shifted_copies(Dataset(np.zeros((2, 2), np.uint8)), 2, 1.0)


def test_generator_deterministic_and_errors():
    a = gen_random_dataset(100, 4, "clustered(3)", seed=5)
    b = gen_random_dataset(100, 4, "clustered(3)", seed=5)
    assert a.data.tobytes() == b.data.tobytes()
    assert a.data.tobytes() != gen_random_dataset(100, 4, "clustered(3)", seed=6).data.tobytes()
    with pytest.raises(UsageError):
        gen_random_dataset(0, 4)
    with pytest.raises(UsageError):
        gen_random_dataset(10, 4, "zipf")


def test_clustered_labels_are_meaningful():
    from sklearn.metrics import silhouette_score

    ds, labels = gen_random_dataset(4000, 8, "clustered(4)", seed=1, center_scale=3.0, return_labels=True)
    shuffled = np.random.default_rng(0).permutation(labels)
    assert silhouette_score(ds.data, labels) > silhouette_score(ds.data, shuffled)


def test_report_round_trip():
    text = format_report({"a": 1, "b": 0.25, "c": [1, 2, 3]})
    assert text == "a=1\nb=0.25\nc=1,2,3\n"
    assert parse_report(text) == {"a": "1", "b": "0.25", "c": "1,2,3"}
    with pytest.raises(ValueError):
        parse_report("novalue")
