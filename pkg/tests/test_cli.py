import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dknng import wire
from dknng.cli import RunConfig, build_parser, main
from dknng.core import KnnGraph
from dknng.evalio import gen_random_dataset, parse_report, read_ivecs, write_vecs
from dknng.refine import PHASES


@pytest.fixture
def data_file(tmp_path):
    p = tmp_path / "base.fvecs"
    write_vecs(gen_random_dataset(800, 6, "clustered(4)", seed=3), p)
    return p


def run(*argv):
    return main([str(a) for a in argv])


def test_build_writes_graph_and_report(tmp_path, data_file):
    out, rep = tmp_path / "g.knng", tmp_path / "r.txt"
    assert run("build", "--input", data_file, "--output", out, "--k", 10, "--workers", 1, "--report", rep) == 0
    g = wire.read_region(out)
    assert isinstance(g, KnnGraph) and g.ids.shape == (800, 10)
    metrics = parse_report(rep.read_text())
    assert set(metrics) >= {"iterations", "updates_per_iteration", "wall_time"}
    assert len(metrics["updates_per_iteration"].split(",")) == int(metrics["iterations"])


def test_build_is_deterministic(tmp_path, data_file):
    for name in ("a", "b"):
        assert run("build", "--input", data_file, "--output", tmp_path / name, "--k", 8, "--seed", 4, "--workers", 1) == 0
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_build_k_too_large_fails_cleanly(tmp_path, data_file, capsys):
    out = tmp_path / "g.knng"
    assert run("build", "--input", data_file, "--output", out, "--k", 800) != 0
    assert "k=800" in capsys.readouterr().err
    assert not out.exists()
    assert sorted(p.name for p in tmp_path.iterdir()) == ["base.fvecs"]


def test_build_dist_report_and_recall(tmp_path, data_file, capsys):
    rep = tmp_path / "r.txt"
    assert run("build-dist", "--input", data_file, "--output", tmp_path / "p4", "--k", 10, "--ranks", 4, "--groups", 2, "--report", rep) == 0
    phases = [k for k in parse_report(rep.read_text()) if k.startswith("phase.")]
    assert phases == [f"phase.{p}" for p in PHASES]
    assert run("build-dist", "--input", data_file, "--output", tmp_path / "p1", "--k", 10) == 0
    capsys.readouterr()
    recalls = []
    for name in ("p1", "p4"):
        assert run("eval", "--input", tmp_path / name, "--dataset", data_file, "--ks", 10) == 0
        recalls.append(float(parse_report(capsys.readouterr().out)["recall@10"]))
    assert abs(recalls[0] - recalls[1]) <= 0.02


def test_build_dist_rejects_bad_rank_count(tmp_path, data_file, capsys):
    assert run("build-dist", "--input", data_file, "--output", tmp_path / "o", "--ranks", 3) == 2
    assert "power of two" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_search_writes_ivecs(tmp_path, data_file):
    q = tmp_path / "q.fvecs"
    write_vecs(gen_random_dataset(20, 6, seed=9), q)
    assert run("build", "--input", data_file, "--output", tmp_path / "g", "--k", 10, "--search-graph", tmp_path / "s") == 0
    for graph in ("g", "s"):
        out = tmp_path / f"res-{graph}.ivecs"
        assert run("search", "--input", data_file, "--graph", tmp_path / graph, "--queries", q,
                   "--output", out, "--ks", 5, "--dists-output", tmp_path / "d.fvecs") == 0
        ids = read_ivecs(out)
        assert ids.shape == (20, 5) and ids.min() >= 0


def test_search_bad_graph_leaves_no_output(tmp_path, data_file, capsys):
    bad = tmp_path / "bad"
    bad.write_bytes(b"not a region at all" * 3)
    out = tmp_path / "res.ivecs"
    assert run("search", "--input", data_file, "--graph", bad, "--queries", data_file, "--output", out) == 2
    assert "magic" in capsys.readouterr().err
    assert not out.exists()


def test_eval_modes(tmp_path, data_file, capsys):
    g = tmp_path / "g"
    assert run("build", "--input", data_file, "--output", g, "--k", 10) == 0
    capsys.readouterr()
    assert run("eval", "--input", g, "--reference", g, "--eval-mode", "threshold", "--report", tmp_path / "r") == 0
    assert parse_report(capsys.readouterr().out) == {"threshold_recall@10": "1.0"}
    assert parse_report((tmp_path / "r").read_text()) == {"threshold_recall@10": "1.0"}
    assert run("eval", "--input", g) == 2


def test_gen_random_and_shifted(tmp_path):
    a, b = tmp_path / "a.fvecs", tmp_path / "b.fvecs"
    assert run("gen", "--output", a, "--n", 50, "--dims", 3, "--distribution", "gaussian", "--seed", 2) == 0
    assert a.stat().st_size == 50 * (4 + 12)
    assert run("gen", "--input", a, "--output", b, "--copies", 3, "--epsilon", 0.5) == 0
    assert b.stat().st_size == 3 * a.stat().st_size
    assert run("gen", "--input", a, "--output", tmp_path / "c.fvecs", "--copies", 2) == 2
    assert run("gen", "--output", tmp_path / "d.fvecs", "--n", 0, "--dims", 3) == 2
    assert not (tmp_path / "c.fvecs").exists() and not (tmp_path / "d.fvecs").exists()


def test_predict_table_and_rows(tmp_path, capsys):
    rep = tmp_path / "p.txt"
    assert run("predict", "--n", "1e8", "--ranks-list", "1,4,8", "--groups-list", "2,4", "--report", rep) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].split() == ["P", "M", "tree", "merge", "flat", "total"]
    assert len(lines) == 1 + 1 + 2 + 2
    assert len({len(line) for line in lines}) == 1
    rows = parse_report(rep.read_text())
    assert float(rows["P8.M2.total"]) > 0 and "P1.M1.total" in rows
    assert run("predict") == 2


def test_missing_output_directory(tmp_path, data_file):
    assert run("build", "--input", data_file, "--output", tmp_path / "nope" / "g") == 2


def test_usage_errors_exit_nonzero():
    with pytest.raises(SystemExit) as exc:
        main(["build", "--metric", "hamming"])
    assert exc.value.code != 0
    with pytest.raises(SystemExit):
        main([])


flags = st.fixed_dictionaries(
    {},
    optional={
        "input": st.sampled_from(["a.fvecs", "dir/b.bvecs"]),
        "output": st.just("out.bin"),
        "metric": st.sampled_from(["l2", "cosine"]),
        "k": st.integers(1, 64),
        "ks": st.integers(1, 64),
        "delta": st.floats(0, 1),
        "rho": st.floats(0.01, 1),
        "max_iters": st.integers(1, 50),
        "seed": st.integers(0, 2**31),
        "workers": st.integers(1, 8),
        "ranks": st.sampled_from([1, 2, 4, 8]),
        "groups": st.sampled_from([2, 4]),
        "beam": st.integers(1, 256),
        "entry_points": st.integers(1, 32),
        "out_degree": st.integers(1, 64),
        "skip_tree": st.booleans(),
        "double_buffer": st.booleans(),
        "report": st.just("r.txt"),
        "eval_mode": st.sampled_from(["recall", "threshold"]),
    },
)


@given(st.sampled_from(["build", "build-dist", "search", "eval", "gen", "predict"]), flags)
@settings(max_examples=150, deadline=None)
def test_run_config_round_trips_through_argv(sub, values):
    argv = [sub]
    if sub == "search":
        argv += ["--graph", "g", "--queries", "q"]
    for key, value in values.items():
        flag = "--" + key.replace("_", "-")
        if isinstance(value, bool):
            argv += [flag] if value else []
        else:
            argv += [flag, str(value)]
    parser = build_parser()
    cfg = RunConfig.from_namespace(parser.parse_args(argv))
    again = RunConfig.from_namespace(parser.parse_args(cfg.to_argv()))
    assert again == cfg
    for key, value in values.items():
        assert getattr(cfg, key) == value
