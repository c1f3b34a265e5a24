"""Command-line driver: build, build-dist, search, eval, gen, predict."""

from __future__ import annotations

import argparse
import logging
import os
import sys
import tempfile
import time
from contextlib import contextmanager
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import wire
from .annsearch import SearchParams, ann_search
from .core import KnnGraph, Metric, UsageError
from .evalio import (
    VecsFormatError,
    brute_force_knng,
    distance_threshold_recall,
    format_report,
    gen_random_dataset,
    read_vecs,
    recall_at_k,
    synth_shifted_copies,
    write_ivecs,
    write_vecs,
)
from .graphopt import SearchGraph, optimize_graph
from .nndescent import NnDescentParams, nn_descent
from .parallel import default_workers
from .refine import PHASES, BuildTrace, CostModel, RefineConfig, build_distributed, predicted_runtime

log = logging.getLogger("dknng")

SUBCOMMANDS = ("build", "build-dist", "search", "eval", "gen", "predict")


@dataclass
class RunConfig:
    """Every flag of every subcommand; ``None`` means "not given"."""

    subcommand: str
    input: str | None = None
    output: str | None = None
    metric: str = "l2"
    k: int = 32
    ks: int | None = None
    delta: float = 0.0001
    rho: float = 0.5
    max_iters: int = 100
    capacity: int | None = None
    seed: int = 0
    workers: int | None = None
    ranks: int = 1
    groups: int | None = None
    beam: int = 64
    entry_points: int = 16
    max_hops: int | None = None
    out_degree: int | None = None
    skip_tree: bool = False
    double_buffer: bool = False
    memory_budget: int | None = None
    report: str | None = None
    eval_mode: str = "recall"
    # subcommand-specific
    search_graph: str | None = None
    graph: str | None = None
    queries: str | None = None
    dists_output: str | None = None
    reference: str | None = None
    dataset: str | None = None
    n: int | None = None
    dims: int | None = None
    distribution: str = "uniform"
    clusters: int = 8
    copies: int | None = None
    epsilon: float | None = None
    search_cost: float = 1e-6
    alpha: float = 1e-5
    beta: float = 1e-9
    ranks_list: str = "1,2,4,8,16,32,64,128,256,512,1024"
    groups_list: str = "2,4,8,16,32,64"

    @classmethod
    def from_namespace(cls, ns: argparse.Namespace) -> "RunConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in vars(ns).items() if k in names})

    def to_argv(self) -> list[str]:
        """Textual form; ``build_parser().parse_args(cfg.to_argv())`` gives back ``cfg``."""
        argv = [self.subcommand]
        defaults = RunConfig(self.subcommand)
        for f in fields(self):
            if f.name == "subcommand":
                continue
            value = getattr(self, f.name)
            if value == getattr(defaults, f.name):
                continue
            flag = "--" + f.name.replace("_", "-")
            if isinstance(value, bool):
                if value:
                    argv.append(flag)
            else:
                argv += [flag, str(value)]
        return argv


def _shared(parser: argparse.ArgumentParser) -> None:
    g = parser.add_argument_group("shared")
    g.add_argument("--input", help="input file (dataset, or graph for eval)")
    g.add_argument("--output", help="output file")
    g.add_argument("--metric", choices=("l2", "cosine"), default="l2")
    g.add_argument("--k", type=int, default=32, help="neighbors per point (default: 32)")
    g.add_argument("--ks", type=int, default=None, help="results per query (default: k)")
    g.add_argument("--delta", type=float, default=0.0001, help="convergence threshold")
    g.add_argument("--rho", type=float, default=0.5, help="sampling rate")
    g.add_argument("--max-iters", type=int, default=100)
    g.add_argument("--capacity", type=int, default=None, help="candidate buffer slots per point (default: 2k)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--workers", type=int, default=None, help="worker threads (default: all cores)")
    g.add_argument("--ranks", type=int, default=1, help="simulated rank count P")
    g.add_argument("--groups", type=int, default=None, help="groups M after the tree phase")
    g.add_argument("--beam", type=int, default=64, help="search beam width")
    g.add_argument("--entry-points", type=int, default=16)
    g.add_argument("--max-hops", type=int, default=None, help="expansion cap (default: 4 x beam)")
    g.add_argument("--out-degree", type=int, default=None, help="search-graph degree (default: k)")
    g.add_argument("--skip-tree", action="store_true", help="skip the binary-tree phase")
    g.add_argument("--double-buffer", action="store_true", help="prefetch during flat refinement")
    g.add_argument("--memory-budget", type=int, default=None, help="bytes per rank for the group graph")
    g.add_argument("--report", help="write key=value metrics here")
    g.add_argument("--eval-mode", choices=("recall", "threshold"), default="recall")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dknng", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("build", help="single-partition NN-Descent")
    _shared(p)
    p.add_argument("--search-graph", help="also write the optimized search graph here")

    p = sub.add_parser("build-dist", help="distributed build on simulated ranks")
    _shared(p)

    p = sub.add_parser("search", help="batch ANN search")
    _shared(p)
    p.add_argument("--graph", required=True, help="kNN graph or search graph file")
    p.add_argument("--queries", required=True, help="query vectors (.fvecs/.bvecs)")
    p.add_argument("--dists-output", help="also write result distances (.fvecs)")

    p = sub.add_parser("eval", help="compare a graph against a reference")
    _shared(p)
    p.add_argument("--reference", help="reference graph file")
    p.add_argument("--dataset", help="dataset for brute-force ground truth when no reference is given")

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    _shared(p)
    p.add_argument("--n", type=int)
    p.add_argument("--dims", type=int)
    p.add_argument("--distribution", default="uniform", help="uniform, gaussian or clustered(c)")
    p.add_argument("--clusters", type=int, default=8)
    p.add_argument("--copies", type=int, help="stack shifted copies of --input instead")
    p.add_argument("--epsilon", type=float, help="gap between shifted copies")

    p = sub.add_parser("predict", help="cost-model runtime table")
    _shared(p)
    p.add_argument("--n", type=float, help="total point count N")
    p.add_argument("--search-cost", type=float, default=1e-6, help="seconds per query (S)")
    p.add_argument("--alpha", type=float, default=1e-5, help="latency per message")
    p.add_argument("--beta", type=float, default=1e-9, help="seconds per transferred point")
    p.add_argument("--ranks-list", default="1,2,4,8,16,32,64,128,256,512,1024")
    p.add_argument("--groups-list", default="2,4,8,16,32,64")
    return parser


@contextmanager
def _staged(path):
    """Yield a temp path next to ``path``; it replaces ``path`` only on success."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    os.close(fd)
    try:
        yield tmp
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def _require(cfg: RunConfig, *names: str) -> None:
    missing = ["--" + n.replace("_", "-") for n in names if getattr(cfg, n) is None]
    if missing:
        raise UsageError(f"{cfg.subcommand} requires {', '.join(missing)}")


def _check_outputs(*paths) -> None:
    for p in paths:
        if p is not None and not Path(p).parent.exists():
            raise UsageError(f"output directory for {p} does not exist")


def _write_report(cfg: RunConfig, metrics: dict) -> None:
    text = format_report(metrics)
    if cfg.report:
        with _staged(cfg.report) as tmp:
            Path(tmp).write_text(text)
    return text


def _nn_params(cfg: RunConfig) -> NnDescentParams:
    return NnDescentParams(
        k=cfg.k, delta=cfg.delta, rho=cfg.rho, max_iters=cfg.max_iters,
        candidate_capacity=cfg.capacity, seed=cfg.seed, workers=cfg.workers or default_workers(),
    )


def _search_params(cfg: RunConfig, k_s: int) -> SearchParams:
    return SearchParams(
        k_s=k_s, beam_width=max(cfg.beam, k_s), num_entry_points=cfg.entry_points,
        max_hops=cfg.max_hops, seed=cfg.seed, workers=cfg.workers or default_workers(),
    )


def cmd_build(cfg: RunConfig) -> int:
    _require(cfg, "input", "output")
    _check_outputs(cfg.output, cfg.search_graph, cfg.report)
    data = read_vecs(cfg.input, metric=Metric.parse(cfg.metric))
    history: list[int] = []
    start = time.perf_counter()
    graph = nn_descent(data, _nn_params(cfg), history=history)
    build_time = time.perf_counter() - start
    sgraph = optimize_graph(graph, data, cfg.out_degree) if cfg.search_graph else None
    with _staged(cfg.output) as tmp:
        wire.write_region(tmp, graph)
        if sgraph is not None:
            with _staged(cfg.search_graph) as tmp2:
                wire.write_region(tmp2, sgraph)
    _write_report(cfg, {
        "n": data.num_points, "k": cfg.k, "iterations": len(history),
        "updates_per_iteration": history, "wall_time": build_time,
    })
    return 0


def cmd_build_dist(cfg: RunConfig) -> int:
    _require(cfg, "input", "output")
    _check_outputs(cfg.output, cfg.report)
    data = read_vecs(cfg.input, metric=Metric.parse(cfg.metric))
    rc = RefineConfig(
        P=cfg.ranks, M=cfg.groups, k=cfg.k, k_s=cfg.ks,
        nn_params=_nn_params(cfg), search_params=_search_params(cfg, cfg.ks or cfg.k),
        out_degree=cfg.out_degree, skip_tree_phase=cfg.skip_tree, double_buffer=cfg.double_buffer,
        seed=cfg.seed, memory_budget=cfg.memory_budget, workers=cfg.workers,
    )
    rc.validate()
    trace = BuildTrace(keep_snapshots=False)
    start = time.perf_counter()
    graph = build_distributed(data, rc, trace=trace)
    wall = time.perf_counter() - start
    with _staged(cfg.output) as tmp:
        wire.write_region(tmp, graph)
    metrics = {"n": data.num_points, "k": cfg.k, "ranks": rc.P, "groups": rc.M}
    metrics.update({f"phase.{p}": t for p, t in trace.phase_times().items()})
    metrics["wall_time"] = wall
    _write_report(cfg, metrics)
    return 0


def _load_search_graph(path, data) -> SearchGraph:
    obj = wire.read_region(path)
    if isinstance(obj, SearchGraph):
        return obj
    if isinstance(obj, KnnGraph):
        return optimize_graph(obj, data)
    raise UsageError(f"{path} holds neither a kNN graph nor a search graph")


def cmd_search(cfg: RunConfig) -> int:
    _require(cfg, "input", "output")
    _check_outputs(cfg.output, cfg.dists_output, cfg.report)
    metric = Metric.parse(cfg.metric)
    data = read_vecs(cfg.input, metric=metric)
    queries = read_vecs(cfg.queries, metric=metric)
    sgraph = _load_search_graph(cfg.graph, data)
    start = time.perf_counter()
    res = ann_search(queries, sgraph, data, _search_params(cfg, cfg.ks or cfg.k))
    elapsed = time.perf_counter() - start
    with _staged(cfg.output) as tmp:
        write_ivecs(res.ids, tmp)
        if cfg.dists_output:
            with _staged(cfg.dists_output) as tmp2:
                write_vecs(res.dists, tmp2, "float32")
    _write_report(cfg, {"queries": queries.num_points, "k_s": res.k_s, "qps": queries.num_points / elapsed})
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    _require(cfg, "input")
    _check_outputs(cfg.report)
    test = wire.read_region(cfg.input, id_space="global")
    if cfg.reference:
        ref = wire.read_region(cfg.reference, id_space="global")
    elif cfg.dataset:
        ref = brute_force_knng(read_vecs(cfg.dataset, metric=Metric.parse(cfg.metric)), test.k).graph
    else:
        raise UsageError("eval requires --reference or --dataset")
    if not isinstance(test, KnnGraph) or not isinstance(ref, KnnGraph):
        raise UsageError("eval compares two kNN graph files")
    k_eval = cfg.ks or min(test.k, ref.k)
    if cfg.eval_mode == "recall":
        name, value = f"recall@{k_eval}", recall_at_k(test, ref, k_eval)
    else:
        name, value = f"threshold_recall@{k_eval}", distance_threshold_recall(test, ref, k_eval)
    text = _write_report(cfg, {name: value})
    sys.stdout.write(text)
    return 0


def cmd_gen(cfg: RunConfig) -> int:
    _require(cfg, "output")
    _check_outputs(cfg.output, cfg.report)
    metric = Metric.parse(cfg.metric)
    if cfg.copies is not None:
        _require(cfg, "input", "epsilon")
        data = synth_shifted_copies(read_vecs(cfg.input, metric=metric), cfg.copies, cfg.epsilon)
    else:
        _require(cfg, "n", "dims")
        data = gen_random_dataset(cfg.n, cfg.dims, cfg.distribution, cfg.seed, clusters=cfg.clusters, metric=metric)
    with _staged(cfg.output) as tmp:
        write_vecs(data, tmp, "float32")
    _write_report(cfg, {"n": data.num_points, "dims": data.dims})
    return 0


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected a comma-separated integer list, got {text!r}") from None


def cmd_predict(cfg: RunConfig) -> int:
    _require(cfg, "n")
    _check_outputs(cfg.report)
    cm = CostModel(cfg.search_cost, cfg.alpha, cfg.beta)
    ranks = _int_list(cfg.ranks_list) if cfg.groups is None or cfg.ranks == 1 else [cfg.ranks]
    groups = _int_list(cfg.groups_list) if cfg.groups is None else [cfg.groups]
    rows = []
    for P in ranks:
        for M in groups if P > 1 else [1]:
            if M > P:
                continue
            rows.append((P, M, predicted_runtime(cm, cfg.n, P, M)))
    if not rows:
        raise UsageError("no valid (P, M) combination in the requested ranges")
    header = f"{'P':>6} {'M':>5} {'tree':>12} {'merge':>12} {'flat':>12} {'total':>12}"
    lines = [header]
    metrics = {}
    for P, M, t in rows:
        lines.append(f"{P:>6} {M:>5} {t['tree']:>12.6g} {t['merge']:>12.6g} {t['flat']:>12.6g} {t['total']:>12.6g}")
        for phase in ("tree", "merge", "flat", "total"):
            metrics[f"P{P}.M{M}.{phase}"] = t[phase]
    sys.stdout.write("\n".join(lines) + "\n")
    _write_report(cfg, metrics)
    return 0


COMMANDS = {
    "build": cmd_build,
    "build-dist": cmd_build_dist,
    "search": cmd_search,
    "eval": cmd_eval,
    "gen": cmd_gen,
    "predict": cmd_predict,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    cfg = RunConfig.from_namespace(args)
    try:
        return COMMANDS[cfg.subcommand](cfg)
    except (UsageError, VecsFormatError, wire.WireFormatError, FileNotFoundError) as exc:
        print(f"dknng {cfg.subcommand}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
