"""Command-line entry point.

Every command reads a flat ``key = value`` config file (``--config``),
then applies flag overrides. Artifacts live under ``workdir`` unless a
path key points elsewhere.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import shutil
import sys

import numpy as np

from . import data as data_mod
from . import evaluate, graph as graph_mod, model as model_mod, oracle, search, toy, train
from .data import FormatError

log = logging.getLogger("graphroute")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


# key -> (type, default, help)
CONFIG_KEYS: dict[str, tuple[type, object, str]] = {
    "workdir": (str, "run", "directory holding every artifact"),
    "data_dir": (str, "", "dataset directory (base/learn/query.fvecs); default <workdir>/data"),
    "graph": (str, "", "graph file; default <workdir>/graph.nsw"),
    "cache": (str, "", "hop cache file; default <workdir>/cache.hop"),
    "model": (str, "", "model file; default <workdir>/model.bin"),
    "report": (str, "", "report file; default <workdir>/report.<format>"),
    "metrics": (str, "", "training metrics CSV; default <workdir>/metrics.csv"),
    "synth_n": (int, 5000, "synthetic point count"),
    "synth_d": (int, 32, "synthetic dimension"),
    "synth_clusters": (int, 32, "synthetic cluster count"),
    "gt_r": (int, 10, "neighbors stored per query in ground truth"),
    "max_m": (int, 16, "graph out-degree bound"),
    "ef_construction": (int, 200, "construction beam width"),
    "oracle_m": (int, 5, "hop slack of the routing oracle"),
    "workers": (int, 1, "threads for cache precomputation"),
    "dcs": (int, 128, "distance-computation budget"),
    "dcs_grid": (str, "", "comma-separated budgets for eval; default: dcs"),
    "k": (int, 8, "rerank candidates (learned and truncated scorers)"),
    "tau": (float, 1.0, "distance temperature"),
    "mode": (str, "original", "scorer for search: original | learned | truncated"),
    "dim": (int, 0, "routing dimension d; 0 means the data dimension"),
    "objective": (str, "imitation", "imitation | teacher_forcing | topk_only"),
    "steps": (int, 2000, "optimizer steps"),
    "batch": (int, 32, "queries per step"),
    "max_lr": (float, 1e-3, "peak learning rate"),
    "eval_every": (int, 100, "steps between validation passes"),
    "val_fraction": (float, 0.1, "training queries held out for checkpoint selection"),
    "conv_blocks": (int, 3, "graph convolution blocks"),
    "conv_filters": (int, 64, "convolution width"),
    "ffn_hidden": (int, 256, "feed-forward hidden width"),
    "seed": (int, 0, "random seed"),
    "format": (str, "csv", "report format: csv | json"),
    "print_r": (int, 10, "results printed per query by search"),
    "queries": (str, "", "fvecs file of queries for search; default the test split"),
}

# flag name -> config key
FLAGS = {
    "--seed": "seed", "--dcs": "dcs", "--k": "k", "--mode": "mode", "--dim": "dim",
    "--max-m": "max_m", "--ef-construction": "ef_construction", "--objective": "objective",
    "--steps": "steps", "--batch": "batch", "--max-lr": "max_lr", "--report": "report",
    "--format": "format", "--workdir": "workdir", "--queries": "queries",
}


def parse_config_file(path) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as f:
        for no, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{no}: expected key = value")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in CONFIG_KEYS:
                raise UsageError(f"{path}:{no}: unknown key {key!r}")
            out[key] = val
    return out


@dataclasses.dataclass
class RunConfig:
    values: dict

    def __getattr__(self, key):
        try:
            return self.values[key]
        except KeyError:
            raise AttributeError(key) from None

    def path(self, key: str, default_name: str) -> str:
        return self.values[key] or os.path.join(self.workdir, default_name)

    @property
    def data_path(self) -> str:
        return self.path("data_dir", "data")

    def echo(self) -> dict:
        return {k: self.values[k] for k in sorted(self.values)}


def build_config(args) -> RunConfig:
    raw = {k: spec[1] for k, spec in CONFIG_KEYS.items()}
    if args.config:
        if not os.path.exists(args.config):
            raise FileNotFoundError(args.config)
        raw.update(parse_config_file(args.config))
    for key in FLAGS.values():
        val = getattr(args, key, None)
        if val is not None:
            raw[key] = val
    vals = {}
    for key, (typ, _, _) in CONFIG_KEYS.items():
        try:
            vals[key] = typ(raw[key])
        except (TypeError, ValueError):
            raise UsageError(f"bad value for {key}: {raw[key]!r}") from None
    if vals["mode"] not in {m.value for m in search.ScorerMode}:
        raise UsageError(f"unknown mode {vals['mode']!r}")
    if vals["objective"] not in {o.value for o in train.Objective}:
        raise UsageError(f"unknown objective {vals['objective']!r}")
    if vals["format"] not in ("csv", "json"):
        raise UsageError(f"unknown format {vals['format']!r}")
    for key in ("dcs", "steps", "batch", "max_m", "ef_construction", "gt_r", "print_r"):
        if vals[key] < 1:
            raise UsageError(f"{key} must be positive")
    if not 0 <= vals["k"] <= vals["dcs"]:
        raise UsageError("need 0 <= k <= dcs")
    return RunConfig(vals)


# ---------------------------------------------------------------------------
# helpers


def _require(*paths):
    for p in paths:
        if not os.path.exists(p):
            raise FileNotFoundError(p)


def _load_data(cfg: RunConfig) -> data_mod.VectorDataset:
    _require(os.path.join(cfg.data_path, "base.fvecs"))
    return data_mod.load_dataset(cfg.data_path)


def _gt_path(cfg, split):
    return os.path.join(cfg.data_path, f"gt_{split}.ivecs")


def _load_gt(cfg, split) -> np.ndarray:
    p = _gt_path(cfg, split)
    _require(p)
    return data_mod.load_ivecs(p)


def _split_train(cfg, n: int):
    """Indices for fitting and for checkpoint selection (tail of the training split)."""
    n_val = int(round(n * cfg.val_fraction))
    n_val = min(max(n_val, 1 if n > 1 else 0), n - 1) if n > 1 else 0
    return np.arange(n - n_val), np.arange(n - n_val, n)


def _model_config(cfg, D):
    d = cfg.dim or D
    return model_mod.ModelConfig.desk(D, d, conv_blocks=cfg.conv_blocks, conv_filters=cfg.conv_filters,
                                      ffn_hidden=cfg.ffn_hidden)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: RunConfig, args) -> None:
    ds = data_mod.generate_synthetic(cfg.synth_n, cfg.synth_d, cfg.synth_clusters, cfg.seed)
    data_mod.save_dataset(ds, cfg.data_path)
    print(f"{ds.name}: base {ds.base.shape[0]}, train {ds.train_queries.shape[0]}, "
          f"test {ds.test_queries.shape[0]} -> {cfg.data_path}")


def cmd_ingest(cfg: RunConfig, args) -> None:
    sources = {"base.fvecs": args.base, "learn.fvecs": args.learn, "query.fvecs": args.query}
    _require(*[p for p in sources.values() if p])
    os.makedirs(cfg.data_path, exist_ok=True)
    for name, src in sources.items():
        if src:
            data_mod.load_fvecs(src)  # validates the layout before copying
            shutil.copyfile(src, os.path.join(cfg.data_path, name))
    ds = _load_data(cfg)
    print(f"ingested base {ds.base.shape} into {cfg.data_path}")


def cmd_ground_truth(cfg: RunConfig, args) -> None:
    ds = _load_data(cfg)
    R = min(cfg.gt_r, ds.base.shape[0])
    for split, Q in (("learn", ds.train_queries), ("query", ds.test_queries)):
        if Q is None or len(Q) == 0:
            continue
        gt = data_mod.exact_knn(ds.base, Q, R)
        data_mod.write_ivecs(_gt_path(cfg, split), gt.ids)
        print(f"{split}: {len(Q)} queries, R={R}")


def cmd_build_graph(cfg: RunConfig, args) -> None:
    ds = _load_data(cfg)
    g = graph_mod.build_nsw(ds.base, cfg.max_m, cfg.ef_construction, cfg.seed)
    if not graph_mod.is_connected_from_entry(g):
        log.warning("some vertices are unreachable from the entry vertex")
    out = cfg.path("graph", "graph.nsw")
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    graph_mod.save_graph(g, out)
    print(f"graph: {g.num_vertices} vertices, {g.num_edges} edges -> {out}")


def cmd_precompute_cache(cfg: RunConfig, args) -> None:
    gpath = cfg.path("graph", "graph.nsw")
    _require(gpath)
    g = graph_mod.load_graph(gpath)
    nearest = _load_gt(cfg, "learn")[:, 0]
    cache = oracle.precompute_cache(g, nearest, cfg.oracle_m, cfg.workers)
    out = cfg.path("cache", "cache.hop")
    oracle.save_cache(cache, out)
    print(f"cache: {len(cache)} queries, {len(cache.excluded)} excluded -> {out}")


def cmd_train(cfg: RunConfig, args) -> None:
    gpath, cpath = cfg.path("graph", "graph.nsw"), cfg.path("cache", "cache.hop")
    _require(gpath, cpath)
    ds = _load_data(cfg)
    g = graph_mod.load_graph(gpath)
    cache = oracle.load_cache(cpath)
    nearest = _load_gt(cfg, "learn")[:, 0]
    fit_ids, val_ids = _split_train(cfg, len(ds.train_queries))
    fit = set(fit_ids.tolist())
    cache.entries = {q: e for q, e in cache.entries.items() if q in fit}
    if not cache.entries:
        raise RuntimeError("no training query has a reachable nearest neighbor")
    ctx = train.TrainContext(ds.base, g, cache, ds.train_queries)
    mdl = model_mod.init_model(_model_config(cfg, ds.dim), cfg.seed)
    tcfg = train.TrainConfig(objective=cfg.objective, dcs_budget=cfg.dcs, k=cfg.k, batch_size=cfg.batch,
                             total_steps=cfg.steps, max_lr=cfg.max_lr, seed=cfg.seed,
                             eval_every=cfg.eval_every)
    res = train.train_loop(mdl, ctx, tcfg, ds.train_queries[val_ids], nearest[val_ids],
                           metrics_path=cfg.path("metrics", "metrics.csv"))
    out = cfg.path("model", "model.bin")
    model_mod.save_model(res.model, out)
    print(f"best validation Recall@1 {res.best_recall:.4f} at step {res.best_step} -> {out}")


def _scorer(cfg, ds, g):
    mode = search.ScorerMode(cfg.mode)
    base = np.asarray(ds.base, dtype=np.float64)
    if mode is search.ScorerMode.ORIGINAL:
        return search.Scorer.original(base, cfg.tau), g, 0
    if mode is search.ScorerMode.TRUNCATED:
        d = cfg.dim or ds.dim
        pca = data_mod.pca_fit(base, d)
        low = data_mod.pca_transform(pca, base)
        return (search.Scorer.truncated(pca, low, cfg.tau),
                graph_mod.build_nsw(low, cfg.max_m, cfg.ef_construction), cfg.k)
    mpath = cfg.path("model", "model.bin")
    _require(mpath)
    mdl = model_mod.load_model(mpath)
    if mdl.config.input_dim != ds.dim:
        raise FormatError(f"model expects dimension {mdl.config.input_dim}, data has {ds.dim}")
    A_hat = model_mod.normalized_adjacency(graph_mod.symmetrize(g))
    return search.Scorer.learned(mdl.forward_f(A_hat, base), mdl.g, ds.dim), g, cfg.k


def cmd_search(cfg: RunConfig, args) -> None:
    gpath = cfg.path("graph", "graph.nsw")
    _require(gpath)
    ds = _load_data(cfg)
    g = graph_mod.load_graph(gpath)
    if cfg.queries:
        _require(cfg.queries)
        Q = data_mod.load_fvecs(cfg.queries)
    else:
        Q = ds.test_queries
    if Q is None or Q.shape[1:] != (ds.dim,):
        raise FormatError("queries missing or of the wrong dimension")
    scorer, sg, k = _scorer(cfg, ds, g)
    scfg = search.SearchConfig(cfg.dcs, k, tau=cfg.tau, mode=cfg.mode)
    base = np.asarray(ds.base, dtype=np.float64)
    for i, q in enumerate(Q):
        res = search.search_query(sg, scorer, base, q, scfg)
        ids = res.ids[:cfg.print_r]
        dist = np.sqrt(((base[ids] - q) ** 2).sum(axis=1))
        print(f"{i}\t" + " ".join(f"{v}:{d:.4f}" for v, d in zip(ids, dist)))


def cmd_eval(cfg: RunConfig, args) -> None:
    gpath = cfg.path("graph", "graph.nsw")
    _require(gpath)
    ds = _load_data(cfg)
    g = graph_mod.load_graph(gpath)
    nearest = _load_gt(cfg, "query")[:, 0]
    budgets = [int(s) for s in cfg.dcs_grid.split(",") if s.strip()] if cfg.dcs_grid else [cfg.dcs]
    mpath = cfg.path("model", "model.bin")
    mdl = model_mod.load_model(mpath) if os.path.exists(mpath) else None
    grid = []
    for dcs in budgets:
        grid.append(evaluate.GridPoint(search.ScorerMode.ORIGINAL, dcs))
        if mdl is not None:
            grid.append(evaluate.GridPoint(search.ScorerMode.LEARNED, dcs, cfg.k, mdl.config.out_dim))
        d = cfg.dim or ds.dim
        if d < ds.dim:
            grid.append(evaluate.GridPoint(search.ScorerMode.TRUNCATED, dcs, cfg.k, d))
    report = evaluate.run_comparison(ds.base, g, ds.test_queries, nearest, grid, dataset_name=cfg.workdir,
                                     model=mdl, tau=cfg.tau, max_degree=cfg.max_m,
                                     ef_construction=cfg.ef_construction, config=cfg.echo())
    out = cfg.path("report", f"report.{cfg.format}")
    evaluate.write_report(report, out, cfg.format)
    for r in report.rows:
        print(f"{r.scorer:>14} DCS={r.dcs:<5} k={r.k:<3} rDCS={r.rdcs:<8g} R@1={r.recall_at_1:.4f}")
    print(f"report -> {out}")


def cmd_demo_toy(cfg: RunConfig, args) -> None:
    demo = toy.find_escape(cfg.seed)
    print(toy.describe(demo))


COMMANDS = {
    "synth": (cmd_synth, "generate a Gaussian-mixture dataset"),
    "ingest": (cmd_ingest, "copy fvecs files into the data directory"),
    "ground-truth": (cmd_ground_truth, "exact nearest neighbors for both query splits"),
    "build-graph": (cmd_build_graph, "build the NSW graph"),
    "precompute-cache": (cmd_precompute_cache, "hop-distance cache for training queries"),
    "train": (cmd_train, "learn routing representations"),
    "search": (cmd_search, "answer queries, printing ids and distances"),
    "eval": (cmd_eval, "comparison report over the budget grid"),
    "demo-toy": (cmd_demo_toy, "2-D local-minimum escape demonstration"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", default=None, help="key = value config file (default: none)")
    for flag, key in FLAGS.items():
        typ, default, text = CONFIG_KEYS[key]
        common.add_argument(flag, dest=key, type=typ, default=None, help=f"{text} (default: {default})")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress (default: off)")

    keys = "\n".join(f"  {k:<16} {spec[2]} (default: {spec[1]!r})" for k, spec in CONFIG_KEYS.items())
    parser = _Parser(prog="graphroute", description="Budgeted graph search with learned routing.",
                     epilog="config file keys:\n" + keys,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    for name, (_, text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=text, description=text)
        if name == "ingest":
            p.add_argument("--base", required=True, help="base vectors (.fvecs) (required)")
            p.add_argument("--learn", default=None, help="training queries (.fvecs) (default: none)")
            p.add_argument("--query", default=None, help="test queries (.fvecs) (default: none)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = build_config(args)
        COMMANDS[args.command][0](cfg, args)
    except UsageError as e:
        print(f"graphroute: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, FileNotFoundError, IsADirectoryError) as e:
        print(f"graphroute: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (model_mod.NonFiniteError, oracle.UnreachableTarget, RuntimeError, FloatingPointError) as e:
        print(f"graphroute: runtime failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as e:
        print(f"graphroute: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
