"""Pipeline driver: generate, cluster, train, eval, sweep.

Every artifact embeds the run configuration and seed so identical
invocations produce byte-identical outputs. Exit codes: 0 success,
2 configuration error, 3 data error, 4 numeric error.
"""

import argparse
import json
import sys

import numpy as np

from . import cluster as cluster_mod
from . import corpus, evaluation, rank
from .errors import (
    ConfigurationError,
    DataError,
    NumericError,
    QcrankError,
)


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def cmd_generate(args):
    config = corpus.SynthConfig(
        num_train=args.num_train,
        num_dev=args.num_dev,
        num_test=args.num_test,
        num_planted_clusters=args.clusters,
        vocab_size=args.vocab_size,
        noise_rate=args.noise,
        rng_seed=args.seed,
        num_candidates=args.candidates,
        tokens_per_doc=args.tokens_per_doc,
        conflict_rate=args.conflict_rate,
    )
    train, dev, test = corpus.generate_synthetic(config)
    for tag, ds in (("train", train), ("dev", dev), ("test", test)):
        corpus.save_dataset(ds, f"{args.out_prefix}.{tag}.jsonl")
        print(f"{tag}: {len(ds)} queries -> {args.out_prefix}.{tag}.jsonl")
    _write_json(args.out_prefix + ".manifest.json", {
        "command": "generate",
        "config": {k: list(v) if isinstance(v, tuple) else v
                   for k, v in vars(config).items()},
    })
    return 0


# ---------------------------------------------------------------------------
# cluster
# ---------------------------------------------------------------------------

def cmd_cluster(args):
    train = corpus.load_dataset(args.train)
    if len(train) < args.branch:
        raise DataError(f"too few training queries ({len(train)}) to cluster")
    tree, assigns, stats, dicts = cluster_mod.fit_from_dataset(
        train,
        depth=args.depth,
        branch=args.branch,
        min_leaf=args.min_leaf,
        top_k_docs=args.top_k_docs,
        count_transform=args.count_transform,
        seed=args.seed,
    )
    cluster_mod.save_tree(tree, args.out)
    report = {
        "command": "cluster",
        "config": {
            "depth": args.depth, "branch": args.branch, "min_leaf": args.min_leaf,
            "top_k_docs": args.top_k_docs, "count_transform": args.count_transform,
            "seed": args.seed, "train": args.train,
        },
        "clusters": {},
    }
    for label in tree.valid_cluster_labels():
        top = cluster_mod.distinctive_ngrams(assigns, dicts, label, top_n=10)
        report["clusters"][label] = [[tok, score] for tok, score in top]
    _write_json(args.report, report)
    print(f"tree: {len(tree.valid_cluster_labels())} valid clusters -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _model_config_from_args(args, variant=None, mix_rate=None, seed=None):
    return rank.ModelConfig(
        variant=variant or args.variant,
        embedding_dim=args.embedding_dim,
        hidden_sizes=tuple(args.hidden_sizes),
        dropout_rate=args.dropout,
        learning_rate=args.learning_rate,
        optimizer=args.optimizer,
        mix_rate=args.mix_rate if mix_rate is None else mix_rate,
        vocab_min_freq=args.vocab_min_freq,
        cluster_head_hidden=args.cluster_head_hidden,
        batch_size=args.batch_size,
        max_epochs=args.epochs,
        patience=args.patience,
        rng_seed=args.seed if seed is None else seed,
    )


def _load_tree_and_stats(args, train_ds):
    tree = None
    stats = None
    if args.tree:
        tree = cluster_mod.load_tree(args.tree)
        stats = cluster_mod.Bm25Stats.from_dataset(train_ds)
    return tree, stats


def cmd_train(args):
    train_ds = corpus.load_dataset(args.train)
    dev_ds = corpus.load_dataset(args.dev)
    config = _model_config_from_args(args)
    if rank.needs_clusters(config.variant) and not args.tree:
        raise ConfigurationError(f"{config.variant} requires --tree")
    tree, stats = _load_tree_and_stats(args, train_ds)
    result = rank.train(train_ds, dev_ds, config, tree=tree, stats=stats)
    result.model.save(args.out)
    _write_json(args.log, {
        "command": "train",
        "config": config.to_dict(),
        "best_epoch": result.best_epoch,
        "best_dev_mrr": result.best_dev_mrr,
        "epochs": result.log,
    })
    print(f"trained {config.variant}: best dev MRR {result.best_dev_mrr:.4f} "
          f"(epoch {result.best_epoch}) -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _eval_checkpoint(path, test_ds, tree, stats):
    model = rank.Model.load(path)
    if model.schema != test_ds.schema:
        raise ConfigurationError(f"{path}: checkpoint schema does not match dataset")
    assignments = None
    if rank.needs_clusters(model.config.variant):
        if tree is None:
            raise ConfigurationError(
                f"{path}: {model.config.variant} checkpoint needs --tree")
        assignments = rank.compute_assignments([test_ds], tree, stats)
    ranks, weights, _ = rank.dataset_ranks(model, test_ds, assignments)
    return model, evaluation.evaluate_ranks(ranks, weights)


def _pct(delta, base):
    return f"{100.0 * delta / base:+.2f}%"


def cmd_eval(args):
    test_ds = corpus.load_dataset(args.test)
    tree = cluster_mod.load_tree(args.tree) if args.tree else None
    stats = None
    if tree is not None:
        stats_src = corpus.load_dataset(args.stats_from) if args.stats_from else test_ds
        stats = cluster_mod.Bm25Stats.from_dataset(stats_src)

    results = []
    for path in args.checkpoint:
        model, report = _eval_checkpoint(path, test_ds, tree, stats)
        results.append((path, model, report))

    out = {"command": "eval", "test": args.test, "models": []}
    base = results[0][2]
    for path, model, report in results:
        entry = {
            "checkpoint": path,
            "variant": model.config.variant,
            "metrics": report.to_dict(),
        }
        entry["relative_to_first"] = {
            "mrr": _pct(report.mrr - base.mrr, base.mrr),
            "success@1": _pct(report.success_at[1] - base.success_at[1],
                              max(base.success_at[1], 1e-12)),
            "success@5": _pct(report.success_at[5] - base.success_at[5],
                              max(base.success_at[5], 1e-12)),
            "wmrr": _pct(report.wmrr - base.wmrr, base.wmrr),
            "wacp": _pct(report.wacp - base.wacp, base.wacp),
        }
        out["models"].append(entry)
        print(f"{model.config.variant}: MRR {report.mrr:.4f} "
              f"({entry['relative_to_first']['mrr']}) "
              f"s@1 {report.success_at[1]:.4f} s@5 {report.success_at[5]:.4f} "
              f"WMRR {report.wmrr:.4f} WACP {report.wacp:.4f}")

    if len(results) == 2:
        ttest = evaluation.paired_t_test(results[1][2].per_query_rr,
                                         results[0][2].per_query_rr)
        out["paired_t_test"] = {
            "t": ttest.t, "p": ttest.p,
            "significant_at_99": ttest.significant,
            "degenerate": ttest.degenerate,
        }
        print(f"paired t-test: t={ttest.t:.4f} p={ttest.p:.2e} "
              f"significant@99%={ttest.significant}")
    _write_json(args.out, out)
    return 0


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

DEFAULT_MIX_GRID = (0.0, 0.3, 0.6, 0.9, 1.2, 1.5, 1.8, 2.4, 3.0)


def run_mix_rate_sweep(train_ds, dev_ds, test_ds, tree, stats, base_args,
                       grid=DEFAULT_MIX_GRID, seeds=(0,)):
    """Relative test-MRR improvement of qc-mtlrm over dprm per mix_rate.

    Baselines and sweep rows use matched seeds; returns a list of
    (mix_rate, mean relative improvement) rows.
    """
    if not grid:
        raise ConfigurationError("empty sweep grid")
    assignments = rank.compute_assignments([train_ds, dev_ds, test_ds], tree, stats)
    base_mrrs = {}
    for seed in seeds:
        cfg = _model_config_from_args(base_args, variant="dprm", seed=seed)
        res = rank.train(train_ds, dev_ds, cfg)
        ranks, _, _ = rank.dataset_ranks(res.model, test_ds)
        base_mrrs[seed] = evaluation.mrr(ranks)
    rows = []
    for value in grid:
        rels = []
        for seed in seeds:
            cfg = _model_config_from_args(base_args, variant="qc-mtlrm",
                                          mix_rate=float(value), seed=seed)
            res = rank.train(train_ds, dev_ds, cfg, tree=tree, stats=stats,
                             assignments=assignments)
            ranks, _, _ = rank.dataset_ranks(res.model, test_ds, assignments)
            m = evaluation.mrr(ranks)
            rels.append((m - base_mrrs[seed]) / base_mrrs[seed])
        rows.append((float(value), float(np.mean(rels))))
    return rows


def run_cluster_count_sweep(train_ds, dev_ds, test_ds, base_args,
                            branch_grid, seeds=(0,)):
    """Relative improvement vs. cluster count (depth-1 trees, varying B)."""
    if not branch_grid:
        raise ConfigurationError("empty sweep grid")
    base_mrrs = {}
    for seed in seeds:
        cfg = _model_config_from_args(base_args, variant="dprm", seed=seed)
        res = rank.train(train_ds, dev_ds, cfg)
        ranks, _, _ = rank.dataset_ranks(res.model, test_ds)
        base_mrrs[seed] = evaluation.mrr(ranks)
    rows = []
    for b in branch_grid:
        tree, _, stats, _ = cluster_mod.fit_from_dataset(
            train_ds, depth=1, branch=int(b), min_leaf=base_args.min_leaf,
            seed=base_args.seed)
        assignments = rank.compute_assignments([train_ds, dev_ds, test_ds], tree, stats)
        rels = []
        for seed in seeds:
            cfg = _model_config_from_args(base_args, variant="qc-mtlrm", seed=seed)
            res = rank.train(train_ds, dev_ds, cfg, tree=tree, stats=stats,
                             assignments=assignments)
            ranks, _, _ = rank.dataset_ranks(res.model, test_ds, assignments)
            m = evaluation.mrr(ranks)
            rels.append((m - base_mrrs[seed]) / base_mrrs[seed])
        rows.append((float(b), float(np.mean(rels))))
    return rows


def cmd_sweep(args):
    train_ds = corpus.load_dataset(args.train)
    dev_ds = corpus.load_dataset(args.dev)
    test_ds = corpus.load_dataset(args.test)
    grid = tuple(args.grid) if args.grid else None
    seeds = tuple(args.sweep_seeds)
    if args.param == "mix_rate":
        if not args.tree:
            raise ConfigurationError("mix_rate sweep requires --tree")
        tree = cluster_mod.load_tree(args.tree)
        stats = cluster_mod.Bm25Stats.from_dataset(train_ds)
        rows = run_mix_rate_sweep(train_ds, dev_ds, test_ds, tree, stats, args,
                                  grid=grid or DEFAULT_MIX_GRID, seeds=seeds)
        header = "mix_rate,relative_mrr_improvement"
    elif args.param == "clusters":
        rows = run_cluster_count_sweep(
            train_ds, dev_ds, test_ds, args,
            branch_grid=grid or (2, 4, 7, 10), seeds=seeds)
        header = "cluster_count,relative_mrr_improvement"
    else:
        raise ConfigurationError(f"unknown sweep parameter {args.param!r}")
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(f"# seeds={list(seeds)} seed={args.seed}\n")
        fh.write(header + "\n")
        for value, rel in rows:
            fh.write(f"{value!r},{rel!r}\n")
    for value, rel in rows:
        print(f"{args.param}={value}: {100 * rel:+.2f}%")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="qcrank",
        description="Query-cluster-aware learning-to-rank workbench.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate a synthetic click-log corpus")
    g.add_argument("--out-prefix", required=True)
    g.add_argument("--num-train", type=int, default=5000)
    g.add_argument("--num-dev", type=int, default=1000)
    g.add_argument("--num-test", type=int, default=1000)
    g.add_argument("--clusters", type=int, default=4)
    g.add_argument("--vocab-size", type=int, default=200)
    g.add_argument("--noise", type=float, default=0.1)
    g.add_argument("--candidates", type=int, default=6)
    g.add_argument("--tokens-per-doc", type=int, default=4)
    g.add_argument("--conflict-rate", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_generate)

    c = sub.add_parser("cluster", help="fit the divisive query hierarchy")
    c.add_argument("--train", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--report", required=True)
    c.add_argument("--depth", type=int, default=3)
    c.add_argument("--branch", type=int, default=7)
    c.add_argument("--min-leaf", type=int, default=50)
    c.add_argument("--top-k-docs", type=int, default=4)
    c.add_argument("--count-transform", choices=("raw", "log1p"), default="raw")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_cluster)

    def add_model_args(p):
        p.add_argument("--variant", choices=rank.VARIANTS, default="dprm")
        p.add_argument("--embedding-dim", type=int, default=40)
        p.add_argument("--hidden-sizes", type=int, nargs="+", default=[256, 128, 64])
        p.add_argument("--dropout", type=float, default=0.0)
        p.add_argument("--learning-rate", type=float, default=0.1)
        p.add_argument("--optimizer", choices=("adagrad", "adam"), default="adagrad")
        p.add_argument("--mix-rate", type=float, default=0.9)
        p.add_argument("--vocab-min-freq", type=int, default=1)
        p.add_argument("--cluster-head-hidden", type=int, default=64)
        p.add_argument("--batch-size", type=int, default=256)
        p.add_argument("--epochs", type=int, default=20)
        p.add_argument("--patience", type=int, default=3)
        p.add_argument("--seed", type=int, default=0)

    t = sub.add_parser("train", help="train one ranking model")
    t.add_argument("--train", required=True)
    t.add_argument("--dev", required=True)
    t.add_argument("--tree", default=None)
    t.add_argument("--out", required=True)
    t.add_argument("--log", required=True)
    add_model_args(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate checkpoints on a test split")
    e.add_argument("--checkpoint", action="append", required=True)
    e.add_argument("--test", required=True)
    e.add_argument("--tree", default=None)
    e.add_argument("--stats-from", default=None,
                   help="dataset used for BM25 stats (default: the test split)")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="hyper-parameter sweep vs. a dprm baseline")
    s.add_argument("--param", choices=("mix_rate", "clusters"), required=True)
    s.add_argument("--train", required=True)
    s.add_argument("--dev", required=True)
    s.add_argument("--test", required=True)
    s.add_argument("--tree", default=None)
    s.add_argument("--grid", type=float, nargs="*", default=None)
    s.add_argument("--sweep-seeds", type=int, nargs="+", default=[0])
    s.add_argument("--min-leaf", type=int, default=50)
    s.add_argument("--out", required=True)
    add_model_args(s)
    s.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4
    except QcrankError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
