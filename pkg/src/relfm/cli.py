"""Command-line entry point tying the pipeline together.

Subcommands: synth, build-graph, linearize, encode, pretrain, adapt, eval,
ablate. Every run logs its fully resolved configuration. Exit codes:
0 success, 1 validation error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import pickle
import sys
from pathlib import Path

import numpy as np

from . import downstream, encoders, hetgnn, pretrain, relmodel, report, rowtext, synth
from . import tensor as T

log = logging.getLogger("relfm")


class CliError(Exception):
    def __init__(self, message, code=1):
        super().__init__(message)
        self.code = code


def _setup_logging():
    level = os.environ.get("RELFM_LOG", "info").lower()
    logging.basicConfig(
        level={"error": logging.ERROR, "info": logging.INFO,
               "debug": logging.DEBUG}.get(level, logging.INFO),
        format="%(levelname)s %(name)s: %(message)s")


def _log_config(args):
    resolved = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    log.info("resolved configuration: %s", json.dumps(resolved, default=str))


def _load_bundle(path):
    try:
        with open(path, "rb") as f:
            return pickle.load(f)
    except OSError as exc:
        raise CliError(f"cannot read graph bundle {path}: {exc}", code=2) from exc


def _save_bundle(bundle, path):
    with open(path, "wb") as f:
        pickle.dump(bundle, f)


# -- subcommands -----------------------------------------------------------


def cmd_synth(args):
    profile = synth.SynthProfile(
        n_tables=args.tables, rows_per_table=args.rows, topology=args.profile,
        attrs_per_table=args.attrs, vocab_size=args.vocab,
        signal_mode=args.mode, noise=args.noise, seed=args.seed)
    manifest, store = synth.generate_database(profile, args.out)
    task_rows, coin_flips = synth.plant_labels(manifest, store, profile)
    synth.write_task_files(task_rows, args.out)
    log.info("wrote %d tables, %d task rows (%d coin-flip labels) to %s",
             len(manifest.tables), len(task_rows), coin_flips, args.out)
    return 0


def cmd_build_graph(args):
    manifest = relmodel.parse_schema_manifest(args.schema)
    root = args.root if args.root else Path(args.schema).parent
    store = relmodel.load_tables(manifest, root, row_cap=args.row_cap)
    graph = relmodel.build_entity_graph(manifest, store, strict=args.strict)
    rep = relmodel.validate_graph(graph)
    if not rep.ok:
        raise CliError("graph invariant violations: " + "; ".join(rep.violations))
    log.info("graph: %d nodes, %d directed edges, %d dangling FKs dropped",
             graph.n_nodes, sum(rep.edge_counts.values()), graph.dangling_fk_count)
    _save_bundle({"manifest": manifest, "store": store, "graph": graph}, args.out)
    if args.dump:
        with open(args.dump, "w", encoding="utf-8") as f:
            relmodel.dump_graph(graph, f)
    return 0


def cmd_linearize(args):
    manifest = relmodel.parse_schema_manifest(args.schema)
    root = args.root if args.root else Path(args.schema).parent
    store = relmodel.load_tables(manifest, root)
    rows = rowtext.linearize_database(manifest, store,
                                     per_table_quota=args.per_table_quota)
    split = rowtext.split_corpus(len(rows), args.seed)
    files = rowtext.export_corpus(rows, split, args.out, args.seed)
    log.info("wrote %d rows into %s", len(rows), ", ".join(str(p) for p in files))
    return 0


def cmd_encode(args):
    bundle = _load_bundle(args.graph)
    manifest, store = bundle["manifest"], bundle["store"]
    if args.method == "hashed":
        matrix = encoders.encode_hashed(manifest, store, args.dim, args.seed)
    elif args.method == "file":
        if not args.source:
            raise CliError("--source is required with --method file")
        matrix = encoders.load_embedding_file(args.source, manifest, store)
    else:  # random
        if not args.reference:
            raise CliError("--reference is required with --method random")
        ref = encoders.load_embedding_file(args.reference)
        matrix = encoders.gen_random_embeddings(ref, args.seed)
    encoders.write_embedding_file(matrix, args.out)
    log.info("wrote %s (%d tables, dim %d)", args.out, len(matrix.blocks), matrix.dim)
    return 0


def cmd_pretrain(args):
    cfg = (pretrain.PretrainConfig.from_json(args.config) if args.config
           else pretrain.PretrainConfig())
    if args.epochs is not None:
        cfg.epochs = args.epochs
    if args.seed is not None:
        cfg.seed = args.seed
    graph_paths = args.graphs.split(",")
    feat_paths = args.features.split(",")
    if len(graph_paths) != len(feat_paths):
        raise CliError("--graphs and --features must list the same number of files")
    databases = []
    for gp, fp in zip(graph_paths, feat_paths):
        bundle = _load_bundle(gp)
        feats = encoders.load_embedding_file(fp, bundle["manifest"], bundle["store"])
        databases.append((bundle["graph"], feats))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params, history = pretrain.run_pretraining(databases, cfg, checkpoint_dir=out)
    pretrain.write_history_csv(history, out / "loss_history.csv")
    report.plot_pretrain_history(history, out / "loss_curves.png")
    T.save_checkpoint(pretrain.shared_checkpoint_entries(params[0]),
                      out / "pretrained.rfmp")
    log.info("pretraining done; history and checkpoints in %s", out)
    return 0


def _load_task(args, store):
    entity_table, val_start, test_start = downstream.load_task_manifest(args.task_manifest)
    task = downstream.load_task_table(args.task, entity_table, store)
    if args.random_split:
        downstream.assign_random_splits(task, args.seed)
    else:
        downstream.assign_time_splits(task, val_start, test_start)
    return task


def _downstream_cfg(args):
    return downstream.DownstreamConfig(
        epochs=args.epochs, seed=args.seed, batch_size=args.batch_size,
        time_filter=not args.no_time_filter)


def cmd_adapt(args):
    bundle = _load_bundle(args.graph)
    graph, store = bundle["graph"], bundle["store"]
    feats = encoders.load_embedding_file(args.features, bundle["manifest"], store)
    task = _load_task(args, store)
    cfg = _downstream_cfg(args)
    pretrained = T.load_checkpoint(args.pretrained) if args.pretrained else None
    model, history = downstream.train_downstream(
        pretrained, graph, store, feats, task, args.mode, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for which in ("val", "test"):
        metrics = downstream.evaluate_split(model, graph, store, feats, task,
                                            which, seed=cfg.seed)
        rows.append((args.mode, which, *metrics))
    downstream.write_metrics_csv(rows, out / "metrics.csv")
    report.plot_downstream_history(history, out / "training_curves.png")
    T.save_checkpoint({k: v.data for k, v in model.named_parameters().items()},
                      out / "model.rfmp")
    (out / "model.json").write_text(json.dumps({
        "mode": args.mode, "entity_table": task.entity_table,
        "d_in": feats.dim, "hidden_channels": cfg.hidden_channels,
        "layers": cfg.layers, "fanout": list(cfg.fanout), "seed": cfg.seed,
        "time_filter": cfg.time_filter,
        "date_mean": model.date.mean, "date_std": model.date.std}) + "\n",
        encoding="utf-8")
    log.info("adaptation done; metrics in %s", out / "metrics.csv")
    return 0


def cmd_eval(args):
    bundle = _load_bundle(args.graph)
    graph, store = bundle["graph"], bundle["store"]
    feats = encoders.load_embedding_file(args.features, bundle["manifest"], store)
    meta = json.loads(Path(args.model).with_suffix(".json").read_text(encoding="utf-8"))
    entries = T.load_checkpoint(args.model)
    cfg = downstream.DownstreamConfig(
        seed=meta["seed"], fanout=tuple(meta["fanout"]),
        hidden_channels=meta["hidden_channels"], layers=meta["layers"],
        time_filter=meta["time_filter"])
    model = downstream.init_model(
        graph, meta["d_in"], meta["mode"], cfg,
        entity_table=meta["entity_table"])
    model.restore(entries)
    model.date.mean, model.date.std = meta["date_mean"], meta["date_std"]
    entity_table, val_start, test_start = downstream.load_task_manifest(args.task_manifest)
    task = downstream.load_task_table(args.task, entity_table, store)
    downstream.assign_time_splits(task, val_start, test_start)
    metrics = downstream.evaluate_split(model, graph, store, feats, task,
                                        args.split, seed=meta["seed"])
    downstream.write_metrics_csv([(meta["mode"], args.split, *metrics)], args.out)
    log.info("evaluation metrics written to %s", args.out)
    return 0


def cmd_ablate(args):
    bundle = _load_bundle(args.graph)
    graph, store = bundle["graph"], bundle["store"]
    feats = encoders.load_embedding_file(args.features, bundle["manifest"], store)
    random_feats = encoders.gen_random_embeddings(feats, args.seed)
    task = _load_task(args, store)
    cfg = _downstream_cfg(args)
    pretrained = T.load_checkpoint(args.pretrained) if args.pretrained else None
    if pretrained is None:
        log.info("no pretrained checkpoint given; pretraining on the target graph")
        pcfg = pretrain.PretrainConfig(epochs=args.pretrain_epochs, seed=args.seed,
                                       batch_size=256, hidden_channels=cfg.hidden_channels)
        params, _ = pretrain.run_pretraining([(graph, feats)], pcfg)
        pretrained = pretrain.shared_checkpoint_entries(params[0])
    rows = downstream.run_ablation(graph, store,
                                   {"informative": feats, "random": random_feats},
                                   task, cfg, pretrained)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    downstream.write_metrics_csv(rows, out / "ablation.csv")
    report.plot_ablation(rows, out / "ablation.png")
    log.info("ablation table written to %s", out / "ablation.csv")
    return 0


# -- parser ----------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(
        prog="relfm",
        description="Relational entity-graph pretraining and adaptation engine.")
    p.add_argument("--workers", type=int, default=1,
                   help="batch-preparation parallelism (1 = deterministic)")
    p.add_argument("--deterministic", action="store_true",
                   help="force single-threaded, fully seeded execution")
    sub = p.add_subparsers(dest="command")

    sp = sub.add_parser("synth", help="generate a synthetic database + task")
    sp.add_argument("--profile", choices=["star", "chain"], default="star")
    sp.add_argument("--tables", type=int, default=4)
    sp.add_argument("--rows", type=int, default=2000)
    sp.add_argument("--attrs", type=int, default=3)
    sp.add_argument("--vocab", type=int, default=500)
    sp.add_argument("--mode", choices=[synth.NODE_LOCAL, synth.NEIGHBOR_AGGREGATE],
                    default=synth.NEIGHBOR_AGGREGATE)
    sp.add_argument("--noise", type=float, default=0.1)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("build-graph", help="parse schema + CSVs into an entity graph")
    sp.add_argument("--schema", required=True)
    sp.add_argument("--root", default=None, help="CSV directory (default: schema dir)")
    sp.add_argument("--row-cap", type=int, default=None)
    sp.add_argument("--strict", action="store_true",
                    help="fail on dangling foreign keys instead of dropping them")
    sp.add_argument("--dump", default=None, help="also write a text edge dump")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_build_graph)

    sp = sub.add_parser("linearize", help="export masked/target text corpora")
    sp.add_argument("--schema", required=True)
    sp.add_argument("--root", default=None)
    sp.add_argument("--per-table-quota", type=int, default=None)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_linearize)

    sp = sub.add_parser("encode", help="produce node features as a REMB file")
    sp.add_argument("--graph", required=True)
    sp.add_argument("--method", choices=["hashed", "file", "random"], default="hashed")
    sp.add_argument("--dim", type=int, default=1024)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--source", default=None, help="REMB input for --method file")
    sp.add_argument("--reference", default=None, help="REMB range reference for --method random")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_encode)

    sp = sub.add_parser("pretrain", help="masked-reconstruction GNN pretraining")
    sp.add_argument("--config", default=None, help="JSON config file")
    sp.add_argument("--graphs", required=True, help="comma-separated graph bundles")
    sp.add_argument("--features", required=True, help="comma-separated REMB files")
    sp.add_argument("--epochs", type=int, default=None)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_pretrain)

    def add_downstream_args(sp):
        sp.add_argument("--graph", required=True)
        sp.add_argument("--features", required=True)
        sp.add_argument("--task", required=True)
        sp.add_argument("--task-manifest", required=True)
        sp.add_argument("--epochs", type=int, default=30)
        sp.add_argument("--batch-size", type=int, default=64)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--random-split", action="store_true")
        sp.add_argument("--no-time-filter", action="store_true",
                        help="disable temporal neighbor filtering at seed times")
        sp.add_argument("--out", required=True)

    sp = sub.add_parser("adapt", help="train a downstream task model")
    add_downstream_args(sp)
    sp.add_argument("--mode", choices=[downstream.FROZEN, downstream.FINETUNE,
                                       downstream.NO_GNN], required=True)
    sp.add_argument("--pretrained", default=None, help="RFMP shared-layer checkpoint")
    sp.set_defaults(func=cmd_adapt)

    sp = sub.add_parser("eval", help="evaluate a saved downstream model")
    sp.add_argument("--model", required=True, help="model.rfmp from adapt")
    sp.add_argument("--graph", required=True)
    sp.add_argument("--features", required=True)
    sp.add_argument("--task", required=True)
    sp.add_argument("--task-manifest", required=True)
    sp.add_argument("--split", choices=["train", "val", "test"], default="test")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="run the 6-way embedding x GNN ablation")
    add_downstream_args(sp)
    sp.add_argument("--pretrained", default=None)
    sp.add_argument("--pretrain-epochs", type=int, default=3)
    sp.set_defaults(func=cmd_ablate)
    return p


def dispatch(argv):
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    if not getattr(args, "command", None):
        parser.print_usage()
        return 1
    if args.deterministic:
        args.workers = 1
    _log_config(args)
    try:
        return args.func(args)
    except CliError as exc:
        log.error("%s", exc)
        return exc.code
    except (relmodel.SchemaError, relmodel.DataError, encoders.EmbeddingError,
            downstream.TaskError, downstream.MetricError, T.CheckpointError,
            ValueError) as exc:
        log.error("%s", exc)
        return 1
    except OSError as exc:
        log.error("%s", exc)
        return 2


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
