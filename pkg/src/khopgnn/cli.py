"""Command-line entry point: ``khopgnn {gen,train,audit,bench,report}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .batch import GraphBatch
from .datasets import (PROPERTIES, ROLE_CONFIGS, degree_onehot, gen_property_dataset,
                       gen_shape_cycle, read_sidecar, tu_load, tu_write)
from .expressiveness import (audit_baseline_indistinguishability, audit_khop_separation,
                             build_counterexamples, exhaustive_injectivity,
                             odd_cycle_level_audit, small_connected_graphs)
from .graph import random_regular
from .harness import (MODEL_NAMES, ExperimentConfig, GraphTask, NodeTask, build_model,
                      cross_validate, format_table, read_reports, summarize, summary_table,
                      tune_allocator)

log = logging.getLogger("khopgnn")


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="khopgnn", description="k-hop GNN experiments and audits")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="{gen,train,audit,bench,report}")

    g = sub.add_parser("gen", help="generate a synthetic dataset in TU layout")
    g.add_argument("--task", choices=["roles", "property"], required=True)
    g.add_argument("--config", required=True,
                   help=f"roles: one of {', '.join(ROLE_CONFIGS)}; "
                        f"property: one of {', '.join(PROPERTIES)}")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, default=20, help="graphs for the roles task")
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="cross-validate a model on a dataset directory")
    t.add_argument("--model", choices=MODEL_NAMES, required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--folds", type=int, default=10)
    t.add_argument("--repeats", type=int, default=1)
    t.add_argument("--hidden", type=int, default=None)
    t.add_argument("--batch-size", type=int, default=64)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--lr-decay", type=float, default=1.0)
    t.add_argument("--lr-period", type=int, default=0)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--grid-hidden", type=_int_list, default=None)
    t.add_argument("--grid-batch", type=_int_list, default=None)
    t.add_argument("--out", required=True)

    a = sub.add_parser("audit", help="mechanical checks of the expressiveness results")
    a.add_argument("--suite", choices=["lemma1", "theorem1", "lemma2", "lemma3"], required=True)
    a.add_argument("--trials", type=int, default=100)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", default=None, help="append JSON records here")

    b = sub.add_parser("bench", help="time forward and backward passes")
    b.add_argument("--model", choices=MODEL_NAMES, required=True)
    b.add_argument("--nodes", type=int, default=60)
    b.add_argument("--degree", type=int, default=4)
    b.add_argument("--graphs", type=int, default=64)
    b.add_argument("--hidden", type=int, default=16)
    b.add_argument("--repeat", type=int, default=5)
    b.add_argument("--seed", type=int, default=0)

    r = sub.add_parser("report", help="summarize a results file")
    r.add_argument("--in", dest="inp", required=True)
    r.add_argument("--format", choices=["csv", "md"], default="md")
    return p


# gen -------------------------------------------------------------------------------

def cmd_gen(args) -> int:
    out = Path(args.out)
    if args.task == "roles":
        if args.config not in ROLE_CONFIGS:
            raise ValueError(f"unknown roles config {args.config!r}")
        sets = [gen_shape_cycle(args.config, args.seed + i) for i in range(args.count)]
        meta = {"task": "roles", "config": args.config, "seed": args.seed, "count": args.count,
                "seeds": [d.seed for d in sets], "kinds": [list(d.kinds) for d in sets],
                "role_names": [d.role_names for d in sets]}
        tu_write(out, "ROLES", [d.graph for d in sets], [0] * len(sets), sidecar=meta)
        print(f"wrote {len(sets)} graphs to {out}")
    else:
        ds = gen_property_dataset(args.config, args.seed)
        meta = {"task": "property", "config": args.config, "seed": args.seed,
                "labels": ds.labels.tolist()}
        tu_write(out, "PROPERTY", ds.graphs, ds.labels, node_labels=False, sidecar=meta)
        print(f"wrote {len(ds)} graphs ({int(ds.labels.sum())} satisfy {args.config}) to {out}")
    return 0


# train -----------------------------------------------------------------------------

def _defaults(task: str) -> dict:
    if task == "node":
        return {"hidden": 8, "lr": 1e-2, "epochs": 200}
    return {"hidden": 16, "lr": 1e-2, "epochs": 100}


def cmd_train(args) -> int:
    tune_allocator()
    meta = read_sidecar(args.data)
    ds = tu_load(args.data)
    task = "node" if meta.get("task") == "roles" else "graph"
    defaults = _defaults(task)
    grid = {}
    if args.grid_hidden:
        grid["hidden"] = args.grid_hidden
    if args.grid_batch:
        grid["batch_size"] = args.grid_batch
    cfg = ExperimentConfig(
        model=args.model, task=task,
        hidden=args.hidden or defaults["hidden"], batch_size=args.batch_size,
        lr=args.lr if args.lr is not None else defaults["lr"],
        lr_decay=args.lr_decay, lr_period=args.lr_period,
        epochs=args.epochs or defaults["epochs"], folds=args.folds, repeats=args.repeats,
        seed=args.seed, grid=grid)
    name = meta.get("config") or ds.name
    reports = []
    if task == "node":
        for i, g in enumerate(ds.graphs):
            g = g.with_features(degree_onehot(g))
            data = NodeTask(g, g.node_labels, f"{name}/{i}")
            reports += cross_validate(cfg, data, args.out)["reports"]
    else:
        reports = cross_validate(cfg, GraphTask(ds.graphs, ds.labels, name), args.out)["reports"]
    s = summarize(reports, cfg)
    print(f"{name} {args.model}: accuracy {s['accuracy_mean']:.4f} ± {s['accuracy_std']:.4f}, "
          f"macro-F1 {s['f1_mean']:.4f} over {s['n']} folds ({s['seconds']:.0f}s)")
    return 0


# audit -----------------------------------------------------------------------------

def _distinct_pairs():
    seen = set()
    for pair in build_counterexamples():
        key = pair.name.split("/")[0]
        if key not in seen:
            seen.add(key)
            yield pair


def cmd_audit(args) -> int:
    records = []
    ok = True
    if args.suite in ("lemma1", "theorem1"):
        for pair in _distinct_pairs():
            try:
                recs = audit_baseline_indistinguishability(pair, args.trials, seed=args.seed)
            except AssertionError as exc:
                print(f"FAIL {exc}")
                ok = False
                continue
            for rec in recs:
                same = rec["trials"] - rec["separated"]
                what = "node embeddings" if args.suite == "lemma1" else "graph readouts"
                print(f"{pair.name} {rec['model']}: {same}/{rec['trials']} indistinguishable "
                      f"({what}, max diff {rec['max_diff']:.2e})")
                records.append(rec)
            if args.suite == "theorem1":
                rec = audit_khop_separation(pair, args.trials, seed=args.seed)
                print(f"{pair.name} {rec['model']}: {rec['separated']}/{rec['trials']} separated")
                records.append(rec)
    elif args.suite == "lemma2":
        rec = exhaustive_injectivity()
        rec.pop("examples")
        print(f"multiset encoder: {rec['checked']} inputs, {rec['collisions']} collisions")
        ok = rec["collisions"] == 0
        records.append({"suite": "lemma2", **rec})
    else:
        graphs = small_connected_graphs(7)
        rng = np.random.default_rng(args.seed)
        graphs += [random_regular(int(rng.integers(4, 13)) * 2, int(rng.integers(2, 5)), rng)
                   for _ in range(args.trials)]
        rec = odd_cycle_level_audit(graphs)
        rec.pop("examples")
        print(f"same-level edge vs bipartite k-hop subgraph: {rec['checks']} checks, "
              f"{rec['disagreements']} disagreements")
        ok = rec["disagreements"] == 0
        records.append({"suite": "lemma3", "graphs": len(graphs), **rec})
    if args.out:
        with open(args.out, "a") as fh:
            for rec in records:
                fh.write(json.dumps({"suite": args.suite, "seed": args.seed,
                                     "trials": args.trials, **rec}) + "\n")
    return 0 if ok else 1


# bench -----------------------------------------------------------------------------

def cmd_bench(args) -> int:
    tune_allocator()
    rng = np.random.default_rng(args.seed)
    graphs = [random_regular(args.nodes, args.degree, rng) for _ in range(args.graphs)]
    labels = rng.integers(0, 2, len(graphs))
    model = build_model(args.model, 1, args.hidden, 2, "graph", rng)
    t0 = time.perf_counter()
    batch = GraphBatch(graphs)
    model.forward(batch)
    setup = time.perf_counter() - t0
    times = []
    for _ in range(args.repeat):
        t0 = time.perf_counter()
        tape = Tape()
        loss = ad.cross_entropy(tape, model.forward(batch, tape), labels)
        tape.backward(loss)
        times.append(time.perf_counter() - t0)
    print(json.dumps({"model": args.model, "graphs": args.graphs, "nodes": args.nodes,
                      "degree": args.degree, "hidden": args.hidden, "seed": args.seed,
                      "setup_seconds": setup, "step_seconds_median": float(np.median(times))}))
    return 0


# report ----------------------------------------------------------------------------

def cmd_report(args) -> int:
    rows = summary_table(read_reports(args.inp))
    sys.stdout.write(format_table(rows, args.format))
    return 0


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "audit": cmd_audit, "bench": cmd_bench,
            "report": cmd_report}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main(argv=None) -> None:
    sys.exit(run(argv))
