"""Training loops, metrics and the cross-validation driver."""

from __future__ import annotations

import csv
import ctypes
import ctypes.util
import io
import itertools
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .batch import GraphBatch
from .datasets import Fold, kfold_split
from .gnn import GnnModel, GraphModel
from .graph import Graph
from .khop import KHopModel
from .nn import Adam

log = logging.getLogger(__name__)

MODEL_NAMES = ("gnn-2", "gnn-3", "khop-2", "khop-3")
WORKERS_ENV = "KHOPGNN_WORKERS"


class TrainingError(RuntimeError):
    pass


def tune_allocator(limit: int = 1 << 28) -> bool:
    """Keep freed buffers up to ``limit`` bytes inside the heap (glibc only).

    Training frees and reallocates many equally sized arrays; handing each one
    back to the OS makes every reuse pay page faults again. Returns whether the
    settings were applied.
    """
    name = ctypes.util.find_library("c")
    if not name:
        return False
    try:
        libc = ctypes.CDLL(name)
        # M_TRIM_THRESHOLD, M_TOP_PAD, M_MMAP_THRESHOLD
        return all(libc.mallopt(opt, limit) == 1 for opt in (-1, -2, -3))
    except (OSError, AttributeError):
        return False


def build_model(name: str, in_dim: int, hidden: int, n_classes: int, task: str = "graph",
                rng: np.random.Generator | None = None, layers: int | None = None) -> GraphModel:
    """``gnn-T`` is the baseline with T layers, ``khop-k`` one layer of radius k."""
    kind, _, num = name.partition("-")
    if kind not in ("gnn", "khop") or not num.isdigit() or int(num) < 1:
        raise ValueError(f"unknown model {name!r}; expected one of {MODEL_NAMES}")
    rng = np.random.default_rng() if rng is None else rng
    if kind == "gnn":
        return GnnModel(in_dim, hidden, n_classes, n_layers=layers or int(num), task=task, rng=rng)
    return KHopModel(in_dim, hidden, n_classes, k=int(num), n_layers=layers or 1, task=task, rng=rng)


def model_from_config(config: dict, rng: np.random.Generator | None = None) -> GraphModel:
    name = f"gnn-{config['layers']}" if config["model"] == "gnn" else f"khop-{config['k']}"
    return build_model(name, config["in_dim"], config["hidden"], config["n_classes"],
                       config["task"], rng, config["layers"])


@dataclass
class ExperimentConfig:
    model: str = "khop-2"
    task: str = "graph"
    hidden: int = 32
    batch_size: int = 64
    lr: float = 1e-2
    lr_decay: float = 1.0
    lr_period: int = 0
    epochs: int = 100
    folds: int = 10
    repeats: int = 1
    seed: int = 0
    val_frac: float = 0.1
    layers: int | None = None
    grid: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.model not in MODEL_NAMES:
            build_model(self.model, 1, 1, 1)  # raises on malformed names
        if self.task not in ("graph", "node"):
            raise ValueError(f"unknown task {self.task!r}")
        for name in ("hidden", "batch_size", "epochs", "folds", "repeats"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lr < 0 or not 0 < self.lr_decay <= 1 or self.lr_period < 0:
            raise ValueError("invalid learning-rate schedule")
        if not 0 <= self.val_frac < 1:
            raise ValueError("val_frac must lie in [0, 1)")
        for key in self.grid:
            if key not in {f.name for f in fields(self)} - {"grid"}:
                raise ValueError(f"cannot search over {key!r}")

    def lr_at(self, epoch: int) -> float:
        if not self.lr_period:
            return self.lr
        return self.lr * self.lr_decay ** (epoch // self.lr_period)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class FoldReport:
    fold: int
    repeat: int
    accuracy: float
    macro_f1: float
    best_epoch: int
    seconds: float
    n_test: int
    dataset: str = ""
    model: str = ""
    val_accuracy: float | None = None
    chosen: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0 <= self.accuracy <= 1 and 0 <= self.macro_f1 <= 1):
            raise ValueError("metrics must lie in [0, 1]")


# Metrics ------------------------------------------------------------------------

def accuracy_f1(y_true, y_pred) -> tuple[float, float]:
    """Accuracy and macro-F1; classes absent from both truth and predictions are skipped."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.size == 0:
        raise ValueError("cannot evaluate on empty data")
    if y_true.shape != y_pred.shape:
        raise ValueError("truth and predictions differ in length")
    acc = float(np.mean(y_true == y_pred))
    scores = []
    for c in np.union1d(y_true, y_pred):
        tp = np.sum((y_pred == c) & (y_true == c))
        denom = np.sum(y_pred == c) + np.sum(y_true == c)
        scores.append(2.0 * tp / denom)
    return acc, float(np.mean(scores))


# Data views ---------------------------------------------------------------------

class GraphTask:
    """Graph classification over a list of labeled graphs."""

    task = "graph"

    def __init__(self, graphs: Sequence[Graph], labels=None, name: str = ""):
        self.graphs = list(graphs)
        self.labels = np.asarray(labels if labels is not None else
                                 [g.graph_label for g in self.graphs], dtype=np.int64)
        self.name = name
        self._batches: dict = {}

    @property
    def in_dim(self) -> int:
        return self.graphs[0].features.shape[1]

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1

    def __len__(self) -> int:
        return len(self.graphs)

    def batch(self, idx) -> GraphBatch:
        key = tuple(int(i) for i in idx)
        if key not in self._batches:
            self._batches[key] = GraphBatch([self.graphs[i] for i in key])
        return self._batches[key]

    def fresh_batch(self, idx) -> GraphBatch:
        return GraphBatch([self.graphs[int(i)] for i in idx])


class NodeTask:
    """Transductive node classification on one graph."""

    task = "node"

    def __init__(self, graph: Graph, labels=None, name: str = ""):
        self.graph = graph
        self.labels = np.asarray(labels if labels is not None else graph.node_labels,
                                 dtype=np.int64)
        self.name = name
        self.full = GraphBatch([graph])

    @property
    def in_dim(self) -> int:
        return self.graph.features.shape[1]

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1

    def __len__(self) -> int:
        return self.graph.n


def _logits(model: GraphModel, data, idx) -> np.ndarray:
    model.eval()
    if data.task == "node":
        return model.forward(data.full).value[np.asarray(idx)]
    return model.forward(data.batch(idx)).value


def predict(model: GraphModel, data, idx) -> np.ndarray:
    return _logits(model, data, idx).argmax(axis=1)


def evaluate(model: GraphModel, data, idx) -> tuple[float, float]:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("cannot evaluate on empty data")
    return accuracy_f1(data.labels[idx], predict(model, data, idx))


# Training -----------------------------------------------------------------------

def _check_finite(loss, epoch: int, where: str) -> None:
    if not np.isfinite(loss.value):
        raise TrainingError(f"non-finite loss {float(loss.value)} at epoch {epoch} ({where})")


def _step(opt: Adam, epoch: int, where: str) -> None:
    try:
        opt.step()
    except FloatingPointError as exc:
        raise TrainingError(f"{exc} at epoch {epoch} ({where})") from None


def train(model: GraphModel, data, cfg: ExperimentConfig, train_idx, val_idx=(),
          rng: np.random.Generator | None = None) -> tuple[GraphModel, dict]:
    """Adam training. Graph tasks use shuffled mini-batches and keep the weights of
    the epoch with the best validation accuracy, ties going to the lower
    validation loss (the final epoch without a validation set); node tasks train full-batch and keep the final epoch.

    Returns the model and a log with ``best_epoch``, ``val_accuracy`` and ``losses``.
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    train_idx = np.asarray(train_idx, dtype=np.int64)
    val_idx = np.asarray(val_idx, dtype=np.int64)
    opt = Adam(model.parameters(), lr=cfg.lr)
    losses = []
    best = (-1.0, -np.inf, cfg.epochs - 1, None)
    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr_at(epoch)
        model.train()
        if data.task == "node":
            weights = np.zeros(len(data))
            weights[train_idx] = 1.0 / len(train_idx)
            tape = Tape()
            loss = ad.cross_entropy(tape, model.forward(data.full, tape), data.labels, weights)
            _check_finite(loss, epoch, "full graph")
            opt.zero_grad()
            tape.backward(loss)
            _step(opt, epoch, "full graph")
            losses.append(float(loss.value))
            continue
        order = train_idx[rng.permutation(len(train_idx))]
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            tape = Tape()
            batch = data.fresh_batch(idx)
            loss = ad.cross_entropy(tape, model.forward(batch, tape), data.labels[idx])
            _check_finite(loss, epoch, f"batch at {start}")
            opt.zero_grad()
            tape.backward(loss)
            _step(opt, epoch, f"batch at {start}")
            total += float(loss.value) * len(idx)
        losses.append(total / len(order))
        if len(val_idx):
            # ties in accuracy are common on small validation sets; the lower
            # validation loss wins them
            logits = _logits(model, data, val_idx)
            acc, _ = accuracy_f1(data.labels[val_idx], logits.argmax(axis=1))
            val_loss = float(ad.cross_entropy(None, Var(logits), data.labels[val_idx]).value)
            if (acc, -val_loss) > best[:2]:
                best = (acc, -val_loss, epoch, model.state())
    if best[3] is not None:
        model.load_state(best[3])
    model.eval()
    return model, {"best_epoch": best[2], "val_accuracy": best[0] if best[0] >= 0 else None,
                   "losses": losses}


# Cross-validation ------------------------------------------------------------------

def fold_seeds(seed: int, repeats: int, folds: int) -> list[tuple[int, list[int]]]:
    """Per repeat: a split seed and one training seed per fold, all spawned from ``seed``."""
    out = []
    for rep in np.random.SeedSequence(seed).spawn(repeats):
        split_seq, *fold_seqs = rep.spawn(folds + 1)
        out.append((int(split_seq.generate_state(1)[0]),
                    [int(s.generate_state(1)[0]) for s in fold_seqs]))
    return out


def _grid_points(cfg: ExperimentConfig) -> list[dict]:
    keys = sorted(cfg.grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(cfg.grid[k] for k in keys))]


def run_fold(cfg: ExperimentConfig, data, fold: Fold, fold_id: int, repeat: int,
             seed: int) -> FoldReport:
    """Train on one fold (picking the best grid point by validation accuracy) and test."""
    t0 = time.perf_counter()
    best = None
    for point in _grid_points(cfg):
        run_cfg = replace(cfg, grid={}, **point)
        rng = np.random.default_rng(seed)
        model = build_model(run_cfg.model, data.in_dim, run_cfg.hidden, data.n_classes,
                            data.task, rng, run_cfg.layers)
        model, info = train(model, data, run_cfg, fold.train, fold.val, rng)
        score = info["val_accuracy"] if info["val_accuracy"] is not None else 0.0
        if best is None or score > best[0]:
            best = (score, point, model, info)
    _, point, model, info = best
    acc, f1 = evaluate(model, data, fold.test)
    return FoldReport(fold_id, repeat, acc, f1, info["best_epoch"], time.perf_counter() - t0,
                      len(fold.test), data.name, cfg.model, info["val_accuracy"], point)


def _run_fold_job(args):
    return run_fold(*args)


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        raise ValueError(f"{WORKERS_ENV} must be an integer") from None


def cross_validate(cfg: ExperimentConfig, data, out_path=None, workers: int | None = None) -> dict:
    """Repeated stratified k-fold CV; one ``FoldReport`` per fold and repeat.

    Graph tasks carve ``cfg.val_frac`` of each training part out for epoch
    selection; node tasks use no validation split. When ``out_path`` is given
    every report is appended to it as a JSON line carrying the full config.
    """
    if cfg.task != data.task:
        raise ValueError(f"config task {cfg.task!r} does not match data task {data.task!r}")
    val_frac = cfg.val_frac if data.task == "graph" else 0.0
    jobs = []
    for rep, (split_seed, seeds) in enumerate(fold_seeds(cfg.seed, cfg.repeats, cfg.folds)):
        folds = kfold_split(data.labels, cfg.folds, val_frac, split_seed)
        jobs += [(cfg, data, fold, f, rep, seeds[f]) for f, fold in enumerate(folds)]
    workers = worker_count() if workers is None else workers
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            reports = list(pool.map(_run_fold_job, jobs))
    else:
        reports = [_run_fold_job(job) for job in jobs]
    for r in reports:
        log.info("%s %s repeat %d fold %d: acc %.4f f1 %.4f", data.name, cfg.model, r.repeat,
                 r.fold, r.accuracy, r.macro_f1)
    if out_path is not None:
        write_reports(out_path, reports, cfg)
    return summarize(reports, cfg)


def summarize(reports: Sequence[FoldReport], cfg: ExperimentConfig | None = None) -> dict:
    acc = np.array([r.accuracy for r in reports])
    f1 = np.array([r.macro_f1 for r in reports])
    return {"config": cfg.to_dict() if cfg else None, "n": len(reports),
            "accuracy_mean": float(acc.mean()), "accuracy_std": float(acc.std()),
            "f1_mean": float(f1.mean()), "f1_std": float(f1.std()),
            "seconds": float(sum(r.seconds for r in reports)), "reports": list(reports)}


def write_reports(path, reports: Sequence[FoldReport], cfg: ExperimentConfig, extra=None) -> None:
    with open(path, "a") as fh:
        for r in reports:
            fh.write(json.dumps({"config": cfg.to_dict(), **(extra or {}), **asdict(r)}) + "\n")


def read_reports(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def summary_table(records: Sequence[dict]) -> list[dict]:
    """Mean and population std per (dataset, model), in first-seen order."""
    groups: dict[tuple, list] = {}
    for rec in records:
        groups.setdefault((rec.get("dataset", ""), rec["model"]), []).append(rec)
    rows = []
    for (dataset, model), recs in groups.items():
        acc = np.array([r["accuracy"] for r in recs])
        f1 = np.array([r["macro_f1"] for r in recs])
        rows.append({"dataset": dataset, "model": model, "runs": len(recs),
                     "accuracy_mean": acc.mean(), "accuracy_std": acc.std(),
                     "f1_mean": f1.mean(), "f1_std": f1.std()})
    return rows


def format_table(rows: Sequence[dict], fmt: str = "csv") -> str:
    cols = ["dataset", "model", "runs", "accuracy_mean", "accuracy_std", "f1_mean", "f1_std"]
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({c: (f"{row[c]:.6f}" if isinstance(row[c], float) else row[c])
                             for c in cols})
        return buf.getvalue()
    if fmt == "md":
        lines = ["| dataset | model | runs | accuracy | macro-F1 |", "|---|---|---|---|---|"]
        for row in rows:
            lines.append(f"| {row['dataset']} | {row['model']} | {row['runs']} | "
                         f"{100 * row['accuracy_mean']:.2f} ± {100 * row['accuracy_std']:.2f} | "
                         f"{100 * row['f1_mean']:.2f} ± {100 * row['f1_std']:.2f} |")
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown format {fmt!r}")


def write_summary_csv(path, records: Sequence[dict]) -> None:
    Path(path).write_text(format_table(summary_table(records), "csv"))
