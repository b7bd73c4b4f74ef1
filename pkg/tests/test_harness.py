import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import khopgnn.harness as harness
from khopgnn.datasets import Fold, gen_shape_cycle, kfold_split
from khopgnn.gnn import GnnModel
from khopgnn.graph import Graph, cycle_graph
from khopgnn.harness import (ExperimentConfig, FoldReport, GraphTask, NodeTask, TrainingError,
                             accuracy_f1, build_model, cross_validate, evaluate, fold_seeds,
                             format_table, model_from_config, read_reports, run_fold, summarize,
                             summary_table, train)
from khopgnn.khop import KHopModel


def toy_graph_task(rng, n=10) -> GraphTask:
    """Cycles (label 0) against cycles with a pendant node (label 1), with degree
    features so that even the baseline can fit them."""
    graphs, labels = [], []
    for i in range(n):
        size = 5 + i % 4
        edges = list(cycle_graph(size).edges())
        if i % 2:
            edges.append((0, size))
        g = Graph.from_edges(size + i % 2, edges)
        graphs.append(g.with_features(g.degrees()[:, None].astype(float)))
        labels.append(i % 2)
    return GraphTask(graphs, labels, "toy")


# metrics -------------------------------------------------------------------------------

def test_metrics_examples():
    assert accuracy_f1([0, 0], [0, 1]) == (0.5, pytest.approx(1 / 3))
    assert accuracy_f1([1, 1, 0], [1, 1, 0]) == (1.0, 1.0)
    # class 2 never appears in truth or predictions, so it is skipped
    assert accuracy_f1([0, 1], [1, 0]) == (0.0, 0.0)
    with pytest.raises(ValueError):
        accuracy_f1([], [])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=40))
def test_metrics_match_sklearn_definition(pairs):
    y, p = np.array(pairs).T
    acc, f1 = accuracy_f1(y, p)
    classes = np.union1d(y, p)
    per = []
    for c in classes:
        tp, fp, fn = np.sum((p == c) & (y == c)), np.sum((p == c) & (y != c)), np.sum((p != c) & (y == c))
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        per.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    assert acc == pytest.approx(np.mean(y == p))
    assert f1 == pytest.approx(np.mean(per))
    assert 0 <= acc <= 1 and 0 <= f1 <= 1


def test_fold_report_rejects_bad_metrics():
    with pytest.raises(ValueError):
        FoldReport(0, 0, 1.5, 0.5, 0, 0.0, 1)


# config ----------------------------------------------------------------------------------

def test_config_validation_and_schedule():
    cfg = ExperimentConfig(model="gnn-2", lr=1e-3, lr_decay=0.5, lr_period=50, epochs=500)
    assert [cfg.lr_at(e) for e in (0, 49, 50, 499)] == [1e-3, 1e-3, 5e-4, 1e-3 * 0.5 ** 9]
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg
    for bad in ({"model": "mlp"}, {"hidden": 0}, {"lr_decay": 2.0}, {"task": "edge"},
                {"grid": {"dropout": [0.1]}}):
        with pytest.raises(ValueError):
            ExperimentConfig(**bad)


def test_build_model_names(rng):
    assert isinstance(build_model("gnn-3", 2, 4, 2, rng=rng), GnnModel)
    m = build_model("khop-3", 2, 4, 2, rng=rng)
    assert isinstance(m, KHopModel) and m.k == 3 and len(m.layers) == 1
    assert len(build_model("gnn-2", 2, 4, 2, rng=rng).layers) == 2
    assert model_from_config(m.config(), rng).config() == m.config()
    with pytest.raises(ValueError):
        build_model("khop-x", 2, 4, 2)


# training --------------------------------------------------------------------------------

def test_zero_learning_rate_changes_nothing(rng):
    data = toy_graph_task(rng)
    model = build_model("gnn-2", 1, 8, 2, rng=rng)
    before = {k: v.copy() for k, v in model.state().items() if "running" not in k}
    cfg = ExperimentConfig(model="gnn-2", lr=0.0, epochs=5, batch_size=10)
    _, info = train(model, data, cfg, np.arange(10))
    after = model.state()
    assert all(np.array_equal(v, after[k]) for k, v in before.items())
    assert np.allclose(info["losses"], info["losses"][0])


@pytest.mark.parametrize("name", ["gnn-2", "khop-2"])
def test_overfits_ten_graphs(rng, name):
    data = toy_graph_task(rng)
    model = build_model(name, 1, 16, 2, rng=rng)
    cfg = ExperimentConfig(model=name, lr=1e-2, epochs=500, batch_size=10)
    train(model, data, cfg, np.arange(10))
    assert evaluate(model, data, np.arange(10))[0] == 1.0


def test_node_task_fits_roles(rng):
    ds = gen_shape_cycle("basic", 0, shape="house")
    data = NodeTask(ds.graph, ds.roles)
    model = build_model("khop-2", data.in_dim, 16, data.n_classes, "node", rng)
    cfg = ExperimentConfig(model="khop-2", task="node", lr=1e-2, epochs=200)
    _, info = train(model, data, cfg, np.arange(len(data)))
    assert info["best_epoch"] == 199
    assert evaluate(model, data, np.arange(len(data)))[0] == 1.0


def test_non_finite_loss_aborts(rng):
    data = toy_graph_task(rng)
    model = build_model("gnn-2", 1, 4, 2, rng=rng)
    model.head.layers[1].weight.value[:] = 1e308
    with pytest.raises(TrainingError, match="non-finite loss"), np.errstate(all="ignore"):
        train(model, data, ExperimentConfig(model="gnn-2", epochs=1), np.arange(10))
    model.encoder.weight.value[:] = np.nan
    with pytest.raises(TrainingError, match="non-finite"):
        train(model, data, ExperimentConfig(model="gnn-2", epochs=1), np.arange(10))


def test_best_validation_epoch_is_restored(rng):
    data = toy_graph_task(rng)
    model = build_model("gnn-2", 1, 8, 2, rng=rng)
    cfg = ExperimentConfig(model="gnn-2", epochs=15, batch_size=4)
    model, info = train(model, data, cfg, np.arange(6), np.arange(6, 10))
    assert evaluate(model, data, np.arange(6, 10))[0] == info["val_accuracy"]
    assert 0 <= info["best_epoch"] < 15


def test_validation_ties_go_to_lower_loss(rng, monkeypatch):
    data = toy_graph_task(rng)
    # labels of graphs 8 and 9 are 0 and 1; epochs 1 and 2 are both fully
    # correct, epoch 2 more confidently
    scripted = iter([[[0.0, 1.0], [1.0, 0.0]], [[0.6, 0.4], [0.4, 0.6]],
                     [[3.0, -3.0], [-3.0, 3.0]], [[0.1, 0.0], [0.0, 0.1]]])
    monkeypatch.setattr(harness, "_logits", lambda *a: np.array(next(scripted)))
    model = build_model("gnn-2", 1, 4, 2, rng=rng)
    _, info = train(model, data, ExperimentConfig(model="gnn-2", epochs=4), np.arange(8),
                    np.array([8, 9]))
    assert info["best_epoch"] == 2 and info["val_accuracy"] == 1.0


# cross-validation -------------------------------------------------------------------------

def test_fold_seeds_are_distinct_and_stable():
    a = fold_seeds(3, 2, 5)
    assert a == fold_seeds(3, 2, 5)
    flat = [s for split, seeds in a for s in (split, *seeds)]
    assert len(set(flat)) == len(flat)


def test_cross_validation_is_deterministic(rng, tmp_path):
    data = toy_graph_task(rng, 20)
    cfg = ExperimentConfig(model="gnn-2", hidden=4, epochs=3, folds=4, batch_size=8, seed=5)
    a = cross_validate(cfg, data, tmp_path / "runs.jsonl")
    b = cross_validate(cfg, data)
    strip = lambda rs: [(r.fold, r.accuracy, r.macro_f1, r.best_epoch) for r in rs]
    assert strip(a["reports"]) == strip(b["reports"])
    recs = read_reports(tmp_path / "runs.jsonl")
    assert len(recs) == 4 and recs[0]["config"]["model"] == "gnn-2"
    assert sum(r["n_test"] for r in recs) == 20


def test_no_leakage_between_parts(rng, monkeypatch):
    data = toy_graph_task(rng, 20)
    seen = []
    real = harness.train

    def spy(model, data, cfg, train_idx, val_idx=(), rng=None):
        seen.append((set(map(int, train_idx)), set(map(int, val_idx))))
        return real(model, data, cfg, train_idx, val_idx, rng)

    monkeypatch.setattr(harness, "train", spy)
    cfg = ExperimentConfig(model="gnn-2", hidden=4, epochs=1, folds=4, batch_size=8)
    out = cross_validate(cfg, data)
    split_seed = fold_seeds(cfg.seed, 1, 4)[0][0]
    tests = [set(map(int, fold.test)) for fold in kfold_split(data.labels, 4, 0.1, split_seed)]
    for (tr, va), te in zip(seen, tests):
        assert not (tr & va or tr & te or va & te) and len(tr | va | te) == 20
    assert out["n"] == 4


def test_grid_search_picks_by_validation(rng):
    data = toy_graph_task(rng, 20)
    cfg = ExperimentConfig(model="gnn-2", epochs=2, grid={"hidden": [2, 4], "batch_size": [4]})
    fold = Fold(np.arange(12), np.arange(12, 16), np.arange(16, 20))
    report = run_fold(cfg, data, fold, 0, 0, seed=1)
    assert set(report.chosen) == {"hidden", "batch_size"} and report.chosen["hidden"] in (2, 4)


def test_task_mismatch(rng):
    with pytest.raises(ValueError):
        cross_validate(ExperimentConfig(task="node"), toy_graph_task(rng))


# reporting --------------------------------------------------------------------------------

def test_summary_and_tables():
    reports = [FoldReport(i, 0, acc, acc, 0, 1.0, 10, "d", "gnn-2")
               for i, acc in enumerate([0.5, 1.0])]
    s = summarize(reports)
    assert s["accuracy_mean"] == 0.75 and s["accuracy_std"] == 0.25 and s["seconds"] == 2.0
    records = [json.loads(json.dumps({"dataset": "d", "model": "gnn-2", "accuracy": r.accuracy,
                                      "macro_f1": r.macro_f1})) for r in reports]
    rows = summary_table(records)
    assert rows[0]["runs"] == 2
    csv = format_table(rows, "csv").splitlines()
    assert csv[0].startswith("dataset,model,runs") and csv[1] == "d,gnn-2,2,0.750000,0.250000,0.750000,0.250000"
    assert "75.00 ± 25.00" in format_table(rows, "md")
    with pytest.raises(ValueError):
        format_table(rows, "html")
