import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import jitter_biases

from khopgnn import autodiff as ad
from khopgnn.autodiff import Var
from khopgnn.batch import GraphBatch
from khopgnn.expressiveness import build_counterexamples, randomize_batchnorm
from khopgnn.gnn import (GnnLayer, GnnModel, batch_refinement, gnn_classify, gnn_layer_forward,
                         interned_aggregate, readout)
from khopgnn.graph import Graph, cycle_graph, disjoint_union, permute_graph, random_regular
from khopgnn.nn import finite_difference_check, mlp_forward


def direct_layer(layer: GnnLayer, g: Graph, H: np.ndarray) -> np.ndarray:
    """Node-by-node evaluation of the pre-normalization layer output."""
    out = []
    for v in range(g.n):
        nbrs = g.neighbors(v)
        if layer.mode == "split":
            msg = np.zeros(layer.dim)
            if len(nbrs):
                msg = np.mean([mlp_forward(layer.mlp1, H[u]).value for u in nbrs], axis=0)
            out.append(mlp_forward(layer.mlp2, H[v] + msg).value)
        else:
            closed = [v, *nbrs]
            out.append(np.mean([mlp_forward(layer.mlp1, H[u]).value for u in closed], axis=0))
    return np.array(out)


@pytest.mark.parametrize("mode", ["split", "integrated"])
def test_layer_matches_node_by_node_evaluation(rng, fig3, mode):
    layer = GnnLayer(3, 5, rng, mode)
    H = rng.normal(size=(fig3.n, 3))
    got = gnn_layer_forward(layer, fig3, H, normalize=False).value
    assert np.allclose(got, direct_layer(layer, fig3, H), atol=1e-12)


def test_isolated_node_gets_zero_message(rng):
    layer = GnnLayer(2, 4, rng)
    g = Graph.from_edges(1, [])
    H = np.array([[0.3, -1.2]])
    got = gnn_layer_forward(layer, g, H, normalize=False).value
    assert np.allclose(got[0], mlp_forward(layer.mlp2, H[0]).value)


def test_unknown_mode(rng):
    with pytest.raises(ValueError):
        GnnLayer(2, 2, rng, "mixed")


def test_readout_sum_and_mean():
    H = np.arange(6.0).reshape(3, 2)
    assert readout(H).value.tolist() == [[6.0, 9.0]]
    assert readout(H, "mean").value.tolist() == [[2.0, 3.0]]
    with pytest.raises(ValueError):
        readout(np.zeros((0, 2)))


def test_logits_length_and_task(rng):
    g = cycle_graph(5)
    assert gnn_classify(GnnModel(1, 8, 3, rng=rng), g).shape == (3,)
    assert gnn_classify(GnnModel(1, 8, 4, task="node", rng=rng), g).shape == (5, 4)


def test_model_rejects_wrong_feature_width(rng):
    with pytest.raises(ValueError):
        GnnModel(2, 4, 2, rng=rng).forward(GraphBatch([cycle_graph(4)]))


# interned evaluation ------------------------------------------------------------------

@pytest.mark.parametrize("mode", ["split", "integrated"])
def test_interned_matches_direct_layer(rng, mode):
    graphs = [random_regular(12, 3, rng), cycle_graph(7), Graph.from_edges(3, [(0, 1)])]
    batch = GraphBatch(graphs)
    layer = GnnLayer(4, 6, rng, mode)
    # rows that are constant on refinement classes, as the model guarantees
    step0 = batch_refinement(batch, 0, closed=mode == "integrated")
    H = Var(batch.features @ rng.normal(size=(1, 4)))
    direct = layer.aggregate(batch, H).value
    interned = interned_aggregate(layer, step0, H).value
    assert np.allclose(direct, interned, atol=1e-12)


@pytest.mark.parametrize("mode", ["split", "integrated"])
def test_model_forward_matches_uninterned_stack(rng, mode):
    graphs = [random_regular(10, 3, rng), cycle_graph(6), Graph.from_edges(4, [(0, 1), (1, 2)])]
    batch = GraphBatch(graphs)
    model = GnnModel(1, 5, 2, n_layers=3, rng=rng, mode=mode)
    H = model.encoder(Var(batch.features))
    for layer in model.layers:
        H = layer.bn(layer.aggregate(batch, H))
    expected = model.head(readout(H, "sum", None, batch)).value
    assert np.allclose(model.forward(batch).value, expected, atol=1e-10)


# invariances --------------------------------------------------------------------------

@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    g = random_regular(10, 3, rng).with_features(rng.normal(size=(10, 2)))
    p = permute_graph(g, rng.permutation(10))
    model = GnnModel(2, 6, 3, rng=rng).eval()
    randomize_batchnorm(model, rng)
    assert np.allclose(gnn_classify(model, g), gnn_classify(model, p), atol=1e-9)


def test_node_task_equivariance(rng):
    g = random_regular(8, 3, rng).with_features(rng.normal(size=(8, 2)))
    perm = rng.permutation(8)
    model = GnnModel(2, 6, 3, task="node", rng=rng)
    out, out_p = gnn_classify(model, g), gnn_classify(model, permute_graph(g, perm))
    # node v of g becomes node perm[v]
    assert np.allclose(out_p[perm], out, atol=1e-10)


def test_regular_graphs_of_equal_degree_get_identical_states(rng):
    for pair in build_counterexamples():
        for layers in (2, 3):
            model = GnnModel(1, 8, 2, n_layers=layers, rng=rng).eval()
            randomize_batchnorm(model, rng)
            a = model.node_states(GraphBatch([pair.g_pos])).value
            b = model.node_states(GraphBatch([pair.g_neg])).value
            assert np.abs(a - a[0]).max() < 1e-9 and np.abs(b - a[0]).max() < 1e-9
            assert np.allclose(gnn_classify(model, pair.g_pos), gnn_classify(model, pair.g_neg),
                               atol=1e-9)


def test_batch_of_two_equals_union(rng):
    a, b = cycle_graph(5), random_regular(6, 3, rng)
    model = GnnModel(1, 4, 2, task="node", rng=rng)
    both = model.forward(GraphBatch([a, b])).value
    union = model.forward(GraphBatch([disjoint_union(a, b)])).value
    assert np.allclose(both, union, atol=1e-12)


# gradients --------------------------------------------------------------------------

@pytest.mark.parametrize("layers", [1, 2])
def test_model_gradient_matches_finite_differences(rng, layers):
    graphs = [random_regular(8, 3, rng).with_features(rng.normal(size=(8, 2))),
              cycle_graph(5).with_features(rng.normal(size=(5, 2)))]
    batch = GraphBatch(graphs)
    labels = np.array([0, 1])
    model = GnnModel(2, 4, 2, n_layers=layers, rng=rng)
    jitter_biases(model, rng)

    def loss(tape):
        return ad.cross_entropy(tape, model.forward(batch, tape), labels)

    worst, _, _ = finite_difference_check(loss, model.parameters())
    assert worst < 1e-3


def test_gradient_check_on_bias_feeding_batchnorm():
    # the last bias of mlp2 has an exactly zero gradient; the numeric estimate
    # must stay at rounding level instead of blowing up with smaller steps
    rng = np.random.default_rng(5)
    graphs = [random_regular(8, 3, rng).with_features(rng.normal(size=(8, 2))),
              cycle_graph(5).with_features(rng.normal(size=(5, 2)))]
    batch = GraphBatch(graphs)
    model = GnnModel(2, 4, 2, n_layers=1, rng=rng)
    jitter_biases(model, rng)
    bias = dict(model.named_parameters())["layers.0.mlp2.layers.1.bias"]

    def loss(tape):
        return ad.cross_entropy(tape, model.forward(batch, tape), np.array([0, 1]))

    worst, analytic, numeric = finite_difference_check(loss, [bias])
    assert np.abs(analytic[0]).max() < 1e-12 and np.abs(numeric[0]).max() < 1e-8
    assert worst < 1e-3
