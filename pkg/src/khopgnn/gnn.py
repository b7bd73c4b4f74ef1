"""The standard message-passing GNN used as the comparison model."""

from __future__ import annotations

import weakref
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Tape, Var
from .batch import GraphBatch, feature_classes
from .graph import Graph
from .nn import BatchNorm, Dense, Mlp, Module


class GnnLayer(Module):
    """``h_v <- mlp2(h_v + mean_{u in N(v)} mlp1(h_u))``.

    ``mode="integrated"`` switches to the single-MLP variant that averages
    ``mlp(h_u)`` over the closed neighborhood of ``v``; it is not used by the
    experiments.
    """

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, mode: str = "split"):
        if mode not in ("split", "integrated"):
            raise ValueError(f"unknown layer mode {mode!r}")
        self.mode = mode
        self.mlp1 = Mlp(dim, hidden, dim, rng)
        if mode == "split":
            self.mlp2 = Mlp(dim, hidden, dim, rng)
        self.bn = BatchNorm(dim)
        self.training = True

    @property
    def dim(self) -> int:
        return self.mlp1.in_dim

    def aggregate(self, batch: GraphBatch, H: Var, tape: Tape | None = None) -> Var:
        if H.value.shape != (batch.num_nodes, self.dim):
            raise ValueError(f"expected features of shape {(batch.num_nodes, self.dim)}, "
                             f"got {H.value.shape}")
        if self.mode == "integrated":
            closed = batch.mean_adjacency().copy()
            deg = np.diff(closed.indptr)
            closed.data = np.repeat(1.0 / (deg + 1.0), deg)
            closed = closed + sp.diags(1.0 / (deg + 1.0))
            return ad.spmm(tape, closed, self.mlp1(H, tape))
        a = ad.spmm(tape, batch.mean_adjacency(), self.mlp1(H, tape))
        return self.mlp2(ad.add(tape, H, a), tape)


@dataclass
class RefinementStep:
    """Interned form of one layer on one graph or batch.

    Nodes are grouped by color refinement: two nodes share an output class when
    they had the same input class and the same multiset of neighbor input
    classes, so they receive identical layer outputs. ``reps`` holds one node
    per input class, ``self_cls`` the input class of each output class and
    ``node_cls`` the output class of every node. The mean-aggregation weights
    from input to output classes are kept as COO triplets.
    """

    reps: np.ndarray
    self_cls: np.ndarray
    node_cls: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray

    @property
    def agg(self) -> sp.csr_matrix:
        if "_agg" not in self.__dict__:
            self.__dict__["_agg"] = sp.csr_matrix(
                (self.vals, (self.rows, self.cols)), shape=(len(self.self_cls), len(self.reps)))
        return self.__dict__["_agg"]


def refine(g: Graph, node_cls: np.ndarray, closed: bool = False) -> RefinementStep:
    node_cls = np.asarray(node_cls, dtype=np.int64)
    n_in = int(node_cls.max()) + 1 if g.n else 0
    reps = np.full(n_in, -1, dtype=np.int64)
    reps[node_cls[::-1]] = np.arange(g.n)[::-1]
    keys: dict = {}
    out_cls = np.empty(g.n, dtype=np.int64)
    for v in range(g.n):
        nbrs = tuple(sorted(node_cls[g.neighbors(v)].tolist()))
        out_cls[v] = keys.setdefault((int(node_cls[v]), nbrs), len(keys))
    rows, cols, vals = [], [], []
    self_cls = np.empty(len(keys), dtype=np.int64)
    for j, (c, nbrs) in enumerate(keys):
        self_cls[j] = c
        members = nbrs + (c,) if closed else nbrs
        for x in members:
            rows.append(j)
            cols.append(x)
            vals.append(1.0 / len(members))
    return RefinementStep(reps, self_cls, out_cls, np.array(rows, dtype=np.int64),
                          np.array(cols, dtype=np.int64), np.array(vals, dtype=np.float64))


_REFINE_CACHE: dict[tuple[int, bool], list[RefinementStep]] = {}


def graph_refinement(g: Graph, depth: int, closed: bool = False) -> RefinementStep:
    """Refinement of layer ``depth`` (0-based), starting from feature classes."""
    key = (id(g), closed)
    steps = _REFINE_CACHE.get(key)
    if steps is None:
        steps = _REFINE_CACHE[key] = []
        weakref.finalize(g, _REFINE_CACHE.pop, key, None)
    while len(steps) <= depth:
        cls = feature_classes(g) if not steps else steps[-1].node_cls
        steps.append(refine(g, cls, closed))
    return steps[depth]


def merge_refinements(steps, node_offsets) -> RefinementStep:
    in_off = np.concatenate([[0], np.cumsum([len(s.reps) for s in steps])[:-1]])
    out_off = np.concatenate([[0], np.cumsum([len(s.self_cls) for s in steps])[:-1]])
    return RefinementStep(
        np.concatenate([s.reps + off for s, off in zip(steps, node_offsets)]),
        np.concatenate([s.self_cls + off for s, off in zip(steps, in_off)]),
        np.concatenate([s.node_cls + off for s, off in zip(steps, out_off)]),
        np.concatenate([s.rows + off for s, off in zip(steps, out_off)]),
        np.concatenate([s.cols + off for s, off in zip(steps, in_off)]),
        np.concatenate([s.vals for s in steps]))


def batch_refinement(batch: GraphBatch, depth: int, closed: bool = False) -> RefinementStep:
    cache = batch.__dict__.setdefault("_refinements", {})
    key = (depth, closed)
    if key not in cache:
        cache[key] = merge_refinements([graph_refinement(g, depth, closed) for g in batch.graphs],
                                       batch.offsets)
    return cache[key]


def interned_aggregate(layer: GnnLayer, step: RefinementStep, H: Var,
                       tape: Tape | None = None) -> Var:
    """Same result as ``layer.aggregate`` computed once per refinement class.

    Requires nodes of equal input class to have equal rows of ``H``.
    """
    Hc = ad.gather(tape, H, step.reps)
    msgs = ad.spmm(tape, step.agg, layer.mlp1(Hc, tape))
    if layer.mode == "split":
        msgs = layer.mlp2(ad.add(tape, ad.gather(tape, Hc, step.self_cls), msgs), tape)
    return ad.gather(tape, msgs, step.node_cls)


def gnn_layer_forward(layer: GnnLayer, g: Graph | GraphBatch, H, tape: Tape | None = None,
                      normalize: bool = True) -> Var:
    """One aggregation layer followed by batch normalization over all nodes."""
    batch = g if isinstance(g, GraphBatch) else GraphBatch([g])
    out = layer.aggregate(batch, ad.as_var(H), tape)
    return layer.bn(out, tape) if normalize else out


def readout(H, mode: str = "sum", tape: Tape | None = None, batch: GraphBatch | None = None) -> Var:
    """Column-wise sum or mean of node rows; per graph when ``batch`` is given."""
    H = ad.as_var(H)
    if H.value.shape[0] == 0:
        raise ValueError("readout of an empty graph")
    if mode not in ("sum", "mean"):
        raise ValueError(f"unknown readout mode {mode!r}")
    if batch is None:
        n = H.value.shape[0]
        mat = sp.csr_matrix(np.full((1, n), 1.0 if mode == "sum" else 1.0 / n))
        return ad.spmm(tape, mat, H)
    return ad.spmm(tape, batch.readout_matrix(mode), H)


class GraphModel(Module):
    """Encoder, aggregation layers and a two-layer classifier head.

    The linear encoder lifts raw node features to the hidden width so that the
    residual ``h + a`` and the inner representations share one space. For graph
    tasks the node states are summed per graph before the head; for node tasks
    the head is applied to every node.
    """

    def __init__(self, in_dim: int, hidden: int, n_classes: int, task: str,
                 rng: np.random.Generator, readout_mode: str = "sum"):
        if task not in ("graph", "node"):
            raise ValueError(f"unknown task {task!r}")
        self.task = task
        self.readout_mode = readout_mode
        self.encoder = Dense(in_dim, hidden, rng)
        self.layers: list = []
        self.head = Mlp(hidden, hidden, n_classes, rng)
        self.training = True

    @property
    def n_classes(self) -> int:
        return self.head.out_dim

    @property
    def in_dim(self) -> int:
        return self.encoder.in_dim

    def node_states(self, batch: GraphBatch, tape: Tape | None = None) -> Var:
        if batch.feature_dim != self.in_dim:
            raise ValueError(f"model expects {self.in_dim} input features, "
                             f"batch has {batch.feature_dim}")
        H = self.encoder(Var(batch.features), tape)
        for t, layer in enumerate(self.layers):
            H = self._layer(t, layer, batch, H, tape)
        return H

    def _layer(self, t, layer, batch, H, tape):
        raise NotImplementedError

    def embed(self, batch: GraphBatch, tape: Tape | None = None) -> Var:
        H = self.node_states(batch, tape)
        if self.task == "node":
            return H
        return readout(H, self.readout_mode, tape, batch)

    def forward(self, batch: GraphBatch, tape: Tape | None = None) -> Var:
        return self.head(self.embed(batch, tape), tape)

    def config(self) -> dict:
        return {"in_dim": self.in_dim, "hidden": self.encoder.out_dim,
                "n_classes": self.n_classes, "task": self.task, "layers": len(self.layers),
                "readout": self.readout_mode}


class GnnModel(GraphModel):
    def __init__(self, in_dim: int, hidden: int, n_classes: int, n_layers: int = 2,
                 task: str = "graph", rng: np.random.Generator | None = None,
                 mode: str = "split", readout_mode: str = "sum"):
        rng = np.random.default_rng() if rng is None else rng
        super().__init__(in_dim, hidden, n_classes, task, rng, readout_mode)
        self.layers = [GnnLayer(hidden, hidden, rng, mode) for _ in range(n_layers)]

    def _layer(self, t, layer, batch, H, tape):
        step = batch_refinement(batch, t, closed=layer.mode == "integrated")
        return layer.bn(interned_aggregate(layer, step, H, tape), tape)

    def config(self) -> dict:
        return {"model": "gnn", "mode": self.layers[0].mode if self.layers else "split",
                **super().config()}


def gnn_classify(model: GnnModel, g: Graph) -> np.ndarray:
    """Logits for one graph (graph task) or for each of its nodes (node task)."""
    out = model.forward(GraphBatch([g])).value
    return out[0] if model.task == "graph" else out
