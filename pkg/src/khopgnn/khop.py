"""k-hop aggregation layers built from UPDATE modules.

For a root ``v`` every node of its k-hop neighborhood gets an inner
representation initialized from the layer input. Updates run from the outermost
ring inwards: ring ``k`` is refined by within-ring updates, then each ring
``i = k-1 .. 1`` first absorbs the already final ring ``i+1`` (across update)
and then its own ring (within update). The root finally aggregates ring 1.
Nodes with an empty across or within set keep their value for that step.
All within updates of a ring read one snapshot, so the result does not depend
on the order in which nodes are visited.

Two evaluation routes are provided. ``khop_root_update`` follows the procedure
literally for one root. ``KHopLayer.aggregate`` evaluates all roots of a batch
at once from a precomputed plan in which sub-computations with identical inputs
(same inner value and same multiset of neighbor values) are computed once.
"""

from __future__ import annotations

import weakref
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Tape, Var
from .batch import GraphBatch, feature_classes, row_classes
from .gnn import GraphModel
from .graph import Graph, GraphError, ring_decompose
from .nn import BatchNorm, Mlp, Module, mlp_forward

ACROSS = "across"
WITHIN = "within"


def update_schedule(k: int) -> list[tuple[str, int]]:
    """Order in which the (kind, level) modules fire for one root."""
    steps = [(WITHIN, k)]
    for i in range(k - 1, 0, -1):
        steps += [(ACROSS, i), (WITHIN, i)]
    return steps + [(ACROSS, 0)]


class UpdateModule(Module):
    """``outer(self_mlp(x_w) + sum_{u in S} nbr_mlp(x_u))``."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.mlp_outer = Mlp(dim, hidden, dim, rng)
        self.mlp_self = Mlp(dim, hidden, dim, rng)
        self.mlp_nbr = Mlp(dim, hidden, dim, rng)


def update_module_apply(m: UpdateModule, xw, S: Sequence, tape: Tape | None = None) -> Var:
    z = mlp_forward(m.mlp_self, ad.as_var(xw), tape)
    for xu in S:
        z = ad.add(tape, z, mlp_forward(m.mlp_nbr, ad.as_var(xu), tape))
    return mlp_forward(m.mlp_outer, z, tape)


class KHopLayer(Module):
    """The 2k UPDATE modules of one aggregation layer plus its batch norm."""

    def __init__(self, k: int, dim: int, hidden: int, rng: np.random.Generator):
        if k < 1:
            raise ValueError("k must be at least 1")
        self.k = k
        self.dim = dim
        self.modules_by_key = {f"{kind}{level}": UpdateModule(dim, hidden, rng)
                               for kind, level in sorted(set(update_schedule(k)),
                                                         key=lambda s: (s[1], s[0]))}
        self.bn = BatchNorm(dim)
        self.training = True

    def module(self, kind: str, level: int) -> UpdateModule:
        return self.modules_by_key[f"{kind}{level}"]

    def module_keys(self) -> list[tuple[int, str]]:
        return sorted((int(key[6:]), key[:6]) for key in self.modules_by_key)

    def aggregate(self, batch: GraphBatch, H: Var, tape: Tape | None = None) -> Var:
        """Pre-normalization root states for every node of the batch.

        Sub-computations are shared between nodes whose rows of ``H`` are equal.
        """
        if H.value.shape != (batch.num_nodes, self.dim):
            raise ValueError(f"expected features of shape {(batch.num_nodes, self.dim)}, "
                             f"got {H.value.shape}")
        plans = [build_plan(g, self.k, row_classes(H.value[off:off + g.n]))
                 for g, off in zip(batch.graphs, batch.offsets)]
        return run_plan(self, merge_plans(plans, batch.offsets), H, tape)


# One root, literally ---------------------------------------------------------

def khop_root_update(layer: KHopLayer, g: Graph, H, v: int, tape: Tape | None = None) -> Var:
    """New state of root ``v`` (a ``(1, dim)`` row) computed from the layer input ``H``."""
    H = ad.as_var(H)
    if H.value.shape != (g.n, layer.dim):
        raise ValueError(f"expected features of shape {(g.n, layer.dim)}, got {H.value.shape}")
    k = layer.k
    rd = ring_decompose(g, v, k)
    # inner state: node -> current inner representation, discarded on return
    x: dict[int, Var] = {u: ad.gather(tape, H, [u]) for u in rd.nodes}
    levels = rd.levels

    def within(level: int) -> None:
        if level >= len(levels):
            return
        m = layer.module(WITHIN, level)
        fresh = {u: update_module_apply(m, x[u], [x[w] for w in rd.within[u]], tape)
                 for u in levels[level] if rd.within[u]}
        x.update(fresh)

    within(k)
    for i in range(k - 1, 0, -1):
        if i >= len(levels):
            continue
        m = layer.module(ACROSS, i)
        for u in levels[i]:
            if rd.across[u]:
                x[u] = update_module_apply(m, x[u], [x[w] for w in rd.across[u]], tape)
        within(i)
    ring1 = levels[1] if len(levels) > 1 else ()
    return update_module_apply(layer.module(ACROSS, 0), x[rd.root], [x[u] for u in ring1], tape)


def khop_layer_reference(layer: KHopLayer, g: Graph, H, tape: Tape | None = None,
                         order: Sequence[int] | None = None) -> Var:
    """Pre-normalization layer output assembled root by root, in ``order`` if given."""
    H = ad.as_var(H)
    order = range(g.n) if order is None else order
    rows = {int(v): khop_root_update(layer, g, H, int(v), tape) for v in order}
    if sorted(rows) != list(range(g.n)):
        raise GraphError("order must visit every node exactly once")
    return ad.concat(tape, [rows[v] for v in range(g.n)])


def khop_layer_forward(layer: KHopLayer, g: Graph | GraphBatch, H, tape: Tape | None = None,
                       normalize: bool = True) -> Var:
    batch = g if isinstance(g, GraphBatch) else GraphBatch([g])
    out = layer.aggregate(batch, ad.as_var(H), tape)
    return layer.bn(out, tape) if normalize else out


# Interned plans -------------------------------------------------------------

@dataclass
class StepPlan:
    """One (kind, level) step: ``out[r] = outer(self[r] + sum_c A[r, c] * nbr[c])``.

    Class ids are ``(block, index)`` pairs: block 0 holds the distinct layer
    inputs, block ``s + 1`` the outputs of step ``s``.
    """

    kind: str
    level: int
    n_out: int
    self_blk: np.ndarray
    self_idx: np.ndarray
    src_blk: np.ndarray
    src_idx: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    counts: np.ndarray


@dataclass
class KHopPlan:
    k: int
    n_nodes: int
    rep_nodes: np.ndarray
    steps: list[StepPlan]
    root_idx: np.ndarray
    n_instances: int

    @property
    def n_init(self) -> int:
        return len(self.rep_nodes)


def _ids(pairs) -> tuple[np.ndarray, np.ndarray]:
    arr = np.array(list(pairs), dtype=np.int64).reshape(-1, 2)
    return arr[:, 0].copy(), arr[:, 1].copy()


def build_plan(g: Graph, k: int, node_cls: np.ndarray) -> KHopPlan:
    """Interned evaluation plan for all roots of ``g``.

    ``node_cls[v]`` identifies the layer input of node ``v``: nodes with equal
    class must have equal input rows. Two targets of a step share an output
    class when their own class and the multiset of their neighbors' classes
    coincide, so each distinct sub-computation appears once.
    """
    node_cls = np.asarray(node_cls, dtype=np.int64)
    n_init = int(node_cls.max()) + 1 if g.n else 0
    rep_nodes = np.full(n_init, -1, dtype=np.int64)
    for v in range(g.n - 1, -1, -1):
        rep_nodes[node_cls[v]] = v
    if np.any(rep_nodes < 0):
        raise ValueError("node classes must be contiguous from 0")
    rds = [ring_decompose(g, v, k) for v in range(g.n)]
    cur = [{u: (0, int(node_cls[u])) for u in rd.level_of} for rd in rds]
    steps = []
    for s, (kind, level) in enumerate(update_schedule(k)):
        keys: dict = {}
        moved = []
        for v, rd in enumerate(rds):
            state = cur[v]
            if level == 0:
                targets = [(v, rd.levels[1] if len(rd.levels) > 1 else ())]
            elif level < len(rd.levels):
                sets = rd.across if kind == ACROSS else rd.within
                targets = [(u, sets[u]) for u in rd.levels[level] if sets[u]]
            else:
                continue
            for u, S in targets:
                key = (state[u], tuple(sorted(state[w] for w in S)))
                idx = keys.setdefault(key, len(keys))
                moved.append((v, u, idx))
        for v, u, idx in moved:
            cur[v][u] = (s + 1, idx)
        self_blk, self_idx = _ids(key[0] for key in keys)
        sources = sorted({w for key in keys for w in key[1]})
        col_of = {w: c for c, w in enumerate(sources)}
        src_blk, src_idx = _ids(sources)
        entries = [(r, col_of[w], cnt) for r, key in enumerate(keys)
                   for w, cnt in Counter(key[1]).items()]
        ent = np.array(entries, dtype=np.int64).reshape(-1, 3)
        steps.append(StepPlan(kind, level, len(keys), self_blk, self_idx, src_blk, src_idx,
                              ent[:, 0].copy(), ent[:, 1].copy(), ent[:, 2].astype(np.float64)))
    root_idx = np.array([cur[v][v][1] for v in range(g.n)], dtype=np.int64)
    n_instances = sum(len(rd.level_of) for rd in rds)
    return KHopPlan(k, g.n, rep_nodes, steps, root_idx, n_instances)


_PLAN_CACHE: dict[tuple[int, int], list[KHopPlan]] = {}


def graph_plans(g: Graph, k: int, depth: int) -> KHopPlan:
    """Plan of layer ``depth`` (0-based); deeper layers are keyed by the root
    classes of the layer below, since equal root classes give equal outputs."""
    key = (id(g), k)
    plans = _PLAN_CACHE.get(key)
    if plans is None:
        plans = _PLAN_CACHE[key] = []
        weakref.finalize(g, _PLAN_CACHE.pop, key, None)
    while len(plans) <= depth:
        cls = feature_classes(g) if not plans else plans[-1].root_idx
        plans.append(build_plan(g, k, cls))
    return plans[depth]


@dataclass
class BatchPlan:
    rep_nodes: np.ndarray
    # per step: the plan of the first graph (for kind and level), distinct self
    # ids with the map back to outputs, source ids and the aggregation matrix
    steps: list[tuple[StepPlan, np.ndarray, np.ndarray, np.ndarray, sp.csr_matrix]]
    root_rows: np.ndarray


def merge_plans(plans: Sequence[KHopPlan], node_offsets: np.ndarray) -> BatchPlan:
    """Lay per-graph plans side by side in one batch-wide class table."""
    n_graphs = len(plans)
    n_steps = len(plans[0].steps)
    sizes = np.zeros((n_steps + 1, n_graphs), dtype=np.int64)
    sizes[0] = [p.n_init for p in plans]
    for s in range(n_steps):
        sizes[s + 1] = [p.steps[s].n_out for p in plans]
    offs = np.zeros_like(sizes)
    offs[:, 1:] = np.cumsum(sizes, axis=1)[:, :-1]
    starts = np.concatenate([[0], np.cumsum(sizes.sum(axis=1))[:-1]])
    rep = np.concatenate([p.rep_nodes + off for p, off in zip(plans, node_offsets)])

    def remap(blk_parts, idx_parts):
        lengths = [len(b) for b in blk_parts]
        gid = np.repeat(np.arange(n_graphs), lengths)
        blk = np.concatenate(blk_parts)
        return starts[blk] + offs[blk, gid] + np.concatenate(idx_parts)

    merged = []
    for s in range(n_steps):
        parts = [p.steps[s] for p in plans]
        self_ids = remap([st.self_blk for st in parts], [st.self_idx for st in parts])
        src_ids = remap([st.src_blk for st in parts], [st.src_idx for st in parts])
        src_off = np.concatenate([[0], np.cumsum([len(st.src_idx) for st in parts])[:-1]])
        nnz = [len(st.rows) for st in parts]
        gid = np.repeat(np.arange(n_graphs), nnz)
        rows = np.concatenate([st.rows for st in parts]) + offs[s + 1, gid]
        cols = np.concatenate([st.cols for st in parts]) + src_off[gid]
        mat = sp.csr_matrix((np.concatenate([st.counts for st in parts]), (rows, cols)),
                            shape=(int(sizes[s + 1].sum()), len(src_ids)))
        self_uniq, self_inv = np.unique(self_ids, return_inverse=True)
        merged.append((parts[0], self_uniq, self_inv.reshape(-1), src_ids, mat))
    node_gid = np.repeat(np.arange(n_graphs), [p.n_nodes for p in plans])
    root_rows = offs[n_steps, node_gid] + np.concatenate([p.root_idx for p in plans])
    return BatchPlan(rep, merged, root_rows)


def batch_plan(batch: GraphBatch, k: int, depth: int) -> BatchPlan:
    cache = batch.__dict__.setdefault("_khop_plans", {})
    key = (k, depth)
    if key not in cache:
        cache[key] = merge_plans([graph_plans(g, k, depth) for g in batch.graphs], batch.offsets)
    return cache[key]


def run_plan(layer: KHopLayer, plan: BatchPlan, H: Var, tape: Tape | None = None) -> Var:
    table = ad.gather(tape, H, plan.rep_nodes)
    out = None
    for step, self_uniq, self_inv, src_ids, mat in plan.steps:
        if mat.shape[0] == 0:
            out = None
            continue
        m = layer.module(step.kind, step.level)
        z = ad.gather(tape, m.mlp_self(ad.gather(tape, table, self_uniq), tape), self_inv)
        if len(src_ids):
            msgs = m.mlp_nbr(ad.gather(tape, table, src_ids), tape)
            z = ad.add(tape, z, ad.spmm(tape, mat, msgs))
        out = m.mlp_outer(z, tape)
        if step.level > 0:
            table = ad.concat(tape, [table, out])
    return ad.gather(tape, out, plan.root_rows)


# Whole model ----------------------------------------------------------------

class KHopModel(GraphModel):
    """Encoder, ``n_layers`` k-hop layers (batch-normalized) and a classifier head."""

    def __init__(self, in_dim: int, hidden: int, n_classes: int, k: int = 2,
                 n_layers: int = 1, task: str = "graph", rng: np.random.Generator | None = None,
                 readout_mode: str = "sum"):
        rng = np.random.default_rng() if rng is None else rng
        super().__init__(in_dim, hidden, n_classes, task, rng, readout_mode)
        self.k = k
        self.layers = [KHopLayer(k, hidden, hidden, rng) for _ in range(n_layers)]

    def _layer(self, t, layer, batch, H, tape):
        out = run_plan(layer, batch_plan(batch, layer.k, t), H, tape)
        return layer.bn(out, tape)

    def config(self) -> dict:
        return {"model": "khop", "k": self.k, **super().config()}


def khop_classify(model: KHopModel, g: Graph) -> np.ndarray:
    out = model.forward(GraphBatch([g])).value
    return out[0] if model.task == "graph" else out
