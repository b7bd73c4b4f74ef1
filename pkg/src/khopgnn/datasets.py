"""Synthetic role and property datasets, the TU text format, and stratified folds."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import (Graph, GraphError, cycle_graph, disjoint_union, is_bipartite, is_connected,
                    is_regular, is_triangle_free, permute_graph, random_bipartite_regular,
                    random_regular)

ORACLES = {
    "connectivity": is_connected,
    "bipartiteness": is_bipartite,
    "triangle-freeness": is_triangle_free,
}
PROPERTIES = tuple(ORACLES)
SHAPE_KINDS = ("house", "fan", "star")
ROLE_CONFIGS = ("basic", "basic-perturbed", "varied", "varied-perturbed")
CYCLE_LEN = 40
N_SHAPES = 10
DEGREE_CAP = 10


class DatasetError(RuntimeError):
    pass


# Planted shapes ---------------------------------------------------------------

@dataclass(frozen=True)
class ShapeSpec:
    """A template graph attached to the cycle through ``anchor``; ``orbits[i]`` is
    the role of template node ``i`` (orbits of automorphisms fixing the anchor)."""

    kind: str
    n: int
    edges: tuple
    anchor: int
    orbits: tuple

    @property
    def n_roles(self) -> int:
        return max(self.orbits) + 1


def _templates() -> dict:
    square = ((0, 1), (1, 2), (2, 3), (3, 0))
    return {
        # square 0-1-2-3 with the roof 4 over the edge 0-1
        "house": (5, square + ((0, 4), (1, 4)), 4),
        "fan": (6, tuple((0, i) for i in range(1, 6)) + tuple((i, i + 1) for i in range(1, 5)), 0),
        "star": (6, tuple((0, i) for i in range(1, 6)), 0),
    }


def anchored_orbits(n: int, edges, anchor: int) -> tuple:
    """Orbit id per node under the automorphisms that fix ``anchor`` (brute force)."""
    edge_set = {frozenset(e) for e in edges}
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for perm in itertools.permutations(range(n)):
        if perm[anchor] != anchor:
            continue
        if all(frozenset((perm[u], perm[v])) in edge_set for u, v in edges):
            for a, b in enumerate(perm):
                parent[find(a)] = find(b)
    roots: dict[int, int] = {}
    return tuple(roots.setdefault(find(v), len(roots)) for v in range(n))


def shape_spec(kind: str) -> ShapeSpec:
    templates = _templates()
    if kind not in templates:
        raise ValueError(f"unknown shape {kind!r}; expected one of {SHAPE_KINDS}")
    n, edges, anchor = templates[kind]
    return ShapeSpec(kind, n, edges, anchor, anchored_orbits(n, edges, anchor))


@dataclass
class SyntheticNodeDataset:
    graph: Graph
    roles: np.ndarray
    config: str
    seed: int
    kinds: tuple = ()
    role_names: list = field(default_factory=list)

    @property
    def n_classes(self) -> int:
        return len(self.role_names)


def degree_onehot(g: Graph, cap: int = DEGREE_CAP) -> np.ndarray:
    deg = np.minimum(g.degrees(), cap)
    out = np.zeros((g.n, cap + 1))
    out[np.arange(g.n), deg] = 1.0
    return out


def _spread_positions(count: int, length: int, rng: np.random.Generator, jitter: bool) -> list[int]:
    base = [round(j * length / count) % length for j in range(count)]
    if not jitter:
        return base
    taken = set(base)
    out = []
    for p in base:
        taken.discard(p)
        options = [q % length for q in (p - 1, p, p + 1) if q % length not in taken]
        q = options[rng.integers(len(options))] if options else p
        taken.add(q)
        out.append(q)
    return out


def add_random_edges(g: Graph, count: int, rng: np.random.Generator) -> Graph:
    """Add ``count`` edges drawn uniformly among absent non-loop pairs."""
    present = {(u, v) for u, v in g.edges()}
    if count > g.n * (g.n - 1) // 2 - len(present):
        raise GraphError("not enough absent pairs to add")
    added: set = set()
    while len(added) < count:
        u, v = sorted(int(x) for x in rng.choice(g.n, size=2, replace=False))
        if (u, v) not in present:
            added.add((u, v))
    return Graph.from_edges(g.n, sorted(present | added), g.features, g.node_labels, g.graph_label)


def gen_shape_cycle(config: str, seed: int, shape: str | None = None) -> SyntheticNodeDataset:
    """Cycle of 40 nodes with planted shapes; node labels are structural roles.

    Roles: plain cycle node, cycle node carrying an attachment, then the anchored
    orbits of each shape kind present (in the fixed order house, fan, star).
    Features are one-hot node degrees, clipped at ``DEGREE_CAP``.
    """
    if config not in ROLE_CONFIGS:
        raise ValueError(f"unknown config {config!r}; expected one of {ROLE_CONFIGS}")
    rng = np.random.default_rng(seed)
    varied = config.startswith("varied")
    if varied:
        kinds = [k for k in SHAPE_KINDS for _ in range(N_SHAPES)]
        rng.shuffle(kinds)
    else:
        kind = shape if shape is not None else SHAPE_KINDS[rng.integers(len(SHAPE_KINDS))]
        if kind not in SHAPE_KINDS:
            raise ValueError(f"unknown shape {kind!r}")
        kinds = [kind] * N_SHAPES
    present = [k for k in SHAPE_KINDS if k in kinds]
    specs = {k: shape_spec(k) for k in present}
    role_names = ["cycle", "cycle-attach"]
    role_base = {}
    for k in present:
        role_base[k] = len(role_names)
        role_names += [f"{k}-{i}" for i in range(specs[k].n_roles)]

    positions = _spread_positions(len(kinds), CYCLE_LEN, rng, jitter=varied)
    edges = list(cycle_graph(CYCLE_LEN).edges())
    roles = [0] * CYCLE_LEN
    n = CYCLE_LEN
    for kind, pos in zip(kinds, positions):
        spec = specs[kind]
        edges += [(n + u, n + v) for u, v in spec.edges]
        edges.append((pos, n + spec.anchor))
        roles[pos] = 1
        roles += [role_base[kind] + o for o in spec.orbits]
        n += spec.n
    g = Graph.from_edges(n, edges)
    if config.endswith("perturbed"):
        g = add_random_edges(g, round(0.1 * g.m), rng)
    roles = np.array(roles, dtype=np.int64)
    g = g.with_features(degree_onehot(g)).with_labels(node_labels=roles)
    return SyntheticNodeDataset(g, roles, config, seed, tuple(present), role_names)


# Property datasets -------------------------------------------------------------

@dataclass
class PropertyDataset:
    graphs: list
    labels: np.ndarray
    property: str
    seed: int

    def __len__(self) -> int:
        return len(self.graphs)


def _sample_property_graph(prop: str, satisfied: bool, n: int, d: int,
                           rng: np.random.Generator, budget: int) -> Graph:
    oracle = ORACLES[prop]
    for _ in range(budget):
        if prop == "connectivity" and not satisfied:
            half = n // 2
            g = disjoint_union(random_regular(half, d, rng), random_regular(n - half, d, rng))
        elif prop == "bipartiteness" and satisfied:
            g = random_bipartite_regular(n // 2, d, rng)
        else:
            g = random_regular(n, d, rng)
        if oracle(g) == satisfied:
            return permute_graph(g, rng.permutation(g.n))
    raise DatasetError(f"no {'satisfying' if satisfied else 'violating'} graph for {prop} "
                       f"within {budget} draws")


def gen_property_dataset(prop: str, seed: int, n_graphs: int = 800, n: int = 60, d: int = 4,
                         budget: int = 100000) -> PropertyDataset:
    """Balanced set of ``d``-regular graphs labeled 1 when ``prop`` holds.

    Node ids are shuffled so that the construction leaves no trace in the
    numbering; every node gets the same one-dimensional feature.
    """
    if prop not in ORACLES:
        raise ValueError(f"unknown property {prop!r}; expected one of {PROPERTIES}")
    rng = np.random.default_rng(seed)
    half = n_graphs // 2
    labels = np.array([1] * half + [0] * (n_graphs - half), dtype=np.int64)
    rng.shuffle(labels)
    graphs = []
    for y in labels:
        g = _sample_property_graph(prop, bool(y), n, d, rng, budget)
        graphs.append(g.with_labels(graph_label=int(y)))
    audit_property_dataset(PropertyDataset(graphs, labels, prop, seed), d)
    return PropertyDataset(graphs, labels, prop, seed)


def audit_property_dataset(ds: PropertyDataset, d: int = 4) -> None:
    oracle = ORACLES[ds.property]
    for i, (g, y) in enumerate(zip(ds.graphs, ds.labels)):
        if not is_regular(g, d):
            raise DatasetError(f"graph {i} is not {d}-regular")
        if oracle(g) != bool(y):
            raise DatasetError(f"graph {i}: stored label {y} disagrees with the {ds.property} oracle")


# TU format ---------------------------------------------------------------------

@dataclass
class TuDataset:
    name: str
    graphs: list
    labels: np.ndarray
    label_values: list
    node_label_values: list | None = None

    def __len__(self) -> int:
        return len(self.graphs)

    @property
    def n_classes(self) -> int:
        return len(self.label_values)


def _read_ints(path: Path) -> np.ndarray:
    rows = [line.replace(",", " ").split() for line in path.read_text().splitlines() if line.strip()]
    return np.array(rows, dtype=np.int64).reshape(len(rows), -1)


def _find(directory: Path, suffix: str, required: bool = True) -> tuple[str, Path | None]:
    hits = sorted(directory.glob(f"*_{suffix}.txt"))
    if not hits:
        if required:
            raise FileNotFoundError(f"no *_{suffix}.txt in {directory}")
        return "", None
    return hits[0].name[: -len(f"_{suffix}.txt")], hits[0]


def tu_load(directory) -> TuDataset:
    """Parse a TU-layout directory (``DS_A.txt``, ``DS_graph_indicator.txt``,
    ``DS_graph_labels.txt`` and optionally ``DS_node_labels.txt``).

    Node labels become one-hot features over the dataset-wide label set; without
    them each node gets its degree as a single feature. Graph labels are
    remapped to ``0..C-1`` in sorted order of the raw values.
    """
    directory = Path(directory)
    name, a_path = _find(directory, "A")
    _, ind_path = _find(directory, "graph_indicator")
    _, gl_path = _find(directory, "graph_labels")
    _, nl_path = _find(directory, "node_labels", required=False)

    indicator = _read_ints(ind_path)[:, 0]
    n_total = len(indicator)
    graph_ids = np.unique(indicator)
    raw_labels = _read_ints(gl_path)[:, 0]
    if len(raw_labels) != len(graph_ids) or graph_ids[0] != 1 or graph_ids[-1] != len(graph_ids):
        raise GraphError("graph indicator and graph labels disagree on the number of graphs")
    if np.any(np.diff(indicator) < 0):
        raise GraphError("graph indicator must list the nodes of each graph contiguously")
    edges = _read_ints(a_path)
    if edges.size and (edges.min() < 1 or edges.max() > n_total):
        raise GraphError("edge list references a node index outside the graph indicator")
    edges = edges - 1
    pairs = {(int(u), int(v)) for u, v in edges if u != v}
    if any((v, u) not in pairs for u, v in pairs):
        raise GraphError("edge list is not symmetric")
    if np.any(indicator[edges[:, 0]] != indicator[edges[:, 1]]):
        raise GraphError("edge joins nodes of different graphs")

    node_values = None
    if nl_path is not None:
        node_raw = _read_ints(nl_path)[:, 0]
        if len(node_raw) != n_total:
            raise GraphError("node labels and graph indicator disagree on the node count")
        node_values = sorted(set(node_raw.tolist()))
        node_cls = np.searchsorted(node_values, node_raw)

    label_values = sorted(set(raw_labels.tolist()))
    labels = np.searchsorted(label_values, raw_labels).astype(np.int64)
    starts = np.searchsorted(indicator, graph_ids)
    ends = np.append(starts[1:], n_total)
    by_graph: dict[int, list] = {}
    for u, v in pairs:
        if u < v:
            by_graph.setdefault(int(indicator[u]), []).append((u, v))
    graphs = []
    for gid, lo, hi, y in zip(graph_ids, starts, ends, labels):
        local = [(u - lo, v - lo) for u, v in sorted(by_graph.get(int(gid), []))]
        g = Graph.from_edges(int(hi - lo), local, graph_label=int(y))
        if node_values is not None:
            feats = np.zeros((g.n, len(node_values)))
            feats[np.arange(g.n), node_cls[lo:hi]] = 1.0
            g = g.with_features(feats).with_labels(node_labels=node_cls[lo:hi].astype(np.int64))
        else:
            g = g.with_features(g.degrees().astype(np.float64)[:, None])
        graphs.append(g)
    return TuDataset(name, graphs, labels, label_values, node_values)


def tu_write(directory, name: str, graphs, labels, node_labels: bool | None = None,
             sidecar: dict | None = None) -> Path:
    """Write graphs in TU layout; node labels are written when every graph has them.

    ``sidecar`` (config, seed, labels) goes to ``DS_meta.json`` next to the files.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if node_labels is None:
        node_labels = all(g.node_labels is not None for g in graphs)
    a_lines, ind_lines, nl_lines = [], [], []
    offset = 0
    for gid, g in enumerate(graphs, start=1):
        for u in range(g.n):
            for v in g.neighbors(u):
                a_lines.append(f"{u + offset + 1}, {int(v) + offset + 1}")
        ind_lines += [str(gid)] * g.n
        if node_labels:
            nl_lines += [str(int(x)) for x in g.node_labels]
        offset += g.n
    (directory / f"{name}_A.txt").write_text("\n".join(a_lines) + "\n")
    (directory / f"{name}_graph_indicator.txt").write_text("\n".join(ind_lines) + "\n")
    (directory / f"{name}_graph_labels.txt").write_text(
        "\n".join(str(int(y)) for y in labels) + "\n")
    if node_labels:
        (directory / f"{name}_node_labels.txt").write_text("\n".join(nl_lines) + "\n")
    if sidecar is not None:
        (directory / f"{name}_meta.json").write_text(json.dumps(sidecar, indent=1))
    return directory


def read_sidecar(directory) -> dict:
    hits = sorted(Path(directory).glob("*_meta.json"))
    if not hits:
        return {}
    return json.loads(hits[0].read_text())


# Folds -------------------------------------------------------------------------

@dataclass(frozen=True)
class Fold:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


def _stratified_chunks(labels: np.ndarray, idx: np.ndarray, parts: int,
                       rng: np.random.Generator) -> list[list[int]]:
    """Deal the shuffled members of each class round-robin into ``parts`` chunks,
    continuing the deal across classes so chunk sizes differ by at most one."""
    chunks: list[list[int]] = [[] for _ in range(parts)]
    pos = 0
    for c in np.unique(labels[idx]):
        members = idx[labels[idx] == c]
        members = members[rng.permutation(len(members))]
        for x in members:
            chunks[pos % parts].append(int(x))
            pos += 1
    return chunks


def kfold_split(labels, folds: int = 10, val_frac: float = 0.1, seed: int = 0) -> list[Fold]:
    """Stratified folds; ``val_frac`` of each training part is held out (stratified)."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) < folds or folds < 2:
        raise ValueError(f"need at least {max(folds, 2)} items for {folds} folds, got {len(labels)}")
    rng = np.random.default_rng(seed)
    chunks = _stratified_chunks(labels, np.arange(len(labels)), folds, rng)
    out = []
    for f in range(folds):
        test = np.array(sorted(chunks[f]), dtype=np.int64)
        rest = np.array(sorted(x for j in range(folds) if j != f for x in chunks[j]), dtype=np.int64)
        n_val = int(round(val_frac * len(rest)))
        if n_val:
            rest_labels = labels[rest]
            order = []
            for c in np.unique(rest_labels):
                members = rest[rest_labels == c]
                order.append(members[rng.permutation(len(members))])
            # take validation items class by class in proportion to class size
            val = []
            shares = np.array([len(m) for m in order], dtype=np.float64) / len(rest) * n_val
            take = np.floor(shares).astype(int)
            for j in np.argsort(-(shares - take))[: n_val - take.sum()]:
                take[j] += 1
            for m, t in zip(order, take):
                val += m[:t].tolist()
            val = np.array(sorted(val), dtype=np.int64)
            train = np.setdiff1d(rest, val)
        else:
            val = np.zeros(0, dtype=np.int64)
            train = rest
        out.append(Fold(train, val, test))
    return out
