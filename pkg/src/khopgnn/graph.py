"""Undirected graphs, k-hop ring decompositions and exact property oracles."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class GraphError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Graph:
    """Immutable simple undirected graph in sorted CSR form.

    ``indices[indptr[v]:indptr[v + 1]]`` holds the neighbors of ``v`` in
    ascending order. ``features`` has one row per node.
    """

    n: int
    indptr: np.ndarray
    indices: np.ndarray
    features: np.ndarray
    node_labels: np.ndarray | None = None
    graph_label: int | None = None

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] != self.n:
            raise GraphError(
                f"feature matrix must have {self.n} rows, got shape {self.features.shape}")
        if self.node_labels is not None and len(self.node_labels) != self.n:
            raise GraphError("node_labels length must equal n")
        for arr in (self.indptr, self.indices, self.features):
            arr.flags.writeable = False
        if self.node_labels is not None:
            self.node_labels.flags.writeable = False

    @classmethod
    def from_edges(cls, n: int, edges: Iterable[tuple[int, int]], features=None,
                   node_labels=None, graph_label=None) -> "Graph":
        """Build a graph, rejecting self-loops, duplicates and out-of-range ids."""
        n = int(n)
        if n < 0:
            raise GraphError("node count must be non-negative")
        adj: list[set[int]] = [set() for _ in range(n)]
        for u, v in edges:
            u, v = int(u), int(v)
            if not (0 <= u < n and 0 <= v < n):
                raise GraphError(f"edge ({u}, {v}) out of range for n={n}")
            if u == v:
                raise GraphError(f"self-loop at node {u}")
            if v in adj[u]:
                raise GraphError(f"duplicate edge ({u}, {v})")
            adj[u].add(v)
            adj[v].add(u)
        return cls.from_adjacency(adj, features, node_labels, graph_label)

    @classmethod
    def from_adjacency(cls, adj: Sequence[Iterable[int]], features=None,
                       node_labels=None, graph_label=None) -> "Graph":
        n = len(adj)
        lists = [sorted(int(u) for u in nbrs) for nbrs in adj]
        for v, nbrs in enumerate(lists):
            for u in nbrs:
                if u == v or not 0 <= u < n:
                    raise GraphError(f"invalid neighbor {u} of node {v}")
            if len(set(nbrs)) != len(nbrs):
                raise GraphError(f"duplicate neighbor of node {v}")
        lookup = [set(nbrs) for nbrs in lists]
        for v, nbrs in enumerate(lists):
            for u in nbrs:
                if v not in lookup[u]:
                    raise GraphError(f"asymmetric adjacency between {v} and {u}")
        indptr = np.zeros(n + 1, dtype=np.int64)
        indptr[1:] = np.cumsum([len(x) for x in lists])
        indices = np.fromiter((u for nbrs in lists for u in nbrs), dtype=np.int64,
                              count=int(indptr[-1]))
        if features is None:
            features = np.ones((n, 1))
        features = np.array(features, dtype=np.float64)
        if features.ndim == 1:
            features = features[:, None]
        if node_labels is not None:
            node_labels = np.asarray(node_labels, dtype=np.int64).copy()
        return cls(n, indptr, indices, features, node_labels,
                   None if graph_label is None else int(graph_label))

    @property
    def m(self) -> int:
        return int(self.indptr[-1]) // 2

    def neighbors(self, v: int) -> np.ndarray:
        return self.indices[self.indptr[v]:self.indptr[v + 1]]

    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def edges(self) -> list[tuple[int, int]]:
        """Edge list with ``u < v``, sorted."""
        return [(v, int(u)) for v in range(self.n) for u in self.neighbors(v) if v < u]

    def edge_array(self) -> np.ndarray:
        src = np.repeat(np.arange(self.n), self.degrees())
        keep = src < self.indices
        return np.stack([src[keep], self.indices[keep]], axis=1)

    def has_edge(self, u: int, v: int) -> bool:
        nbrs = self.neighbors(u)
        i = np.searchsorted(nbrs, v)
        return bool(i < len(nbrs) and nbrs[i] == v)

    def with_features(self, features) -> "Graph":
        return Graph(self.n, self.indptr.copy(), self.indices.copy(),
                     np.array(features, dtype=np.float64).reshape(self.n, -1),
                     None if self.node_labels is None else self.node_labels.copy(),
                     self.graph_label)

    def with_labels(self, node_labels=None, graph_label=None) -> "Graph":
        return Graph(self.n, self.indptr.copy(), self.indices.copy(), self.features.copy(),
                     None if node_labels is None else np.asarray(node_labels, dtype=np.int64),
                     graph_label)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Graph):
            return NotImplemented
        same_labels = (self.node_labels is None) == (other.node_labels is None) and (
            self.node_labels is None or np.array_equal(self.node_labels, other.node_labels))
        return (self.n == other.n and np.array_equal(self.indptr, other.indptr)
                and np.array_equal(self.indices, other.indices)
                and np.array_equal(self.features, other.features)
                and same_labels and self.graph_label == other.graph_label)

    __hash__ = None

    def __repr__(self) -> str:
        return f"Graph(n={self.n}, m={self.m}, d={self.features.shape[1]})"


@dataclass(frozen=True)
class RingDecomposition:
    """Levels of the k-hop neighborhood of ``root`` with across/within neighbor sets.

    ``across[u]`` holds the neighbors of ``u`` one level farther from the root,
    ``within[u]`` the neighbors on the same level.
    """

    root: int
    k: int
    levels: tuple[tuple[int, ...], ...]
    level_of: dict[int, int] = field(repr=False)
    across: dict[int, tuple[int, ...]] = field(repr=False)
    within: dict[int, tuple[int, ...]] = field(repr=False)

    @property
    def nodes(self) -> list[int]:
        return [u for level in self.levels for u in level]


def _check_node(g: Graph, v: int) -> None:
    if not (isinstance(v, (int, np.integer)) and 0 <= v < g.n):
        raise GraphError(f"invalid node id {v!r} for graph with {g.n} nodes")


def bfs_distances(g: Graph, source: int, limit: int | None = None) -> dict[int, int]:
    """Hop distances from ``source`` to every node within ``limit`` hops."""
    dist = {source: 0}
    queue = deque([source])
    while queue:
        u = queue.popleft()
        d = dist[u]
        if limit is not None and d >= limit:
            continue
        for w in g.neighbors(u):
            w = int(w)
            if w not in dist:
                dist[w] = d + 1
                queue.append(w)
    return dist


def ring_decompose(g: Graph, v: int, k: int) -> RingDecomposition:
    _check_node(g, v)
    if k < 1:
        raise GraphError("radius k must be at least 1")
    v = int(v)
    dist = bfs_distances(g, v, k)
    levels: list[list[int]] = [[] for _ in range(k + 1)]
    for u in sorted(dist):
        levels[dist[u]].append(u)
    while len(levels) > 1 and not levels[-1]:
        levels.pop()
    across: dict[int, tuple[int, ...]] = {}
    within: dict[int, tuple[int, ...]] = {}
    for u, d in dist.items():
        b, w = [], []
        for x in g.neighbors(u):
            dx = dist.get(int(x))
            if dx == d + 1:
                b.append(int(x))
            elif dx == d:
                w.append(int(x))
        across[u] = tuple(b)
        within[u] = tuple(w)
    return RingDecomposition(v, k, tuple(tuple(level) for level in levels), dist, across, within)


def induced_subgraph(g: Graph, nodes: Sequence[int]) -> Graph:
    """Subgraph induced by ``nodes``; node ``nodes[i]`` becomes node ``i``."""
    index = {int(u): i for i, u in enumerate(nodes)}
    adj = [[index[int(w)] for w in g.neighbors(u) if int(w) in index] for u in nodes]
    feats = g.features[np.asarray(nodes, dtype=np.int64)] if len(nodes) else np.ones((0, 1))
    labels = None if g.node_labels is None else g.node_labels[np.asarray(nodes, dtype=np.int64)]
    return Graph.from_adjacency(adj, feats, labels)


def induced_khop_subgraph(g: Graph, v: int, k: int) -> Graph:
    """The neighborhood subgraph of radius ``k``; the root becomes node 0.

    Remaining nodes are ordered by (distance, id).
    """
    rd = ring_decompose(g, v, k)
    return induced_subgraph(g, rd.nodes)


def connected_components(g: Graph) -> list[list[int]]:
    seen = np.zeros(g.n, dtype=bool)
    comps = []
    for s in range(g.n):
        if seen[s]:
            continue
        comp = sorted(bfs_distances(g, s))
        seen[comp] = True
        comps.append(comp)
    return comps


def is_connected(g: Graph) -> bool:
    if g.n == 0:
        return True
    return len(bfs_distances(g, 0)) == g.n


def two_coloring(g: Graph) -> np.ndarray | None:
    """BFS 2-coloring (0/1 per node), or None when an odd cycle exists."""
    color = np.full(g.n, -1, dtype=np.int64)
    for s in range(g.n):
        if color[s] >= 0:
            continue
        color[s] = 0
        queue = deque([s])
        while queue:
            u = queue.popleft()
            for w in g.neighbors(u):
                if color[w] < 0:
                    color[w] = 1 - color[u]
                    queue.append(int(w))
                elif color[w] == color[u]:
                    return None
    return color


def is_bipartite(g: Graph) -> bool:
    return two_coloring(g) is not None


def triangles(g: Graph) -> list[tuple[int, int, int]]:
    """All triangles ``(a, b, c)`` with ``a < b < c`` via sorted-adjacency intersection."""
    found = []
    for a in range(g.n):
        na = g.neighbors(a)
        higher = na[na > a]
        for b in higher:
            nb = g.neighbors(int(b))
            common = np.intersect1d(higher, nb[nb > b], assume_unique=True)
            found.extend((a, int(b), int(c)) for c in common)
    return found


def is_triangle_free(g: Graph) -> bool:
    for a in range(g.n):
        na = g.neighbors(a)
        higher = na[na > a]
        for b in higher:
            nb = g.neighbors(int(b))
            if np.intersect1d(higher, nb[nb > b], assume_unique=True).size:
                return False
    return True


def same_level_edge_exists(rd: RingDecomposition) -> bool:
    return any(rd.within[u] for u in rd.level_of)


def same_level_edges(rd: RingDecomposition) -> list[tuple[int, int, int]]:
    """``(level, u, w)`` for every same-level edge with ``u < w``."""
    return sorted((rd.level_of[u], u, w) for u in rd.level_of for w in rd.within[u] if u < w)


def eccentricities(g: Graph) -> np.ndarray:
    """Eccentricity of each node inside its own connected component."""
    return np.array([max(bfs_distances(g, v).values()) for v in range(g.n)], dtype=np.int64)


def min_component_diameter(g: Graph) -> int:
    if g.n == 0:
        raise GraphError("empty graph has no components")
    ecc = eccentricities(g)
    return min(int(ecc[comp].max()) for comp in connected_components(g))


def shortest_odd_cycle_length(g: Graph) -> int | None:
    """Length of the shortest odd cycle, or None for bipartite graphs.

    For each source, an edge between two nodes at equal BFS depth ``d`` closes an
    odd closed walk of length ``2d + 1``; the minimum over all sources is the
    shortest odd cycle.
    """
    best = None
    for s in range(g.n):
        dist = bfs_distances(g, s)
        for u, du in dist.items():
            for w in g.neighbors(u):
                if dist.get(int(w)) == du:
                    cand = 2 * du + 1
                    if best is None or cand < best:
                        best = cand
    return best


def permute_graph(g: Graph, perm: Sequence[int]) -> Graph:
    """Relabel node ``v`` as ``perm[v]``, moving features and labels along."""
    perm = np.asarray(perm, dtype=np.int64)
    if perm.shape != (g.n,) or not np.array_equal(np.sort(perm), np.arange(g.n)):
        raise GraphError("perm must be a bijection on node ids")
    inv = np.empty_like(perm)
    inv[perm] = np.arange(g.n)
    adj = [perm[g.neighbors(int(inv[i]))] for i in range(g.n)]
    feats = g.features[inv]
    labels = None if g.node_labels is None else g.node_labels[inv]
    return Graph.from_adjacency(adj, feats, labels, g.graph_label)


def disjoint_union(*graphs: Graph) -> Graph:
    adj: list[list[int]] = []
    offset = 0
    for h in graphs:
        adj.extend([list(h.neighbors(v) + offset) for v in range(h.n)])
        offset += h.n
    feats = np.vstack([h.features for h in graphs]) if graphs else np.ones((0, 1))
    return Graph.from_adjacency(adj, feats)


def is_regular(g: Graph, d: int | None = None) -> bool:
    deg = g.degrees()
    if g.n == 0:
        return True
    return bool(np.all(deg == (deg[0] if d is None else d)))


def _pairs_simple(pairs: np.ndarray, n: int) -> bool:
    a, b = pairs[:, 0], pairs[:, 1]
    if np.any(a == b):
        return False
    keys = np.minimum(a, b) * n + np.maximum(a, b)
    return np.unique(keys).size == keys.size


def random_regular(n: int, d: int, rng: np.random.Generator, max_tries: int = 100_000) -> Graph:
    """Uniform simple d-regular graph from the pairing model.

    A uniformly random perfect matching of the ``n * d`` stubs is drawn and the
    whole pairing is rejected when it contains a self-loop or a repeated edge,
    so accepted graphs are uniform over simple d-regular graphs.
    """
    if d < 0 or d >= n or (n * d) % 2:
        raise GraphError(f"no simple {d}-regular graph on {n} nodes")
    stubs = np.repeat(np.arange(n, dtype=np.int64), d)
    for _ in range(max_tries):
        pairs = rng.permutation(stubs).reshape(-1, 2)
        if _pairs_simple(pairs, n):
            return Graph.from_edges(n, pairs)
    raise GraphError(f"rejection budget of {max_tries} pairings exhausted")


def random_bipartite_regular(n_side: int, d: int, rng: np.random.Generator,
                             max_tries: int = 100_000) -> Graph:
    """Uniform simple d-regular bipartite graph on ``2 * n_side`` nodes.

    Nodes ``0..n_side-1`` form one side. Uses the bipartite pairing model with
    rejection of repeated edges.
    """
    if d < 0 or d > n_side:
        raise GraphError(f"no simple {d}-regular bipartite graph with sides of {n_side}")
    left = np.repeat(np.arange(n_side, dtype=np.int64), d)
    for _ in range(max_tries):
        right = rng.permutation(left) + n_side
        pairs = np.stack([left, right], axis=1)
        if _pairs_simple(pairs, 2 * n_side):
            return Graph.from_edges(2 * n_side, pairs)
    raise GraphError(f"rejection budget of {max_tries} pairings exhausted")


def cycle_graph(n: int) -> Graph:
    return Graph.from_edges(n, [(i, (i + 1) % n) for i in range(n)])


def path_graph(n: int) -> Graph:
    return Graph.from_edges(n, [(i, i + 1) for i in range(n - 1)])


def complete_graph(n: int) -> Graph:
    return Graph.from_edges(n, [(i, j) for i in range(n) for j in range(i + 1, n)])


def complete_bipartite(a: int, b: int) -> Graph:
    return Graph.from_edges(a + b, [(i, a + j) for i in range(a) for j in range(b)])


def star_graph(leaves: int) -> Graph:
    return Graph.from_edges(leaves + 1, [(0, i) for i in range(1, leaves + 1)])


def triangular_prism() -> Graph:
    return Graph.from_edges(6, [(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5),
                                (0, 3), (1, 4), (2, 5)])


def write_edge_list(g: Graph, path) -> None:
    with open(path, "w") as fh:
        for u, v in g.edges():
            fh.write(f"{u} {v}\n")


def read_edge_list(path, n: int | None = None) -> Graph:
    edges = []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if len(parts) != 2:
                raise GraphError(f"malformed edge line: {line.rstrip()!r}")
            edges.append((int(parts[0]), int(parts[1])))
    if n is None:
        n = 1 + max((max(e) for e in edges), default=-1)
    return Graph.from_edges(n, edges)
