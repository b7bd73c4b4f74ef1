"""Counterexample pairs, indistinguishability audits and an exact multiset encoder."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Hashable, Iterable, Mapping

import numpy as np

from .batch import GraphBatch
from .datasets import ORACLES
from .gnn import GnnModel, GraphModel, readout
from .graph import (Graph, bfs_distances, complete_bipartite, connected_components, cycle_graph,
                    disjoint_union, induced_khop_subgraph, is_bipartite, is_regular,
                    min_component_diameter, path_graph, random_regular, ring_decompose, same_level_edges,
                    shortest_odd_cycle_length, star_graph, triangular_prism)
from .khop import KHopModel
from .nn import BatchNorm

TOL = 1e-6


@dataclass(frozen=True)
class CounterexamplePair:
    name: str
    property: str
    g_pos: Graph
    g_neg: Graph

    def validate(self) -> None:
        a, b = self.g_pos, self.g_neg
        if a.n != b.n or not is_regular(a) or not is_regular(b) or a.degrees()[0] != b.degrees()[0]:
            raise ValueError(f"{self.name}: graphs must be regular with equal size and degree")
        oracle = ORACLES[self.property]
        if not (oracle(a) and not oracle(b)):
            raise ValueError(f"{self.name}: the {self.property} oracle must hold on g_pos only")


def build_counterexamples() -> list[CounterexamplePair]:
    """Regular pairs of equal size and degree that differ in one property."""
    c6 = cycle_graph(6)
    two_triangles = disjoint_union(cycle_graph(3), cycle_graph(3))
    k33 = complete_bipartite(3, 3)
    prism = triangular_prism()
    pairs = [
        CounterexamplePair("cycle6-vs-two-triangles", "connectivity", c6, two_triangles),
        CounterexamplePair("k33-vs-prism", "bipartiteness", k33, prism),
        CounterexamplePair("cycle6-vs-two-triangles/triangles", "triangle-freeness", c6, two_triangles),
        CounterexamplePair("k33-vs-prism/triangles", "triangle-freeness", k33, prism),
    ]
    for p in pairs:
        p.validate()
    return pairs


def control_pair() -> tuple[Graph, Graph]:
    """Path and star on 4 nodes: same size, not regular.

    With uniform features a mean-aggregating baseline maps every node of any
    graph to the same state, so the control is only informative with degree
    features (see ``audit_pair(..., features="degree")``).
    """
    return path_graph(4), star_graph(3)


# Audits --------------------------------------------------------------------------

def randomize_batchnorm(model: GraphModel, rng: np.random.Generator) -> None:
    """Random affine and running statistics so eval-mode normalization is not the identity."""
    for m in model.modules():
        if isinstance(m, BatchNorm):
            dim = len(m.running_mean)
            m.scale.value = rng.uniform(0.5, 2.0, dim)
            m.shift.value = rng.normal(size=dim)
            m.running_mean = rng.normal(size=dim)
            m.running_var = rng.uniform(0.5, 2.0, dim)


def embedding_gap(model: GraphModel, g1: Graph, g2: Graph) -> tuple[float, float]:
    """Largest node-embedding difference across the two graphs and the readout difference.

    The node gap compares every node of both graphs with one reference node, which
    is the right notion for regular pairs where all embeddings should coincide.
    The model runs in eval mode so each graph is embedded independently.
    """
    model.eval()
    h1 = model.node_states(GraphBatch([g1])).value
    h2 = model.node_states(GraphBatch([g2])).value
    both = np.vstack([h1, h2])
    node_gap = float(np.abs(both - both[0]).max())
    r1 = readout(h1, model.readout_mode).value
    r2 = readout(h2, model.readout_mode).value
    return node_gap, float(np.abs(r1 - r2).max())


def regular_pair(g1: Graph, g2: Graph) -> bool:
    return (g1.n == g2.n and is_regular(g1) and is_regular(g2)
            and (g1.n == 0 or g1.degrees()[0] == g2.degrees()[0]))


def _uniform_features(g: Graph) -> Graph:
    return g.with_features(np.ones((g.n, 1)))


def _degree_features(g1: Graph, g2: Graph) -> tuple[Graph, Graph]:
    """One-hot degree over the degrees present in either graph."""
    values = np.union1d(g1.degrees(), g2.degrees())
    return tuple(g.with_features((g.degrees()[:, None] == values[None, :]).astype(np.float64))
                 for g in (g1, g2))


def audit_pair(g1: Graph, g2: Graph, make_model: Callable[[int, np.random.Generator], GraphModel],
               trials: int, seed: int = 0, name: str = "", model_name: str = "",
               features: str = "uniform") -> dict:
    """Embed both graphs under ``trials`` random weight draws.

    ``features`` is ``"uniform"`` (every node gets 1) or ``"degree"`` (one-hot
    degree); ``make_model(in_dim, rng)`` builds a fresh model per draw. A draw
    separates the graphs when the readouts differ by more than ``TOL``.
    ``max_diff`` is the largest node or readout gap seen over all draws.
    """
    if features == "uniform":
        g1, g2 = _uniform_features(g1), _uniform_features(g2)
    elif features == "degree":
        g1, g2 = _degree_features(g1, g2)
    else:
        raise ValueError(f"unknown feature scheme {features!r}")
    in_dim = g1.features.shape[1]
    rng = np.random.default_rng(seed)
    separated = 0
    max_diff = 0.0
    max_readout = 0.0
    for _ in range(trials):
        model = make_model(in_dim, rng)
        randomize_batchnorm(model, rng)
        node_gap, read_gap = embedding_gap(model, g1, g2)
        max_diff = max(max_diff, node_gap, read_gap)
        max_readout = max(max_readout, read_gap)
        separated += read_gap > TOL
    return {"pair": name, "model": model_name, "trials": trials, "max_diff": max_diff,
            "max_readout_diff": max_readout, "separation_rate": separated / trials,
            "separated": separated}


def audit_baseline_indistinguishability(pair: CounterexamplePair, trials: int = 100,
                                        layers: Iterable[int] = (2, 3), hidden: int = 16,
                                        seed: int = 0) -> list[dict]:
    """One record per layer count; raises when a draw tells the two graphs apart."""
    records = []
    for T in layers:
        rec = audit_pair(pair.g_pos, pair.g_neg,
                         lambda d, rng: GnnModel(d, hidden, 2, n_layers=T, rng=rng),
                         trials, seed, pair.name, f"gnn-{T}")
        if rec["max_diff"] >= TOL:
            raise AssertionError(f"{pair.name}: baseline with {T} layers separated the pair "
                                 f"(max diff {rec['max_diff']:.3g})")
        records.append(rec)
    return records


def audit_khop_separation(pair: CounterexamplePair, trials: int = 100, k: int = 2,
                          hidden: int = 16, seed: int = 0) -> dict:
    return audit_pair(pair.g_pos, pair.g_neg,
                      lambda d, rng: KHopModel(d, hidden, 2, k=k, rng=rng),
                      trials, seed, pair.name, f"khop-{k}")


def logits_differ(model: GraphModel, g1: Graph, g2: Graph) -> bool:
    model.eval()
    a = model.forward(GraphBatch([_uniform_features(g1)])).value
    b = model.forward(GraphBatch([_uniform_features(g2)])).value
    return bool(np.abs(a - b).max() > TOL)


def random_regular_pairs(count: int, n: int, d: int, rng: np.random.Generator):
    return [(random_regular(n, d, rng), random_regular(n, d, rng)) for _ in range(count)]


# Exact multiset encoding -------------------------------------------------------------

@dataclass(frozen=True)
class MultisetEncoder:
    """``h_i(c, X) = Z(c) + (r - i)|alphabet| + sum_{x in X} N^(-Z(x))`` in exact rationals.

    ``Z`` must map the alphabet one-to-one onto ``1..|alphabet|``: values outside
    that range let the integer offsets of different ``i`` overlap, and ``Z = 0``
    would put a whole unit into the fractional sum. Multisets must have fewer
    than ``N`` elements so every base-``N`` digit of the sum stays below ``N``.
    """

    alphabet: Mapping[Hashable, int]
    N: int
    r: int = 0

    def __post_init__(self):
        values = sorted(self.alphabet.values())
        if values != list(range(1, len(values) + 1)):
            raise ValueError("alphabet codes must be exactly 1..|alphabet|, one per element")
        if self.N < 1 or self.r < 0:
            raise ValueError("need N >= 1 and r >= 0")

    @property
    def size(self) -> int:
        return len(self.alphabet)

    def code(self, x) -> int:
        try:
            return self.alphabet[x]
        except KeyError:
            raise KeyError(f"element {x!r} is not in the alphabet") from None

    def f(self, c, i: int) -> Fraction:
        return Fraction(self.code(c) + (self.r - i) * self.size)

    def f_prime(self, x) -> Fraction:
        return Fraction(1, self.N ** self.code(x))


def encode_multiset(enc: MultisetEncoder, c, X, i: int | None = None) -> Fraction:
    X = list(X)
    i = enc.r if i is None else i
    if not 0 <= i <= enc.r:
        raise ValueError(f"i must lie in 0..{enc.r}")
    if len(X) >= enc.N:
        raise ValueError(f"multiset of size {len(X)} needs N > {len(X)}, N is {enc.N}")
    return enc.f(c, i) + sum((enc.f_prime(x) for x in X), Fraction(0))


def encoder_domain(alphabet_size: int, N: int, r: int):
    """Every ``(i, c, X)`` with ``|X| < N`` over the alphabet ``0..alphabet_size-1``."""
    letters = range(alphabet_size)
    for i in range(r + 1):
        for c in letters:
            for size in range(N):
                for X in itertools.combinations_with_replacement(letters, size):
                    yield i, c, X


def find_collisions(encode: Callable, domain: Iterable) -> list[tuple]:
    """Pairs of distinct inputs mapped to the same value by ``encode``."""
    seen: dict = {}
    clashes = []
    for item in domain:
        value = encode(*item)
        if value in seen:
            clashes.append((seen[value], item))
        else:
            seen[value] = item
    return clashes


def exhaustive_injectivity(max_alphabet: int = 3, max_N: int = 4, max_r: int = 3) -> dict:
    """Collision count over every encoder with the given bounds."""
    checked = 0
    collisions = []
    for size in range(1, max_alphabet + 1):
        for N in range(1, max_N + 1):
            for r in range(max_r + 1):
                enc = MultisetEncoder({x: x + 1 for x in range(size)}, N, r)
                domain = list(encoder_domain(size, N, r))
                checked += len(domain)
                found = find_collisions(lambda i, c, X: encode_multiset(enc, c, X, i), domain)
                collisions += [(size, N, r, a, b) for a, b in found]
    return {"checked": checked, "collisions": len(collisions), "examples": collisions[:5]}


# Structural witnesses --------------------------------------------------------------------

def ring_level_witness(g: Graph, v: int, k: int) -> dict:
    """Ring-level facts about the k-hop neighborhood of ``v`` that separate the
    property classes: same-level edges (odd cycles, triangles at level 1) and the
    level from which the rings are empty (bounded by the component diameter)."""
    rd = ring_decompose(g, v, k)
    sizes = [len(level) for level in rd.levels] + [0] * (k + 1 - len(rd.levels))
    comp = next(c for c in connected_components(g) if v in c)
    ecc = max(bfs_distances(g, v).values())
    edges = same_level_edges(rd)
    return {
        "root": v,
        "k": k,
        "level_sizes": sizes,
        "empty_from": len(rd.levels) if len(rd.levels) <= k else None,
        "eccentricity": ecc,
        "component_size": len(comp),
        "min_component_diameter": min_component_diameter(g),
        "same_level_edges": edges,
        "triangle_at_level1": any(level == 1 for level, _, _ in edges),
        "odd_cycle_length": shortest_odd_cycle_length(g),
        "khop_bipartite": is_bipartite(induced_khop_subgraph(g, v, k)),
    }


def small_connected_graphs(max_n: int = 7) -> list[Graph]:
    """Every connected graph on 1..max_n nodes up to isomorphism (max_n <= 7)."""
    import networkx as nx

    if max_n > 7:
        raise ValueError("the graph atlas only covers graphs with up to 7 nodes")
    out = []
    for h in nx.graph_atlas_g():
        if 0 < h.number_of_nodes() <= max_n and nx.is_connected(h):
            out.append(Graph.from_edges(h.number_of_nodes(), h.edges()))
    return out


def odd_cycle_level_audit(graphs: Iterable[Graph]) -> dict:
    """Compare the same-level-edge test with bipartiteness of the k-hop subgraph
    for every root and every radius up to ``n - 1``."""
    checks = 0
    bad = []
    for gi, g in enumerate(graphs):
        for v in range(g.n):
            for k in range(1, max(g.n, 2)):
                witness = bool(same_level_edges(ring_decompose(g, v, k)))
                if witness == is_bipartite(induced_khop_subgraph(g, v, k)):
                    bad.append((gi, v, k))
                checks += 1
    return {"checks": checks, "disagreements": len(bad), "examples": bad[:5]}
