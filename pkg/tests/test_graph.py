import itertools

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from khopgnn.graph import (Graph, GraphError, bfs_distances, complete_bipartite, complete_graph,
                           cycle_graph, disjoint_union, induced_khop_subgraph, is_bipartite,
                           is_connected, is_regular, is_triangle_free, min_component_diameter,
                           path_graph, permute_graph, random_bipartite_regular, random_regular,
                           read_edge_list, ring_decompose, same_level_edge_exists,
                           shortest_odd_cycle_length, triangular_prism, write_edge_list)


def to_nx(g: Graph) -> nx.Graph:
    h = nx.Graph()
    h.add_nodes_from(range(g.n))
    h.add_edges_from(g.edges())
    return h


@st.composite
def graphs(draw, max_n=9):
    n = draw(st.integers(1, max_n))
    pairs = list(itertools.combinations(range(n), 2))
    mask = draw(st.lists(st.booleans(), min_size=len(pairs), max_size=len(pairs)))
    return Graph.from_edges(n, [p for p, keep in zip(pairs, mask) if keep])


# construction --------------------------------------------------------------------

def test_rejects_self_loops_duplicates_and_bad_ids():
    with pytest.raises(GraphError):
        Graph.from_edges(3, [(0, 0)])
    with pytest.raises(GraphError):
        Graph.from_edges(3, [(0, 1), (1, 0)])
    with pytest.raises(GraphError):
        Graph.from_edges(3, [(0, 3)])
    with pytest.raises(GraphError):
        Graph.from_adjacency([[1], []])


def test_neighbors_sorted_and_symmetric():
    g = Graph.from_edges(4, [(3, 0), (2, 0), (1, 0)])
    assert g.neighbors(0).tolist() == [1, 2, 3]
    assert all(g.has_edge(v, 0) for v in (1, 2, 3))
    assert g.m == 3
    assert g.features.shape == (4, 1)


def test_feature_rows_must_match():
    with pytest.raises(GraphError):
        Graph.from_edges(3, [(0, 1)], features=np.ones((2, 1)))


def test_arrays_are_read_only():
    g = cycle_graph(4)
    with pytest.raises(ValueError):
        g.indices[0] = 3


# ring decomposition ------------------------------------------------------------------

def test_ring_decompose_fig3(fig3):
    rd = ring_decompose(fig3, 0, 2)
    assert [set(level) for level in rd.levels] == [{0}, {1, 2}, {3, 4}]
    assert set(rd.across[1]) == {3, 4} and set(rd.across[2]) == set()
    assert set(rd.within[1]) == {2} and set(rd.within[2]) == {1}
    assert all(not rd.across[u] for u in (3, 4))


def test_ring_decompose_isolated_node():
    g = Graph.from_edges(1, [])
    for k in (1, 2, 5):
        rd = ring_decompose(g, 0, k)
        assert rd.levels == ((0,),)
        assert not rd.across[0] and not rd.within[0]


def test_ring_decompose_cycle6_k3():
    rd = ring_decompose(cycle_graph(6), 2, 3)
    assert [len(level) for level in rd.levels] == [1, 2, 2, 1]
    assert all(not rd.within[u] for u in rd.nodes)


def test_ring_decompose_errors(fig3):
    with pytest.raises(GraphError):
        ring_decompose(fig3, 5, 1)
    with pytest.raises(GraphError):
        ring_decompose(fig3, 0, 0)


@settings(max_examples=60, deadline=None)
@given(graphs(), st.integers(1, 4), st.data())
def test_ring_levels_match_shortest_paths(g, k, data):
    v = data.draw(st.integers(0, g.n - 1))
    rd = ring_decompose(g, v, k)
    dist = nx.single_source_shortest_path_length(to_nx(g), v, cutoff=k)
    for d, level in enumerate(rd.levels):
        assert set(level) == {u for u, du in dist.items() if du == d}
    for u, d in rd.level_of.items():
        inside = [w for w in g.neighbors(u) if w in rd.level_of]
        assert all(abs(rd.level_of[w] - d) <= 1 for w in inside)
        assert set(rd.across[u]) == {w for w in inside if rd.level_of[w] == d + 1}
        assert set(rd.within[u]) == {w for w in inside if rd.level_of[w] == d}
        if d == k:
            assert not rd.across[u]


def test_bfs_distances_limit():
    assert bfs_distances(path_graph(5), 0, limit=2) == {0: 0, 1: 1, 2: 2}


# induced subgraphs -------------------------------------------------------------------

def test_induced_khop_fig3_triangle(fig3):
    sub = induced_khop_subgraph(fig3, 0, 1)
    assert sub.n == 3 and sub.m == 3


def test_induced_khop_k4_and_c6():
    assert induced_khop_subgraph(complete_graph(4), 2, 1).m == 6
    sub = induced_khop_subgraph(cycle_graph(6), 0, 2)
    assert nx.is_isomorphic(to_nx(sub), nx.path_graph(5))
    assert sub.degrees()[0] == 2  # root sits in the middle of the path


# property oracles ----------------------------------------------------------------------

def two_triangles():
    return disjoint_union(cycle_graph(3), cycle_graph(3))


def test_oracles_on_counterexample_graphs():
    g1, g2 = two_triangles(), cycle_graph(6)
    assert (is_connected(g1), is_triangle_free(g1), is_bipartite(g1)) == (False, False, False)
    assert (is_connected(g2), is_triangle_free(g2), is_bipartite(g2)) == (True, True, True)
    k33, prism = complete_bipartite(3, 3), triangular_prism()
    assert is_bipartite(k33) and is_triangle_free(k33)
    assert not is_bipartite(prism) and not is_triangle_free(prism)


def test_k33_and_prism_are_the_cubic_graphs_on_six_nodes():
    cubic = [h for h in nx.graph_atlas_g() if h.number_of_nodes() == 6
             and all(d == 3 for _, d in h.degree())]
    assert len(cubic) == 2
    ours = [to_nx(complete_bipartite(3, 3)), to_nx(triangular_prism())]
    assert all(any(nx.is_isomorphic(a, b) for b in ours) for a in cubic)


@settings(max_examples=80, deadline=None)
@given(graphs())
def test_oracles_agree_with_networkx(g):
    h = to_nx(g)
    assert is_connected(g) == nx.is_connected(h)
    assert is_bipartite(g) == nx.is_bipartite(h)
    assert is_triangle_free(g) == (sum(nx.triangles(h).values()) == 0)


@settings(max_examples=40, deadline=None)
@given(graphs(max_n=8), st.data())
def test_oracles_invariant_under_permutation(g, data):
    perm = data.draw(st.permutations(range(g.n)))
    p = permute_graph(g, perm)
    assert nx.is_isomorphic(to_nx(g), to_nx(p))
    for oracle in (is_connected, is_bipartite, is_triangle_free):
        assert oracle(p) == oracle(g)


def test_same_level_edges():
    assert all(same_level_edge_exists(ring_decompose(triangular_prism(), v, 1)) for v in range(6))
    assert not any(same_level_edge_exists(ring_decompose(cycle_graph(6), v, 3)) for v in range(6))
    edge = Graph.from_edges(2, [(0, 1)])
    assert not same_level_edge_exists(ring_decompose(edge, 0, 1))


def test_diameter_and_odd_cycle_examples():
    assert (min_component_diameter(two_triangles()), shortest_odd_cycle_length(two_triangles())) == (1, 3)
    assert (min_component_diameter(cycle_graph(6)), shortest_odd_cycle_length(cycle_graph(6))) == (3, None)
    assert (min_component_diameter(triangular_prism()), shortest_odd_cycle_length(triangular_prism())) == (2, 3)


def brute_odd_girth(h: nx.Graph):
    best = None
    for cycle in nx.simple_cycles(h.to_directed()):
        if len(cycle) > 2 and len(cycle) % 2 == 1:
            best = len(cycle) if best is None else min(best, len(cycle))
    return best


@settings(max_examples=40, deadline=None)
@given(graphs(max_n=7))
def test_odd_cycle_and_diameter_against_brute_force(g):
    h = to_nx(g)
    assert shortest_odd_cycle_length(g) == brute_odd_girth(h)
    diam = min(nx.diameter(h.subgraph(c)) for c in nx.connected_components(h))
    assert min_component_diameter(g) == diam


# permutations --------------------------------------------------------------------------

def test_permute_graph_identity_and_reversal():
    g = cycle_graph(6).with_features(np.arange(6.0)[:, None]).with_labels(node_labels=np.arange(6))
    assert permute_graph(g, range(6)) == g
    rev = permute_graph(g, list(range(5, -1, -1)))
    assert nx.is_isomorphic(to_nx(rev), nx.cycle_graph(6))
    assert rev.features[5, 0] == 0.0 and rev.node_labels[0] == 5


def test_permute_graph_rejects_non_bijection():
    with pytest.raises(GraphError):
        permute_graph(cycle_graph(3), [0, 0, 1])


# generators ------------------------------------------------------------------------------

def test_random_regular_examples(rng):
    g = random_regular(6, 2, rng)
    assert is_regular(g, 2)
    for _ in range(20):
        g = random_regular(60, 4, rng)
        assert is_regular(g, 4) and g.m == 120
    with pytest.raises(GraphError):
        random_regular(3, 3, rng)
    with pytest.raises(GraphError):
        random_regular(5, 3, rng)


def test_random_bipartite_regular(rng):
    for _ in range(10):
        g = random_bipartite_regular(30, 4, rng)
        assert is_regular(g, 4) and is_bipartite(g) and g.n == 60
        assert all(v >= 30 for v in g.neighbors(0))


def test_edge_list_round_trip(tmp_path, rng):
    g = random_regular(12, 3, rng)
    write_edge_list(g, tmp_path / "g.txt")
    assert read_edge_list(tmp_path / "g.txt", n=12) == g
