import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from svcdep.graph import build_graph, load_graph, sample_neighborhood, write_edges

ids = st.sampled_from(list("ABCDEFGHIJ"))
edge_lists = st.lists(st.tuples(ids, ids), min_size=1, max_size=30)


def test_minimal_symmetrized_pair():
    g = build_graph([("A", "B")], "symmetrize")
    assert g.node_ids == ("A", "B")
    assert g.adjacency == ((0, 1), (0, 1))
    assert list(g.degree) == [2, 2]


def test_self_loop_collapses():
    g = build_graph([("A", "A")])
    assert g.adjacency == ((0,),)
    assert g.degree[0] == 1
    assert g.norm_coeff(0, 0) == 1.0


def test_chain_normalization():
    g = build_graph([("A", "B"), ("B", "C")], "symmetrize")
    assert g.degree[g.index("B")] == 3
    # hand value: sqrt(2 * 3)
    assert g.norm_coeff(0, 1) == pytest.approx(2.449489742783178, abs=1e-12)


def test_directed_mode_keeps_direction():
    g = build_graph([("A", "B")], "directed")
    assert g.adjacency == ((0, 1), (1,))


def test_duplicates_collapsed_and_explicit_nodes():
    g = build_graph([("B", "A"), ("B", "A"), ("A", "B")], nodes=["C"])
    assert g.node_ids == ("A", "B", "C")
    assert g.adjacency[2] == (2,)
    assert g.isolated_nodes() == ["C"]


def test_empty_graph_rejected():
    with pytest.raises(ValueError, match="empty graph"):
        build_graph([])


def test_empty_endpoint_rejected():
    with pytest.raises(ValueError):
        build_graph([("A", "")])


@given(edge_lists, st.sampled_from(["directed", "symmetrize"]))
def test_structural_invariants(edges, mode):
    g = build_graph(edges, mode)
    for i, nbrs in enumerate(g.adjacency):
        assert nbrs.count(i) == 1
        assert list(nbrs) == sorted(set(nbrs))
        for j in nbrs:
            c = g.norm_coeff(i, j)
            assert c > 0
            assert c == math.sqrt(g.degree[i] * g.degree[j])
            if j in g.adjacency[i] and i in g.adjacency[j]:
                assert c == g.norm_coeff(j, i)


@given(edge_lists, st.sampled_from(["directed", "symmetrize"]))
def test_rebuild_from_dump_is_identical(edges, mode):
    g = build_graph(edges, mode)
    again = build_graph(g.edges(), mode, nodes=g.node_ids)
    assert again == g


def test_edge_file_round_trip(tmp_path):
    g = build_graph([("gw", "api"), ("api", "db"), ("api", "db"), ("db", "db")])
    path = tmp_path / "edges.csv"
    write_edges(path, g.edges())
    text = path.read_text().splitlines()
    assert text[0] == "src,dst"
    assert text[1:] == sorted(text[1:])
    assert load_graph(path) == g


def _star(n_leaves):
    return build_graph([("hub", f"leaf{k:02d}") for k in range(n_leaves)])


def test_sample_under_cap_returns_full_list():
    g = build_graph([("A", "B")])
    assert sample_neighborhood(g, 0, 5, seed=3) == [0, 1]


def test_sample_over_cap_keeps_self_and_size():
    g = _star(20)
    hub = g.index("hub")
    assert g.degree[hub] == 21
    out = sample_neighborhood(g, hub, 10, seed=42)
    assert len(out) == 10
    assert hub in out
    assert set(out) <= set(g.adjacency[hub])
    assert out == sample_neighborhood(g, hub, 10, seed=42)


def test_sample_depends_on_seed():
    g = _star(20)
    hub = g.index("hub")
    draws = {tuple(sample_neighborhood(g, hub, 5, seed=s)) for s in range(10)}
    assert len(draws) > 1


@settings(max_examples=50)
@given(st.integers(1, 25), st.integers(0, 2**63 - 1))
def test_sample_is_subset(cap, seed):
    g = _star(20)
    for node in range(g.num_nodes):
        out = sample_neighborhood(g, node, cap, seed)
        assert set(out) <= set(g.adjacency[node])
        assert node in out
        assert len(out) == min(cap, g.degree[node])


def test_sample_errors():
    g = _star(3)
    with pytest.raises(IndexError):
        sample_neighborhood(g, 99, 2, 0)
    with pytest.raises(ValueError):
        sample_neighborhood(g, 0, 0, 0)


def test_norm_matrix_matches_coefficients():
    g = build_graph([("A", "B"), ("B", "C")])
    m = g.norm_matrix()
    for i, nbrs in enumerate(g.adjacency):
        for j in range(g.num_nodes):
            expected = 1.0 / g.norm_coeff(i, j) if j in nbrs else 0.0
            assert m[i, j] == expected
    np.testing.assert_array_equal(m, m.T)
