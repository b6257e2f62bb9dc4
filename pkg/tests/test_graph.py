import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bym2.graph import (Graph, GraphFormatError, besag_precision, connected_components,
                        parse_graph, read_graph, serialize_graph, write_graph)
from bym2.linalg import eigenvalues_sym

from conftest import random_connected_graph


def test_single_region():
    g = parse_graph("1\n0 0\n")
    assert g.n_regions == 1
    assert g.neighbours == ((),)
    assert g.n_components == 1


def test_path_of_three():
    g = parse_graph("3\n0 1 1\n1 2 0 2\n2 1 1\n")
    assert g.neighbours[1] == (0, 2)
    assert g.n_components == 1
    assert g.metadata["index_base"] == 0


def test_one_based_detected():
    g = parse_graph("3\n1 1 2\n2 2 1 3\n3 1 2\n")
    assert g.metadata["index_base"] == 1
    assert g == parse_graph("3\n0 1 1\n1 2 0 2\n2 1 1\n")


def test_bytes_and_free_layout():
    # records may span lines; only whitespace matters
    g = parse_graph(b"3 0 1 1 1 2\n0 2\n2 1 1")
    assert g.neighbours == ((1,), (0, 2), (1,))


def test_asymmetric_entries_repaired():
    g = parse_graph("3\n0 1 1\n1 1 2\n2 0\n")
    assert g.neighbours == ((1,), (0, 2), (1,))
    assert g.metadata["asymmetric_entries"] == 2


@pytest.mark.parametrize("text, line", [
    ("3\n0 1 1\n1 x 0\n2 0\n", 3),
    ("3\n0 1 1\n0 1 1\n2 0\n", 3),
    ("3\n0 1 5\n1 0\n2 0\n", 2),
    ("3\n0 0\n1 0\n", 1),
    ("3\n0 2 1\n", 2),
    ("", 1),
])
def test_malformed_reports_line(text, line):
    with pytest.raises(GraphFormatError) as info:
        parse_graph(text)
    assert info.value.line == line


def test_ambiguous_index_base_rejected():
    with pytest.raises(GraphFormatError):
        parse_graph("2\n1 0\n3 0\n")


def test_components():
    assert [c.tolist() for c in Graph.from_edges(3, [(0, 1), (1, 2)]).components()] == [[0, 1, 2]]
    assert Graph.from_edges(4, [(0, 1), (2, 3)]).n_components == 2
    g = Graph.from_edges(4, [(0, 1), (1, 2)])
    assert [c.tolist() for c in g.components()] == [[0, 1, 2], [3]]
    labels, k = connected_components(g)
    assert k == 2 and labels.tolist() == [0, 0, 0, 1]


def test_besag_small(p2, p3):
    np.testing.assert_array_equal(besag_precision(p3).to_dense(),
                                  [[1, -1, 0], [-1, 2, -1], [0, -1, 1]])
    np.testing.assert_array_equal(besag_precision(p2).to_dense(), [[1, -1], [-1, 1]])
    np.testing.assert_allclose(eigenvalues_sym(besag_precision(p3)), [0, 1, 3], atol=1e-12)


def test_lattice_degrees():
    g = Graph.lattice(3, 4)
    assert g.n_edges == 3 * 3 + 2 * 4
    assert sorted(set(g.degrees.tolist())) == [2, 3, 4]


def test_roundtrip_file(tmp_path, rng):
    g = random_connected_graph(rng, 25)
    for base in (0, 1):
        path = tmp_path / f"g{base}.graph"
        write_graph(g, path, index_base=base)
        assert read_graph(path) == g


@st.composite
def graphs(draw):
    n = draw(st.integers(1, 30))
    pairs = st.tuples(st.integers(0, n - 1), st.integers(0, n - 1))
    return Graph.from_edges(n, draw(st.lists(pairs, max_size=3 * n)))


@settings(max_examples=60, deadline=None)
@given(graphs())
def test_graph_properties(g):
    for i, nb in enumerate(g.neighbours):
        assert i not in nb
        assert list(nb) == sorted(nb)
        for j in nb:
            assert i in g.neighbours[j]
    assert sorted(set(g.component_of.tolist())) == list(range(g.n_components))
    for i, j in g.edges():
        assert g.component_of[i] == g.component_of[j]
    q = besag_precision(g).to_dense()
    np.testing.assert_array_equal(q.sum(axis=1), 0)
    ev = np.linalg.eigvalsh(q)
    assert np.sum(np.abs(ev) < 1e-9) == g.n_components
    assert parse_graph(serialize_graph(g)) == g
