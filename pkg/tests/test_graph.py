import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pen4rec.graph import build_graph, hop_adjacency

sessions = st.lists(st.integers(0, 9), min_size=1, max_size=30)


def test_example_with_revisit():
    g = build_graph([1, 2, 3, 2, 4])
    assert g.nodes == (1, 2, 3, 4)
    pos = {v: i for i, v in enumerate(g.nodes)}
    row2 = g.A_out[pos[2]]
    assert row2[pos[3]] == 0.5 and row2[pos[4]] == 0.5
    assert row2.sum() == 1.0
    assert g.A_out[pos[1], pos[2]] == 1.0
    assert np.all(g.A_out[pos[4]] == 0.0)
    # incoming edges of node 2 come from 1 and 3 once each
    assert g.A_in[pos[2], pos[1]] == 0.5 and g.A_in[pos[2], pos[3]] == 0.5
    assert np.all(g.A_in[pos[1]] == 0.0)


def test_example_repeated_edge():
    g = build_graph([1, 2, 1, 2])
    pos = {v: i for i, v in enumerate(g.nodes)}
    assert g.A_out[pos[1], pos[2]] == 1.0
    assert g.A_out[pos[2], pos[1]] == 1.0
    np.testing.assert_array_equal(g.alias, [0, 1, 0, 1])


def test_single_item():
    g = build_graph([7], max_hop=3)
    assert g.nodes == (7,)
    assert g.A_out.shape == (1, 1) and g.A_out[0, 0] == 0.0
    assert all(np.all(m == 0.0) for m in g.hop_powers_out + g.hop_powers_in)


def test_hop_identity():
    base = np.array([[0.0, 0.5, 0.5], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    np.testing.assert_array_equal(hop_adjacency(base, 1), base)


def test_hop_chain_square():
    chain = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, 0.0]])
    sq = hop_adjacency(chain, 2)
    np.testing.assert_array_equal(sq[0], [0.0, 0.0, 1.0])
    np.testing.assert_array_equal(sq[1:], 0.0)


def test_hop_rejects_zero():
    with pytest.raises(ValueError):
        hop_adjacency(np.eye(2), 0)


def test_hop_powers_first_is_base():
    g = build_graph([3, 1, 4, 1, 5, 9, 2, 6], max_hop=4)
    np.testing.assert_array_equal(g.hop_powers_out[0], g.A_out)
    np.testing.assert_array_equal(g.hop_powers_in[0], g.A_in)
    assert g.max_hop == 4


@settings(max_examples=100, deadline=None)
@given(sessions, st.integers(1, 5))
def test_graph_properties(items, c):
    g = build_graph(items, max_hop=c)
    assert set(g.nodes) == set(items) and len(g.nodes) == len(set(items))
    assert [g.nodes[a] for a in g.alias] == items
    for A in (g.A_out, g.A_in):
        sums = A.sum(axis=1)
        assert np.all((np.abs(sums - 1.0) <= 1e-9) | (sums == 0.0))
    for M in g.hop_powers_out + g.hop_powers_in:
        assert np.all(M.sum(axis=1) <= 1.0 + 1e-9)
        assert np.all(M >= 0.0)
    # zero rows stay zero at every power
    zero_rows = np.where(g.A_out.sum(axis=1) == 0.0)[0]
    for M in g.hop_powers_out:
        assert np.all(M[zero_rows] == 0.0)
    again = build_graph(items, max_hop=c)
    assert again.A_out.tobytes() == g.A_out.tobytes()
    assert again.A_in.tobytes() == g.A_in.tobytes()


@settings(max_examples=50, deadline=None)
@given(sessions)
def test_in_matrix_is_reversed_out_normalisation(items):
    g = build_graph(items)
    rev = build_graph(items[::-1])
    # map node order of the reversed build onto the forward build
    perm = [rev.nodes.index(v) for v in g.nodes]
    np.testing.assert_allclose(g.A_in, rev.A_out[np.ix_(perm, perm)], atol=1e-15)
