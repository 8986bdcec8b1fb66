import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ddstc.topology import (InvalidTopologyError, Topology, build_graph_matrices, default_topology,
                            pendulum_experiment_topology, ring_topology, validate_connectivity)


def chain():
    return Topology([[0, 1], [1, 0]], [1, 0])


def test_two_follower_matrices():
    gm = build_graph_matrices(chain())
    np.testing.assert_array_equal(gm.laplacian, [[1, -1], [-1, 1]])
    np.testing.assert_array_equal(gm.pinning_diag, np.diag([1, 0]))
    np.testing.assert_array_equal(gm.h, [[2, -1], [-1, 1]])


def test_empty_graph_gives_zero_h():
    gm = build_graph_matrices(Topology(np.zeros((3, 3)), np.zeros(3)))
    assert not np.any(gm.laplacian)
    assert not np.any(gm.h)


def test_star_laplacian_matches_entrywise_construction():
    n = 6
    a = np.zeros((n, n))
    a[0, 1:] = a[1:, 0] = 1.0
    topo = Topology(a, np.eye(n)[0])
    lap = build_graph_matrices(topo).laplacian
    expected = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i == j:
                expected[i, j] = sum(a[i, k] for k in range(n) if k != i)
            else:
                expected[i, j] = -a[i, j]
    np.testing.assert_array_equal(lap, expected)


@pytest.mark.parametrize("adj, pin", [
    ([[0, -1], [-1, 0]], [1, 0]),
    ([[1, 1], [1, 0]], [1, 0]),
    ([[0, 1], [1, 0]], [-1, 0]),
    ([[0, 1, 0], [1, 0, 1]], [1, 0]),
])
def test_invalid_topologies_rejected(adj, pin):
    with pytest.raises(InvalidTopologyError):
        build_graph_matrices(Topology(adj, pin))


def test_chain_is_valid_with_closed_form_eigenvalue():
    rep = validate_connectivity(chain())
    assert rep
    assert rep.min_eig_h == pytest.approx((3 - np.sqrt(5)) / 2, abs=1e-14)


def test_zero_pinning_is_rejected():
    rep = validate_connectivity(Topology([[0, 1], [1, 0]], [0, 0]))
    assert not rep
    assert "pinned" in rep.message


def test_disconnected_follower_reported():
    a = np.zeros((3, 3))
    a[0, 1] = a[1, 0] = 1
    rep = validate_connectivity(Topology(a, [1, 0, 0]))
    assert not rep
    assert rep.unreachable == (2,)


def test_directed_chain_reaches_everyone():
    # leader -> 1 -> 2 -> 3; row i listens to column j
    a = np.zeros((3, 3))
    a[1, 0] = a[2, 1] = 1
    rep = validate_connectivity(Topology(a, [1, 0, 0]))
    assert rep and not rep.undirected and rep.min_eig_h is None
    a_rev = a.T.copy()
    assert not validate_connectivity(Topology(a_rev, [1, 0, 0]))


@pytest.mark.parametrize("topo", [default_topology(), pendulum_experiment_topology(), ring_topology(6)])
def test_shipped_topologies_are_valid(topo):
    rep = validate_connectivity(topo)
    assert rep
    lam = np.linalg.eigvalsh(build_graph_matrices(topo).h)
    assert lam[0] > 0
    assert rep.min_eig_h == pytest.approx(lam[0])


def _reachable_oracle(a, pin):
    """Transitive closure by repeated squaring of the augmented reachability matrix."""
    n = len(pin)
    m = np.zeros((n + 1, n + 1), dtype=bool)
    m[1:, 1:] = np.asarray(a).T > 0   # j -> i
    m[0, 1:] = np.asarray(pin) > 0
    reach = m | np.eye(n + 1, dtype=bool)
    for _ in range(n + 1):
        reach = reach | ((reach.astype(int) @ reach.astype(int)) > 0)
    return bool(np.all(reach[0, 1:]))


weights = st.floats(0.0, 3.0, allow_nan=False)


@st.composite
def topologies(draw, undirected=False):
    n = draw(st.integers(1, 7))
    a = draw(arrays(float, (n, n), elements=weights))
    a = a * draw(arrays(bool, (n, n)))
    if undirected:
        a = np.triu(a, 1)
        a = a + a.T
    np.fill_diagonal(a, 0.0)
    pin = draw(arrays(float, n, elements=weights)) * draw(arrays(bool, n))
    return Topology(a, pin)


@given(topologies())
@settings(max_examples=150, deadline=None)
def test_laplacian_invariants(topo):
    gm = build_graph_matrices(topo)
    np.testing.assert_allclose(gm.laplacian @ np.ones(topo.n_followers), 0, atol=1e-12)
    off = ~np.eye(topo.n_followers, dtype=bool)
    np.testing.assert_array_equal((gm.laplacian + topo.adjacency)[off], 0)
    np.testing.assert_array_equal(gm.h, gm.laplacian + gm.pinning_diag)


@given(topologies())
@settings(max_examples=150, deadline=None)
def test_spanning_tree_check_matches_closure(topo):
    rep = validate_connectivity(topo)
    assert bool(rep) == _reachable_oracle(topo.adjacency, topo.pinning) or (
        rep.undirected and rep.min_eig_h is not None and rep.min_eig_h <= 0)


@given(topologies(undirected=True))
@settings(max_examples=150, deadline=None)
def test_valid_undirected_graphs_have_positive_definite_h(topo):
    if validate_connectivity(topo):
        assert np.linalg.eigvalsh(build_graph_matrices(topo).h)[0] > 0
