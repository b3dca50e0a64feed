import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from decmarl.consensus import (CommGraph, ConsensusTimeout, DisconnectedGraphError, build_kernel, consensus_step,
                               max_deviation, run_to_consensus)


class ReadTracker:
    """Sequence double recording which indices are read."""

    def __init__(self, values):
        self.values = list(values)
        self.read = set()

    def __len__(self):
        return len(self.values)

    def __getitem__(self, j):
        self.read.add(j)
        return self.values[j]


def random_connected_graph(n, extra, seed):
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    edges = {tuple(sorted((int(order[k]), int(order[rng.integers(k)])))) for k in range(1, n)}
    for _ in range(extra):
        i, j = rng.choice(n, 2, replace=False)
        edges.add(tuple(sorted((int(i), int(j)))))
    return CommGraph(n, sorted(edges))


def test_ring4_kernel_by_hand():
    k = build_kernel(CommGraph.ring(4))
    third = 1 / 3
    expected = np.array([[third, third, 0, third],
                         [third, third, third, 0],
                         [0, third, third, third],
                         [third, 0, third, third]])
    assert k.degree == 2
    np.testing.assert_allclose(k.weights, expected, atol=1e-15)


def test_complete3_all_thirds():
    np.testing.assert_allclose(build_kernel(CommGraph.complete(3)).weights, np.full((3, 3), 1 / 3), atol=1e-15)


def test_path_kernel_diagonal():
    W = build_kernel(CommGraph.path(3)).weights
    # d = 2: endpoints keep 1 - 1/3, middle keeps 1 - 2/3
    np.testing.assert_allclose(np.diag(W), [2 / 3, 1 / 3, 2 / 3])


@given(st.integers(2, 12), st.integers(0, 10), st.integers(0, 10_000))
@settings(max_examples=60, deadline=None)
def test_kernel_doubly_stochastic(n, extra, seed):
    W = build_kernel(random_connected_graph(n, extra, seed)).weights
    assert np.abs(W.sum(axis=0) - 1).max() < 1e-12
    assert np.abs(W.sum(axis=1) - 1).max() < 1e-12
    assert np.abs(W - W.T).max() < 1e-12
    assert (W >= 0).all() and (np.diag(W) > 0).all()


def test_disconnected_rejected_with_components():
    g = CommGraph(4, [(0, 1), (2, 3)])
    with pytest.raises(DisconnectedGraphError, match=r"\[0, 1\].*\[2, 3\]"):
        build_kernel(g)


@pytest.mark.parametrize("edges", [[(0, 0)], [(0, 1), (1, 0)], [(0, 5)]])
def test_graph_invariants(edges):
    with pytest.raises(ValueError):
        CommGraph(3, edges)


def test_step_examples():
    k = build_kernel(CommGraph.ring(4))
    np.testing.assert_allclose(consensus_step(k, np.full(4, 2.7)), np.full(4, 2.7), atol=1e-15)
    assert consensus_step(k, np.array([1.0, 2, 3, 4])).sum() == pytest.approx(10, abs=1e-12)
    np.testing.assert_allclose(consensus_step(k, np.array([1.0, 0, 0, 0])), [1 / 3, 1 / 3, 0, 1 / 3], atol=1e-15)
    with pytest.raises(ValueError):
        consensus_step(k, np.ones(3))


def test_step_trailing_dimensions():
    k = build_kernel(CommGraph.ring(5))
    X = np.random.default_rng(0).normal(size=(5, 3))
    np.testing.assert_allclose(consensus_step(k, X), k.weights @ X, atol=1e-14)


def test_locality_reads_only_row_support():
    g = random_connected_graph(7, 3, 1)
    k = build_kernel(g)
    for i in range(7):
        tracker = ReadTracker(np.arange(7.0))
        # restrict the kernel to a single row to isolate node i's reads
        row_only = type(k)(k.weights, k.degree, tuple(k.neighbors[j] if j == i else () for j in range(7)))
        consensus_step(row_only, tracker)
        assert tracker.read == {i, *g.neighbors(i)}
        assert tracker.read == set(np.flatnonzero(k.weights[i]))


def test_run_to_average():
    k = build_kernel(CommGraph.ring(4))
    x, iters = run_to_consensus(k, [1, 2, 3, 4], 1e-10, 1000)
    np.testing.assert_allclose(x, 2.5, atol=1e-10)
    assert iters > 0
    assert run_to_consensus(k, np.full(4, 3.0), 1e-10, 10)[1] == 0


def test_ring8_random_within_500():
    k = build_kernel(CommGraph.ring(8))
    rng = np.random.default_rng(0)
    # power-iteration oracle: deviation contracts by the second eigenvalue modulus
    lam = np.sort(np.abs(np.linalg.eigvalsh(k.weights)))[-2]
    for _ in range(20):
        x0 = rng.random(8)
        x, iters = run_to_consensus(k, x0, 1e-8, 500)
        assert iters <= 500
        bound = np.linalg.norm(x0 - x0.mean()) * lam ** iters
        assert max_deviation(x, x0.mean()) <= bound + 1e-15


def test_timeout_is_explicit():
    k = build_kernel(CommGraph.path(6))
    with pytest.raises(ConsensusTimeout) as err:
        run_to_consensus(k, np.arange(6.0), 1e-12, 3)
    assert err.value.iters == 3 and err.value.deviation > 1e-12
    assert run_to_consensus(k, np.arange(6.0), 1e-12, 3, raise_on_timeout=False)[1] == -1


@given(st.integers(2, 10), st.integers(0, 5_000))
@settings(max_examples=40, deadline=None)
def test_monotone_contraction_and_sum(n, seed):
    k = build_kernel(random_connected_graph(n, 2, seed))
    x = np.random.default_rng(seed).normal(size=n) * 10
    mean, total = x.mean(), x.sum()
    dev = max_deviation(x, mean)
    for _ in range(1000):
        x = consensus_step(k, x)
        d = max_deviation(x, mean)
        assert d <= dev + 1e-12
        dev = d
    assert abs(x.sum() - total) < 1e-9


def test_edge_list_roundtrip(tmp_path):
    g = random_connected_graph(6, 4, 3)
    path = tmp_path / "g.txt"
    path.write_text("# comment\n" + g.to_edge_list())
    back = CommGraph.parse(str(path))
    assert back.num_nodes == 6 and sorted(back.edges) == sorted(g.edges)
    assert CommGraph.parse("ring:5").num_nodes == 5
    assert len(CommGraph.parse("complete:4").edges) == 6


def test_small_rings():
    assert sorted(CommGraph.ring(2).edges) == [(0, 1)]
    np.testing.assert_allclose(build_kernel(CommGraph.ring(1)).weights, [[1.0]])
