import itertools

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st
from scipy.special import comb

from genrec.graph import WeightedGraph
from genrec.spectral import laplacian, spectral_cluster, spectral_embedding


def graph_from_edges(n, edges):
    rows, cols, data = [], [], []
    for a, b, w in edges:
        rows += [a, b]
        cols += [b, a]
        data += [w, w]
    adj = sp.csr_matrix((np.array(data, dtype=np.int64), (rows, cols)), shape=(n, n))
    return WeightedGraph(tuple(("u", k) for k in range(n)), adj)


def ari(a, b):
    """Adjusted Rand index from the contingency table."""
    a = np.unique(a, return_inverse=True)[1]
    b = np.unique(b, return_inverse=True)[1]
    table = np.zeros((a.max() + 1, b.max() + 1))
    np.add.at(table, (a, b), 1)
    n = len(a)
    sum_ij = comb(table, 2).sum()
    sum_a = comb(table.sum(1), 2).sum()
    sum_b = comb(table.sum(0), 2).sum()
    expected = sum_a * sum_b / comb(n, 2)
    return (sum_ij - expected) / (0.5 * (sum_a + sum_b) - expected)


def same_partition(a, b):
    pairs = set(zip(np.asarray(a).tolist(), np.asarray(b).tolist()))
    return len(pairs) == len(set(a)) == len(set(b))


def test_laplacian_examples():
    assert np.array_equal(laplacian(graph_from_edges(2, [(0, 1, 1)])), [[1, -1], [-1, 1]])
    lap = laplacian(graph_from_edges(3, [(0, 1, 2)]))
    assert np.all(lap[2] == 0) and np.all(lap[:, 2] == 0)
    tri = laplacian(graph_from_edges(3, [(0, 1, 1), (1, 2, 1), (0, 2, 1)]))
    assert np.array_equal(tri, 3 * np.eye(3) - np.ones((3, 3)))


def test_laplacian_uses_raw_weights():
    lap = laplacian(graph_from_edges(2, [(0, 1, 5)]))
    assert np.array_equal(lap, [[5, -5], [-5, 5]])


def test_empty_graph():
    with pytest.raises(ValueError):
        laplacian(graph_from_edges(0, []))


def _dedup_edges(es):
    weights = {(min(a, b), max(a, b)): w for a, b, w in es if a != b}
    return [(a, b, w) for (a, b), w in weights.items()]


random_graphs = st.integers(2, 12).flatmap(
    lambda n: st.lists(
        st.tuples(st.integers(0, n - 1), st.integers(0, n - 1), st.integers(1, 9)), max_size=30
    ).map(lambda es: graph_from_edges(n, _dedup_edges(es)))
)


@given(random_graphs, st.integers(0, 2**31 - 1))
@settings(max_examples=50, deadline=None)
def test_laplacian_psd_and_zero_rows(g, seed):
    lap = laplacian(g)
    assert np.abs(lap.sum(1)).max() < 1e-9
    assert np.array_equal(lap, lap.T)
    x = np.random.default_rng(seed).normal(size=(100, g.num_nodes))
    assert np.einsum("ki,ij,kj->k", x, lap, x).min() >= -1e-9


def two_triangles():
    return graph_from_edges(6, [(0, 1, 1), (1, 2, 1), (0, 2, 1), (3, 4, 1), (4, 5, 1), (3, 5, 1)])


def test_two_triangles():
    labels = spectral_cluster(two_triangles(), 2, seed=0)
    assert ari(labels, [0, 0, 0, 1, 1, 1]) == pytest.approx(1.0)
    assert set(labels) == {1, 2}


def test_path_graph_matches_analytic_oracle():
    g = graph_from_edges(4, [(0, 1, 1), (1, 2, 1), (2, 3, 1)])
    # closed-form eigenvectors of the path Laplacian: cos(pi k (j + 1/2) / n)
    j = np.arange(4)
    emb = np.stack([np.cos(np.pi * k * (j + 0.5) / 4) for k in (0, 1)], axis=1)
    best, best_cost = None, np.inf
    for mask in itertools.product([0, 1], repeat=4):
        mask = np.array(mask)
        if mask.min() == mask.max():
            continue
        cost = sum(((emb[mask == c] - emb[mask == c].mean(0)) ** 2).sum() for c in (0, 1))
        if cost < best_cost - 1e-12:
            best, best_cost = mask, cost
    labels = spectral_cluster(g, 2, seed=3)
    assert ari(labels, best) == pytest.approx(1.0)
    assert ari(labels, [0, 0, 1, 1]) == pytest.approx(1.0)


def test_k4_single_cluster():
    g = graph_from_edges(4, [(a, b, 1) for a, b in itertools.combinations(range(4), 2)])
    assert spectral_cluster(g, 1).tolist() == [1, 1, 1, 1]


def test_cluster_count_bounds():
    with pytest.raises(ValueError):
        spectral_cluster(two_triangles(), 7)
    with pytest.raises(ValueError):
        spectral_cluster(two_triangles(), 0)


def test_embedding_spans_smallest_eigenvectors():
    g = graph_from_edges(5, [(0, 1, 2), (1, 2, 1), (2, 3, 3), (3, 4, 1)])
    emb = spectral_embedding(g, 2)
    lap = laplacian(g)
    vals = np.linalg.eigvalsh(lap)[:2]
    np.testing.assert_allclose(lap @ emb, emb * vals, atol=1e-10)


def components_graph(sizes, rng):
    edges, start = [], 0
    for s in sizes:
        nodes = list(range(start, start + s))
        for a, b in zip(nodes, nodes[1:]):  # spanning path keeps it connected
            edges.append((a, b, int(rng.integers(1, 5))))
        for a, b in itertools.combinations(nodes, 2):
            if b > a + 1 and rng.random() < 0.3:
                edges.append((a, b, int(rng.integers(1, 5))))
        start += s
    comp = np.repeat(np.arange(len(sizes)), sizes)
    return graph_from_edges(start, edges), comp


@given(st.lists(st.integers(1, 5), min_size=2, max_size=6), st.integers(0, 1000), st.data())
@settings(max_examples=40, deadline=None)
def test_components_never_split(sizes, seed, data):
    rng = np.random.default_rng(seed)
    g, comp = components_graph(sizes, rng)
    n_clusters = data.draw(st.integers(2, len(sizes)))
    labels = spectral_cluster(g, n_clusters, seed=seed)
    for c in range(len(sizes)):
        assert len(set(labels[comp == c])) == 1
    if n_clusters == len(sizes):
        # one cluster per component exactly
        assert same_partition(labels, comp)


def test_deterministic():
    rng = np.random.default_rng(1)
    g, _ = components_graph([6, 7, 5], rng)
    a = spectral_cluster(g, 4, seed=11)
    b = spectral_cluster(g, 4, seed=11)
    assert np.array_equal(a, b)


def test_normalized_variant_separates_components():
    labels = spectral_cluster(two_triangles(), 2, normalized=True)
    assert ari(labels, [0, 0, 0, 1, 1, 1]) == pytest.approx(1.0)
