import networkx as nx
import numpy as np
import pytest

from forster.core.linalg import Dataset
from forster.data import fixtures


@pytest.mark.parametrize("name", sorted(fixtures.DATASETS))
def test_datasets_are_valid(name):
    A, c = fixtures.DATASETS[name]()
    dataset = Dataset.from_arrays(A, c)
    assert c.sum() == pytest.approx(dataset.d)


def test_graph_laplacian_uses_weights():
    graph = nx.Graph()
    graph.add_edge(0, 1, weight=2.0)
    graph.add_edge(1, 2)
    L = fixtures.graph_laplacian(graph, 4).dense()
    assert L.shape == (4, 4)
    assert L[0, 1] == -2.0 and L[1, 2] == -1.0 and L[3, 3] == 0.0


@pytest.mark.parametrize("build", [
    lambda rng: fixtures.path_laplacian(7, rng, (0.5, 2.0)),
    lambda rng: fixtures.star_laplacian(7, rng),
    lambda rng: fixtures.random_tree_laplacian(7, rng),
    lambda rng: fixtures.random_connected_laplacian(7, 0.3, rng),
])
def test_hidden_laplacians_are_connected(rng, build):
    L = build(rng).dense()
    assert np.allclose(L.sum(axis=1), 0.0)
    assert np.allclose(L, L.T)
    eigvals = np.linalg.eigvalsh(L)
    assert eigvals[0] == pytest.approx(0.0, abs=1e-10)
    assert eigvals[1] > 1e-8


def test_tree_edge_count(rng):
    assert fixtures.random_tree_laplacian(9, rng).nnz == 8
    assert fixtures.single_edge().edges() == [(0, 1, 1.0)]
