"""
Named Instances

Small datasets with known answers, and hidden Laplacians for the sparsifier
built from networkx graphs with random positive weights.
"""

import math
from typing import Callable, Dict, Optional, Tuple

import networkx as nx
import numpy as np

from forster.core.random import RngLike, as_generator, draw_seed
from forster.modules.soc import SparseLaplacian

Instance = Tuple[np.ndarray, np.ndarray]


# ==========================================
# DATASETS
# ==========================================

def identity(d: int = 2) -> Instance:
    """I_d with unit marginals; already in radial isotropic position."""
    return np.eye(d), np.ones(d)


def three_row() -> Instance:
    """Rows e_1, e_2, (e_1 + e_2)/sqrt(2) with c = (2/3) 1."""
    s = 1.0 / math.sqrt(2.0)
    return np.array([[1.0, 0.0], [0.0, 1.0], [s, s]]), np.full(3, 2.0 / 3.0)


def heavy_subspace() -> Instance:
    """Three copies of e_1 and one e_2 with c = 1/2: span(e_1) carries weight 3/2 > 1."""
    A = np.array([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    return A, np.full(4, 0.5)


DATASETS: Dict[str, Callable[[], Instance]] = {
    "identity": identity,
    "three_row": three_row,
    "heavy_subspace": heavy_subspace,
}


# ==========================================
# HIDDEN LAPLACIANS
# ==========================================

def graph_laplacian(graph: nx.Graph, n: Optional[int] = None) -> SparseLaplacian:
    """SparseLaplacian of a graph on nodes 0..n-1 using the `weight` attribute (default 1)."""
    n = graph.number_of_nodes() if n is None else n
    edges = list(graph.edges(data="weight", default=1.0))
    if not edges:
        return SparseLaplacian.empty(n)
    u, v, w = zip(*edges)
    return SparseLaplacian.from_edges(n, u, v, w)


def _weighted(graph: nx.Graph, rng: np.random.Generator, low: float, high: float) -> nx.Graph:
    weights = rng.uniform(low, high, size=graph.number_of_edges())
    nx.set_edge_attributes(graph, dict(zip(graph.edges(), weights.tolist())), "weight")
    return graph


def single_edge(n: int = 2, weight: float = 1.0) -> SparseLaplacian:
    return SparseLaplacian.from_edges(n, [0], [1], [weight])


def path_laplacian(n: int, rng: RngLike = None, weights: Tuple[float, float] = (1.0, 1.0)) -> SparseLaplacian:
    return graph_laplacian(_weighted(nx.path_graph(n), as_generator(rng), *weights))


def star_laplacian(n: int, rng: RngLike = None, weights: Tuple[float, float] = (1.0, 1.0)) -> SparseLaplacian:
    return graph_laplacian(_weighted(nx.star_graph(n - 1), as_generator(rng), *weights))


def random_tree_laplacian(n: int, rng: RngLike = None,
                          weights: Tuple[float, float] = (0.5, 2.0)) -> SparseLaplacian:
    """Uniform labelled tree decoded from a random Pruefer sequence."""
    rng = as_generator(rng)
    if n <= 2:
        return graph_laplacian(_weighted(nx.path_graph(n), rng, *weights))
    tree = nx.from_prufer_sequence(rng.integers(0, n, size=n - 2).tolist())
    return graph_laplacian(_weighted(tree, rng, *weights))


def random_connected_laplacian(n: int, p: float = 0.2, rng: RngLike = None,
                               weights: Tuple[float, float] = (0.5, 2.0)) -> SparseLaplacian:
    """G(n, p) united with a random spanning tree, so the graph is connected."""
    rng = as_generator(rng)
    graph = nx.gnp_random_graph(n, p, seed=draw_seed(rng) % (2**32))
    if n > 2:
        graph = nx.compose(graph, nx.from_prufer_sequence(rng.integers(0, n, size=n - 2).tolist()))
    else:
        graph = nx.compose(graph, nx.path_graph(n))
    return graph_laplacian(_weighted(graph, rng, *weights), n)
