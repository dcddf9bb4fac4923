"""
Geodesic embedding: symmetric k-NN graph, graph shortest paths and classical MDS.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import eigh
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components, shortest_path
from sklearn.neighbors import NearestNeighbors

from services.errors import ConfigError, GraphDisconnectedError
from services.workers import parallel_map

# Настройка логирования
logger = logging.getLogger(__name__)

LARGE_GRAPH_WARNING = 3000
# distances closer than this (relative) count as tied
TIE_TOL = 1e-12


@dataclass
class NeighborGraph:
    """Symmetric k-NN graph; `matrix[i, j]` is the Euclidean edge length."""

    matrix: csr_matrix
    k: int

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def degrees(self) -> np.ndarray:
        return np.diff(self.matrix.indptr)


def default_k(n_points: int, d: int) -> int:
    return max(10, math.ceil(math.log2(max(n_points, 2))) + d)


def knn_graph(X, k: int) -> NeighborGraph:
    """
    Builds the symmetric k-NN graph.

    An edge is kept when either endpoint lists the other among its k nearest points;
    equal distances are ranked by point index. The neighbour query widens until every
    row reaches past its k-th distance, so ties at the cut are all seen.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n = X.shape[0]
    if k < 1 or k >= n:
        raise ConfigError(f"k must satisfy 1 <= k < I (k={k}, I={n})")
    nn = NearestNeighbors(algorithm="auto").fit(X)
    query = min(n, k + 2)
    while True:
        dist, idx = nn.kneighbors(X, n_neighbors=query)
        # column 0 is the point itself
        kth = dist[:, k]
        if query >= n or np.all(dist[:, -1] > kth + TIE_TOL * np.maximum(kth, 1.0)):
            break
        query = min(n, 2 * query)

    rows, cols, vals = [], [], []
    for i in range(n):
        mask = idx[i] != i
        cand_idx, cand_dist = idx[i][mask], dist[i][mask]
        # exact distances, ties by index
        cand_dist = np.linalg.norm(X[cand_idx] - X[i], axis=1)
        order = np.lexsort((cand_idx, cand_dist))[:k]
        rows.extend([i] * len(order))
        cols.extend(cand_idx[order].tolist())
        # duplicate points keep a (tiny) edge instead of vanishing from the sparse pattern
        vals.extend(np.maximum(cand_dist[order], 1e-300).tolist())
    directed = csr_matrix((vals, (rows, cols)), shape=(n, n))
    symmetric = directed.maximum(directed.T).tocsr()
    return NeighborGraph(matrix=symmetric, k=k)


def geodesic_distances(graph: NeighborGraph, threads: Optional[int] = 1) -> np.ndarray:
    """
    All-pairs shortest-path lengths with Dijkstra from every source.

    Raises:
        GraphDisconnectedError: If the graph has more than one component.
    """
    n_comp, labels = connected_components(graph.matrix, directed=False)
    if n_comp > 1:
        sizes = np.bincount(labels).tolist()
        raise GraphDisconnectedError(sizes)
    if graph.n > LARGE_GRAPH_WARNING:
        logger.warning(f"all-pairs geodesics on {graph.n} vertices: quadratic memory and time")

    sources = np.array_split(np.arange(graph.n), max(1, min(graph.n, 4 * (threads or 1))))

    def run(chunk):
        return shortest_path(graph.matrix, method="D", directed=False, indices=chunk)

    blocks = parallel_map(run, [c for c in sources if c.size], threads)
    geo = np.vstack(blocks)
    geo = 0.5 * (geo + geo.T)
    np.fill_diagonal(geo, 0.0)
    return geo


def classical_mds(distances, d: int) -> np.ndarray:
    """
    Classical multidimensional scaling.

    Args:
        distances: Symmetric I x I distance matrix with zero diagonal.
        d: Output dimension.

    Returns:
        np.ndarray: I x d centered coordinates, columns ordered by decreasing eigenvalue,
        each column signed so that its first nonzero loading is positive.
    """
    D = np.asarray(distances, dtype=float)
    n = D.shape[0]
    if D.shape != (n, n):
        raise ConfigError("distance matrix must be square")
    if d < 1:
        raise ConfigError("embedding dimension must be positive")
    sq = D ** 2
    # double centering of -1/2 D^2
    B = -0.5 * (sq - sq.mean(axis=0)[None, :] - sq.mean(axis=1)[:, None] + sq.mean())
    B = 0.5 * (B + B.T)
    values, vectors = eigh(B)
    order = np.argsort(values)[::-1]
    values, vectors = values[order], vectors[:, order]
    values = np.maximum(values, 0.0)

    scale = max(float(values[0]) if n else 0.0, 1e-300)
    positive = int(np.sum(values > 1e-12 * scale))
    if positive < d:
        logger.warning(f"only {positive} positive eigenvalues for a {d}-dimensional embedding")

    coords = np.zeros((n, d))
    for c in range(min(d, n)):
        if c >= positive:
            continue
        v = vectors[:, c]
        nonzero = np.flatnonzero(np.abs(v) > 1e-12)
        if nonzero.size and v[nonzero[0]] < 0:
            v = -v
        coords[:, c] = v * math.sqrt(values[c])
    coords -= coords.mean(axis=0)
    return coords


def isomap(X, d: int, k: Optional[int] = None, threads: Optional[int] = 1) -> np.ndarray:
    """
    ISOMAP parameters of a point set.

    Args:
        X: I x D points.
        d: Intrinsic dimension.
        k: Neighbour count; None uses max(10, ceil(log2 I) + d), capped at I - 1.

    Returns:
        np.ndarray: I x d parameters.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n = X.shape[0]
    if n < 2:
        return np.zeros((n, d))
    k = default_k(n, d) if k is None else k
    k = min(k, n - 1)
    graph = knn_graph(X, k)
    params = classical_mds(geodesic_distances(graph, threads=threads), d)
    logger.debug(f"isomap: {n} points, k={k}, d={d}")
    return params
