"""
Tests for the ISOMAP initialization.
"""

import numpy as np
import pytest
from scipy.linalg import orthogonal_procrustes
from scipy.spatial.distance import cdist

from services.errors import ConfigError, GraphDisconnectedError
from services.isomap import classical_mds, default_k, geodesic_distances, isomap, knn_graph


def test_default_k():
    assert default_k(1000, 1) == 11
    assert default_k(100, 2) == 10
    assert default_k(100000, 2) == 19


def test_mds_recovers_collinear_coordinates():
    """MDS of exact line distances gives the centered coordinates up to sign."""
    x = np.array([0.0, 1.0, 3.0, 6.0])
    D = np.abs(x[:, None] - x[None, :])
    coords = classical_mds(D, 1)
    np.testing.assert_allclose(np.abs(coords[:, 0]), np.abs(x - x.mean()), atol=1e-9)
    # first nonzero loading is positive
    assert coords[0, 0] > 0


def test_knn_graph_is_symmetric_with_index_ties():
    """Equidistant neighbours are ranked by index."""
    X = np.array([[0.0], [1.0], [-1.0], [5.0]])
    graph = knn_graph(X, 1)
    M = graph.matrix.toarray()
    np.testing.assert_allclose(M, M.T)
    # point 0 has neighbours 1 and 2 at equal distance; index 1 wins
    assert M[0, 1] == pytest.approx(1.0)
    assert np.all(graph.degrees() >= 1)


def test_disconnected_graph_raises():
    """Two far clusters with small k leave two components."""
    rng = np.random.default_rng(0)
    X = np.vstack([rng.normal(size=(20, 2)), rng.normal(size=(20, 2)) + 100.0])
    with pytest.raises(GraphDisconnectedError) as info:
        geodesic_distances(knn_graph(X, 3))
    assert sorted(info.value.component_sizes) == [20, 20]


def test_isomap_orders_points_along_an_arc():
    """Parameters of a half circle are monotone in the angle."""
    angles = np.linspace(0.0, np.pi, 60)
    X = np.column_stack([np.cos(angles), np.sin(angles)])
    t = isomap(X, 1, k=4)[:, 0]
    steps = np.diff(t)
    assert np.all(steps > 0) or np.all(steps < 0)
    # geodesic spread is the arc length
    assert np.ptp(t) == pytest.approx(np.pi, rel=0.02)


def test_isomap_rejects_bad_k():
    X = np.random.default_rng(1).normal(size=(5, 2))
    with pytest.raises(ConfigError):
        knn_graph(X, 5)


def test_ties_beyond_the_first_query_are_ranked_by_index():
    """The centre has twelve neighbours at distance 5; with k=1 it must pick index 1."""
    ring = [[5, 0], [4, 3], [3, 4], [0, 5], [-3, 4], [-4, 3], [-5, 0], [-4, -3], [-3, -4], [0, -5], [3, -4], [4, -3]]
    X = np.array([[0.0, 0.0]] + ring, dtype=float)
    M = knn_graph(X, 1).matrix.toarray()
    # ring points are closer to each other than to the centre, so row 0 is the centre's own choice
    assert np.flatnonzero(M[0]).tolist() == [1]


def test_path_graph_geodesics():
    X = np.arange(6, dtype=float)[:, None]
    graph = knn_graph(X, 1)
    assert graph.degrees().tolist() == [1, 2, 2, 2, 2, 1]
    G = geodesic_distances(graph)
    idx = np.arange(6)
    np.testing.assert_allclose(G, np.abs(idx[:, None] - idx[None, :]))


def test_complete_graph_geodesics_are_euclidean():
    X = np.random.default_rng(2).normal(size=(8, 2))
    G = geodesic_distances(knn_graph(X, 7))
    np.testing.assert_allclose(G, cdist(X, X), atol=1e-12)


def test_geodesics_are_a_metric():
    rng = np.random.default_rng(3)
    angles = np.linspace(0.0, 1.5 * np.pi, 40)
    X = np.column_stack([np.cos(angles), np.sin(angles)]) + 0.01 * rng.normal(size=(40, 2))
    G = geodesic_distances(knn_graph(X, 5), threads=2)
    np.testing.assert_allclose(G, G.T)
    assert np.all(np.diag(G) == 0)
    # G[i, j] <= G[i, m] + G[m, j] for every triple
    assert np.all(G[:, None, :] <= G[:, :, None] + G[None, :, :] + 1e-12)
    assert np.all(G >= cdist(X, X) - 1e-12)


def test_mds_recovers_a_planar_configuration():
    """Exact distances of planar points give the points back up to a rigid motion."""
    X = np.random.default_rng(4).uniform(-2.0, 2.0, size=(12, 2))
    coords = classical_mds(cdist(X, X), 2)
    target = X - X.mean(axis=0)
    R, _ = orthogonal_procrustes(coords, target)
    assert np.linalg.norm(coords @ R - target) <= 1e-8
