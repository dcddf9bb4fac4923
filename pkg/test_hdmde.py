"""
Tests for the high-dimensional mixture density estimation step.
"""

import math

import numpy as np
import pytest

from services.benchmark import OUTLIER_RADIUS
from services.dataset import GeneratorSpec, generate
from services.errors import ConfigError, DegenerateError
from services.hdmde import (
    Waj,
    _constrained_update,
    em_theta,
    estimate_sigma,
    hdmde,
    inner_objective,
    kmeans_partition,
    log_kernel_matrix,
    mixture_density,
    outlier_weight_ratio,
    responsibilities,
    z_from_deltas,
    z_statistic,
    z_threshold,
)


def _blob(seed=0, n=200):
    return np.random.default_rng(seed).normal(size=(n, 2))


def test_kmeans_is_deterministic_and_covers_every_cluster():
    X = _blob()
    c1, a1 = kmeans_partition(X, 8, seed=3)
    c2, a2 = kmeans_partition(X, 8, seed=3)
    np.testing.assert_array_equal(a1, a2)
    np.testing.assert_allclose(c1, c2)
    assert set(a1.tolist()) == set(range(8))
    with pytest.raises(ConfigError):
        kmeans_partition(X, 0)


def test_sigma_by_hand():
    """Two points around one center, one coordinate: sigma = 1."""
    assert estimate_sigma([[0.0], [2.0]], [[1.0]], [0, 0]) == pytest.approx(1.0)
    # two clusters in 2D: ((1/2)(1/2)(1 + 4))^(1/2)
    points = [[1.0, 0.0], [-1.0, 0.0], [10.0, 2.0], [10.0, -2.0]]
    centers = [[0.0, 0.0], [10.0, 0.0]]
    assert estimate_sigma(points, centers, [0, 0, 1, 1]) == pytest.approx(math.sqrt(5.0 / 4.0))


def test_mixture_density_matches_the_formula():
    x = np.array([[0.3, -0.2]])
    nodes = np.array([[0.0, 0.0], [1.0, 1.0]])
    weights = np.array([0.25, 0.75])
    sigma = 0.5
    expected = sum(
        w * math.exp(-np.sum((x[0] - m) ** 2) / (2 * sigma ** 2)) / (2 * math.pi * sigma ** 2)
        for w, m in zip(weights, nodes)
    )
    assert mixture_density(x, nodes, sigma, weights)[0] == pytest.approx(expected)


def test_inner_objective_vanishes_on_feasible_weights():
    """Symmetric nodes around the mean with equal column sums."""
    nodes = np.array([[-1.0], [1.0], [-2.0], [2.0]])
    col_sums = np.array([5.0, 5.0, 5.0, 5.0])
    assert inner_objective(20.0, [0.0], col_sums, nodes, [0.0]) == pytest.approx(0.0)
    assert inner_objective(10.0, [0.0], col_sums, nodes, [0.0]) > 0


def test_em_weights_respect_the_simplex_and_the_mean():
    X = _blob(1)
    centers, assignment = kmeans_partition(X, 10, seed=0)
    sigma = estimate_sigma(X, centers, assignment)
    theta, iterations = em_theta(X, centers, sigma, return_iterations=True)
    assert theta.sum() == pytest.approx(1.0)
    assert iterations >= 1
    diameter = np.linalg.norm(X.max(axis=0) - X.min(axis=0))
    assert np.linalg.norm(theta @ centers - X.mean(axis=0)) <= 1e-6 * diameter
    with pytest.raises(DegenerateError):
        em_theta(X, centers, 0.0)


def test_z_statistic_matches_brute_force():
    """Z = sqrt(I) mean(delta) / S_hat with the biased standard deviation."""
    rng = np.random.default_rng(2)
    X = rng.normal(size=(50, 2))
    model_n = (rng.normal(size=(3, 2)), np.array([0.2, 0.3, 0.5]), 0.8)
    model_n1 = (rng.normal(size=(4, 2)), np.array([0.1, 0.2, 0.3, 0.4]), 0.7)

    def density(x, model):
        nodes, weights, sigma = model
        return sum(
            w * math.exp(-np.sum((x - m) ** 2) / (2 * sigma ** 2)) / (2 * math.pi * sigma ** 2)
            for w, m in zip(weights, nodes)
        )

    deltas = np.array([density(x, model_n1) - density(x, model_n) for x in X])
    s_hat = math.sqrt(np.mean(deltas ** 2) - np.mean(deltas) ** 2)
    expected = math.sqrt(50) * np.mean(deltas) / s_hat
    report = z_statistic(X, model_n, model_n1)
    assert report.z == pytest.approx(expected, rel=1e-9)
    assert report.n == 3


def test_z_degenerate_when_all_differences_agree():
    with pytest.raises(DegenerateError):
        z_from_deltas(np.full(10, 0.3))


def test_z_threshold():
    assert z_threshold(0.05) == pytest.approx(1.959964, abs=1e-6)
    assert z_threshold(0.01) == pytest.approx(2.575829, abs=1e-6)


def test_hdmde_selects_a_size_within_bounds():
    """The returned size is the first N whose |Z| falls below the critical value."""
    cloud = generate(GeneratorSpec("three-quarter-circle", 300, seed=0))
    waj, trace = hdmde(cloud.points, n0=10, alpha=0.05)
    assert 10 <= waj.n <= 150
    assert waj.weights.sum() == pytest.approx(1.0)
    assert waj.sigma > 0
    threshold = z_threshold(0.05)
    assert abs(trace[-1].z) < threshold
    assert all(abs(r.z) >= threshold for r in trace[:-1])
    assert [r.n for r in trace] == list(range(10, waj.n + 1))
    with pytest.raises(ConfigError):
        hdmde(cloud.points, alpha=1.5)


def test_outlier_weight_ratio():
    waj = Waj(nodes=[[0.0, 0.0], [2.0, 0.0], [0.0, 2.0], [-2.0, 0.0]], weights=[0.1, 0.3, 0.3, 0.3], sigma=0.1)
    assert outlier_weight_ratio(waj, [0.0, 0.0], 0.5) == pytest.approx(1.0 / 3.0)
    with pytest.raises(DegenerateError):
        outlier_weight_ratio(waj, [0.0, 0.0], 5.0)


def test_kmeans_edge_sizes():
    X = _blob(4, n=30)
    centers, assignment = kmeans_partition(X, 30, seed=1)
    # one point per center
    assert sorted(assignment.tolist()) == list(range(30))
    np.testing.assert_allclose(centers[assignment], X)

    centers, assignment = kmeans_partition(X, 1)
    np.testing.assert_allclose(centers[0], X.mean(axis=0))
    assert not assignment.any()
    with pytest.raises(ConfigError):
        kmeans_partition(X, 31)


def test_kmeans_recovers_separated_blobs():
    rng = np.random.default_rng(5)
    means = np.array([[0.0, 0.0], [20.0, 0.0], [0.0, 20.0]])
    truth = np.repeat(np.arange(3), 40)
    X = means[truth] + 0.1 * rng.normal(size=(120, 2))
    centers, assignment = kmeans_partition(X, 3, seed=2)
    for j in range(3):
        members = np.unique(assignment[truth == j])
        assert members.size == 1
        np.testing.assert_allclose(centers[members[0]], X[truth == j].mean(axis=0))


def _symmetric_mixture():
    """Points and nodes symmetric about the origin, so the mean constraint is inactive."""
    rng = np.random.default_rng(6)
    half = np.column_stack([rng.choice([1.0, 3.0], 100) + 0.5 * rng.normal(size=100), 0.5 * rng.normal(size=100)])
    X = np.vstack([half, -half])
    nodes = np.array([[-3.0, 0.0], [-1.0, 0.0], [1.0, 0.0], [3.0, 0.0]])
    return X, nodes


def test_em_returns_the_update_that_met_the_tolerance():
    X, nodes = _symmetric_mixture()
    theta, iterations = em_theta(X, nodes, 0.5, eps=1e-6, return_iterations=True)

    log_kernel = log_kernel_matrix(X, nodes, 0.5)
    history = [np.full(4, 0.25)]
    for _ in range(iterations):
        col_sums = responsibilities(log_kernel, history[-1]).sum(axis=0)
        history.append(_constrained_update(col_sums, nodes, X.mean(axis=0)))
    np.testing.assert_allclose(theta, history[-1], rtol=1e-10, atol=1e-14)
    assert np.max(np.abs(history[-1] - history[-2])) < 1e-6
    if iterations > 1:
        assert np.max(np.abs(history[-2] - history[-3])) >= 1e-6


def test_em_matches_the_plain_fixed_point_when_the_mean_is_free():
    X, nodes = _symmetric_mixture()
    theta = em_theta(X, nodes, 0.5, eps=1e-12)

    log_kernel = log_kernel_matrix(X, nodes, 0.5)
    plain = np.full(4, 0.25)
    for _ in range(5000):
        updated = responsibilities(log_kernel, plain).mean(axis=0)
        done = np.max(np.abs(updated - plain)) < 1e-14
        plain = updated
        if done:
            break
    np.testing.assert_allclose(theta, plain, atol=1e-8)


def test_em_single_node_and_node_order():
    X, nodes = _symmetric_mixture()
    np.testing.assert_allclose(em_theta(X, X.mean(axis=0)[None, :], 0.5), [1.0])

    theta = em_theta(X, nodes, 0.5)
    order = [3, 2, 1, 0]
    np.testing.assert_allclose(em_theta(X, nodes[order], 0.5), theta[order], atol=1e-8)
    # mirror-image nodes carry mirror-image weight
    np.testing.assert_allclose(theta, theta[order], atol=1e-6)


def test_outlier_cluster_keeps_a_single_node():
    cloud = generate(GeneratorSpec("circle-with-outliers", 1000, seed=0))
    waj, _ = hdmde(cloud.points, seed=0)
    inside = np.linalg.norm(waj.nodes, axis=1) < OUTLIER_RADIUS
    assert inside.sum() == 1
    assert outlier_weight_ratio(waj, np.zeros(2), OUTLIER_RADIUS) > 0
