"""
Tests for interior identification.
"""

import numpy as np
import pytest

from services.dataset import EXTERIOR, INTERIOR, NO_LABEL, PointCloud, sphere_slices
from services.errors import ClassificationError, ConfigError, GridMismatchError
from services.interior import (
    GridLabels,
    agreement,
    classify_grid,
    error_rate,
    naive_slice_interior,
    normal,
    normals,
    order_boundary,
    orientation,
    scan_slice,
)
from services.spline import SplineMap, assemble, solve


def _line():
    return SplineMap(centers=np.linspace(-1, 1, 5)[:, None], s=np.zeros((5, 2)), a=[[0.0, 0.0], [1.0, 0.0]])


def _even_odd(polygon, point):
    """Horizontal-ray crossing parity."""
    x, y = point
    inside = False
    for (x1, y1), (x2, y2) in zip(polygon, np.roll(polygon, -1, axis=0)):
        if (y1 > y) != (y2 > y):
            if x < x1 + (y - y1) * (x2 - x1) / (y2 - y1):
                inside = not inside
    return inside


def test_normals_of_affine_maps():
    f = SplineMap(centers=np.linspace(0, 1, 4)[:, None], s=np.zeros((4, 2)), a=[[0.0, 0.0], [1.0, 2.0]])
    np.testing.assert_allclose(normal(f, [0.5]), [-2.0, 1.0])
    grid = np.array([[u, v] for u in (0.0, 1.0) for v in (0.0, 1.0)])
    plane = SplineMap(centers=grid, s=np.zeros((4, 3)), a=[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    np.testing.assert_allclose(normal(plane, [0.3, 0.3]), [0.0, 0.0, 1.0])


def test_normals_are_orthogonal_to_tangents():
    rng = np.random.default_rng(0)
    knots = rng.uniform(-1, 1, size=(15, 2))
    f = solve(assemble(knots, rng.normal(size=(15, 3)), np.full(15, 1 / 15)), 0.01)
    t = rng.uniform(-0.5, 0.5, size=(10, 2))
    n = normals(f, t)
    jac = f.jacobian(t)
    np.testing.assert_allclose(np.einsum("mk,mkj->mj", n, jac), 0.0, atol=1e-9)


def test_normals_need_a_hypersurface():
    f = SplineMap(centers=np.linspace(0, 1, 4)[:, None], s=np.zeros((4, 3)), a=np.zeros((2, 3)))
    with pytest.raises(ConfigError):
        normals(f, [0.5])


def test_orientation_sides_of_a_line():
    f = _line()
    above = orientation(f, [0.3, 1.0])
    below = orientation(f, [0.3, -1.0])
    assert above.sign == -1
    assert below.sign == 1
    assert above.foot[0] == pytest.approx(0.3, abs=1e-6)
    assert orientation(f, [0.3, 0.0]).sign == 0


def test_scan_of_a_square():
    square = order_boundary(np.array([[1.0, 1.0], [0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]))
    labels, degenerate = scan_slice(square, [[0.5, -0.5], [0.5, 0.5], [0.5, 1.5], [2.0, 0.5]])
    assert labels.tolist() == [EXTERIOR, INTERIOR, EXTERIOR, EXTERIOR]
    assert not degenerate.any()


def test_scan_line_through_vertices_is_shifted():
    diamond = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])
    labels, degenerate = scan_slice(diamond, [[0.0, 0.0], [0.0, 2.0]])
    assert labels.tolist() == [INTERIOR, EXTERIOR]
    assert not degenerate.any()


def test_scan_matches_ray_casting():
    """Random points against a shuffled, slightly irregular 24-gon."""
    rng = np.random.default_rng(3)
    angles = np.sort(rng.uniform(0, 2 * np.pi, 24))
    radius = 1.0 + 0.1 * rng.uniform(-1, 1, 24)
    ring = np.column_stack([radius * np.cos(angles), radius * np.sin(angles)])
    polygon = order_boundary(ring[rng.permutation(24)])
    queries = rng.uniform(-1.3, 1.3, size=(1000, 2))
    labels, _ = scan_slice(polygon, queries)
    expected = np.array([INTERIOR if _even_odd(polygon, q) else EXTERIOR for q in queries])
    assert np.array_equal(labels, expected)


def test_naive_slices_of_the_sphere():
    cloud = sphere_slices(n_slices=5, per_slice=200, z_limit=0.6, seed=1)
    heights = np.unique(cloud.points[:, 2])
    plane = np.array([[x, y] for x in np.linspace(-1.1, 1.1, 23) for y in np.linspace(-1.1, 1.1, 23)])
    grid = np.vstack([np.column_stack([plane, np.full(len(plane), h)]) for h in heights])
    # one extra layer between slices stays unlabeled
    grid = np.vstack([grid, [[0.0, 0.0, 0.95]]])
    result = naive_slice_interior(cloud, grid)
    assert result.labels[-1] == NO_LABEL
    assert result.provenance[-1] == "unlabeled"
    truth = np.where(np.linalg.norm(grid, axis=1) < 1.0, INTERIOR, EXTERIOR)
    labeled = result.labels != NO_LABEL
    assert np.mean(result.labels[labeled] != truth[labeled]) < 0.03


def test_naive_needs_slices():
    cloud = PointCloud(points=np.random.default_rng(0).normal(size=(10, 3)))
    with pytest.raises(ConfigError):
        naive_slice_interior(cloud, np.zeros((1, 3)))


def test_classify_grid_on_a_ring(ring_fit):
    grid = np.array([[-0.6, 0.0], [-0.9, 0.6], [5.0, 5.0]])
    result = classify_grid(ring_fit, [0.1, 0.05], grid)
    assert result.labels.tolist() == [INTERIOR, EXTERIOR, EXTERIOR]
    assert result.provenance.tolist() == ["scenario-i", "scenario-ii", "box-reject"]


def test_reference_point_on_the_fit_is_rejected(ring_fit):
    with pytest.raises(ClassificationError):
        classify_grid(ring_fit, [1.0, 0.0], np.zeros((1, 2)))


def test_classify_grid_agrees_with_the_unit_disc(ring_fit):
    axis = np.linspace(-1.2, 1.2, 25)
    grid = np.array([[x, y] for x in axis for y in axis])
    result = classify_grid(ring_fit, [0.1, 0.05], grid, threads=2)
    truth = np.where(np.linalg.norm(grid, axis=1) < 1.0, INTERIOR, EXTERIOR)
    assert error_rate(result, truth) < 0.02
    assert set(result.counts()) <= {"box-reject", "scenario-i", "scenario-ii", "knn-fallback"}


def test_agreement_and_error_rate():
    points = np.zeros((4, 3))
    a = GridLabels(points, [1, 0, 1, NO_LABEL], ["slice-scan", "slice-scan", "slice-scan", "unlabeled"])
    b = GridLabels(points, [1, 1, 1, 0], ["scenario-i", "knn-fallback", "scenario-i", "box-reject"])
    assert agreement(a, a) == 1.0
    assert agreement(a, b) == pytest.approx(2 / 3)
    truth = np.array([1, 0, 1, 1])
    assert error_rate(b, truth) == pytest.approx(1 / 3)
    assert error_rate(b, truth, exclude_box_reject=False) == pytest.approx(2 / 4)
    with pytest.raises(GridMismatchError):
        agreement(a, GridLabels(np.ones((4, 3)), [1, 0, 1, 0], ["slice-scan"] * 4))
    with pytest.raises(ConfigError):
        GridLabels(points, [1, 0, 1, 0], ["made-up"] * 4)
