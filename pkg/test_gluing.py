"""
Tests for welding pieces into closed manifolds.
"""

import math

import numpy as np
import pytest

from services.errors import ChartInversionError, ConfigError, DegenerateError, PartitionError
from services.gluing import (
    build_junction,
    fit_closed,
    glue_eval,
    glue_eval_many,
    invert_chart,
    invert_chart_many,
    kappa,
    loop_angles,
    partition_by_angle,
    principal_axes,
    ring_angles,
    sample_junction,
)
from services.pme import PmeOptions
from services.spline import SplineMap, assemble, solve


def test_kappa_is_a_c1_step():
    assert kappa(-1.0) == 1.0
    assert kappa(0.0) == 1.0
    assert kappa(0.5) == pytest.approx(0.5)
    assert kappa(1.0) == 0.0
    assert kappa(2.0) == 0.0
    h = 1e-6
    for z in (0.0, 1.0):
        left = (kappa(z) - kappa(z - h)) / h
        right = (kappa(z + h) - kappa(z)) / h
        assert abs(left) < 1e-5 and abs(right) < 1e-5
    np.testing.assert_allclose(kappa(np.array([0.25, 0.75])), [0.84375, 0.15625])


def test_principal_axes_and_degenerate_overlap():
    rng = np.random.default_rng(0)
    Z = np.column_stack([rng.uniform(-5, 5, 50), rng.uniform(-1, 1, 50), np.zeros(50)])
    R, values = principal_axes(Z, 2)
    assert abs(R[0, 0]) == pytest.approx(1.0, abs=1e-2)
    assert np.all(np.diff(values) <= 0)
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    line = np.column_stack([np.linspace(0, 1, 10)] * 3)
    with pytest.raises(DegenerateError):
        principal_axes(line, 2)


def test_anchor_order_flips_the_gluing_axis():
    rng = np.random.default_rng(1)
    Z = np.column_stack([rng.uniform(-5, 5, 50), rng.uniform(-1, 1, 50), 0.01 * rng.normal(size=50)])
    a, b = Z[np.argmin(Z[:, 0])], Z[np.argmax(Z[:, 0])]
    forward = build_junction(Z, a, b, 0)
    backward = build_junction(Z, b, a, 0)
    np.testing.assert_allclose(forward.R[0], -backward.R[0])
    assert forward.R[0] @ a <= forward.R[0] @ b
    assert forward.b_lower == pytest.approx(-backward.b_upper)
    # the weight runs from the first piece to the second
    assert forward.weight(forward.b_lower) == 1.0
    assert forward.weight(forward.b_upper) == 0.0
    with pytest.raises(ConfigError):
        build_junction(Z, a, a, 0)
    with pytest.raises(ConfigError):
        build_junction(Z, a, b, 2)


def test_invert_chart_on_a_plane():
    grid = np.array([[u, v] for u in (-1.0, 0.0, 1.0) for v in (-1.0, 0.0, 1.0)])
    f = SplineMap(centers=grid, s=np.zeros((9, 3)), a=[[0.0, 0.0, 0.0], [1.0, 0.0, 0.5], [0.0, 1.0, 0.0]])
    t = invert_chart(f, np.eye(3), [0.3, 0.4])
    np.testing.assert_allclose(t, [0.3, 0.4], atol=1e-9)


def test_invert_chart_round_trip(paraboloid_pair):
    f1, _, junction, _ = paraboloid_pair
    for t0 in ([3.0, 4.0], [2.7, 2.5], [3.3, 5.5]):
        t0 = np.array(t0)
        zeta = junction.R[:2] @ f1(t0)
        t = invert_chart(f1, junction.R, zeta, junction.lift, junction.diameter)
        np.testing.assert_allclose(t, t0, atol=1e-6)


def test_folded_chart_fails():
    """Reading y = t^2 as a graph over y: negative heights are unreachable."""
    knots = np.linspace(-2.0, 2.0, 15)
    f = solve(assemble(knots, np.column_stack([knots, knots ** 2]), np.full(15, 1 / 15)), 0.0)
    swap = np.array([[0.0, 1.0], [1.0, 0.0]])
    with pytest.raises(ChartInversionError):
        invert_chart(f, swap, [-1.0])
    t, ok = invert_chart_many(f, swap, np.array([[1.0], [-1.0]]))
    assert ok.tolist() == [True, False]
    assert abs(t[0, 0]) == pytest.approx(1.0, abs=1e-6)
    assert np.isnan(t[1, 0])


def test_glue_matches_pure_branches_on_the_outer_thirds(paraboloid_pair):
    f1, f2, junction, _ = paraboloid_pair
    g = junction.g
    centre = 0.5 * (junction.box_lo + junction.box_hi)
    width = junction.b_upper - junction.b_lower
    scale = junction.diameter
    for share, piece in ((0.1, f1), (0.25, f1), (0.75, f2), (0.9, f2)):
        zeta = centre.copy()
        zeta[g] = junction.b_lower + share * width
        expected = piece(invert_chart(piece, junction.R, zeta, junction.lift, scale))
        np.testing.assert_allclose(glue_eval(f1, f2, junction, zeta), expected, atol=1e-8)


def test_glue_is_a_smooth_weld(paraboloid_pair):
    """One-sided difference quotients along the gluing axis agree at both slab boundaries."""
    f1, f2, junction, _ = paraboloid_pair
    g = junction.g
    centre = 0.5 * (junction.box_lo + junction.box_hi)
    width = junction.b_upper - junction.b_lower
    h = 1e-4 * width
    for boundary in (junction.b_lower + width / 3, junction.b_lower + 2 * width / 3):
        zetas = np.tile(centre, (3, 1))
        zetas[:, g] = [boundary - h, boundary, boundary + h]
        values, ok = glue_eval_many(f1, f2, junction, zetas)
        assert ok.all()
        left = (values[1] - values[0]) / h
        right = (values[2] - values[1]) / h
        assert np.linalg.norm(left - right) <= 1e-4 * np.linalg.norm(left)


def test_glued_values_stay_on_the_surface(paraboloid_pair):
    f1, f2, junction, _ = paraboloid_pair
    lo, hi = junction.box_lo, junction.box_hi
    # central part of the box; its corners lie outside the sampled patch
    axes = [np.linspace(lo[a] + 0.3 * (hi[a] - lo[a]), hi[a] - 0.3 * (hi[a] - lo[a]), 5) for a in range(2)]
    zetas = np.array([[u, v] for u in axes[0] for v in axes[1]])
    values, ok = glue_eval_many(f1, f2, junction, zetas)
    assert ok.all()
    residual = values[:, 2] - values[:, 0] ** 2 - values[:, 1] ** 2
    assert np.max(np.abs(residual)) < 1e-2


def test_ring_junction_samples(ring_fit):
    zetas, values, ok = sample_junction(ring_fit, 0, resolution=11)
    assert zetas.shape == (11, 1)
    assert ok.all()
    np.testing.assert_allclose(np.linalg.norm(values, axis=1), 1.0, atol=1e-3)


def test_partition_reports_empty_sectors():
    angles = np.linspace(0.0, math.pi - 1e-3, 50)
    with pytest.raises(PartitionError):
        partition_by_angle(angles, 4)
    sectors = partition_by_angle(np.linspace(0.0, 2 * math.pi - 1e-3, 60), 3)
    assert np.bincount(sectors).tolist() == [20, 20, 20]


def test_fit_closed_rejects_bad_options():
    X = np.random.default_rng(0).normal(size=(50, 3))
    with pytest.raises(ConfigError):
        fit_closed(X, n_pieces=2)
    with pytest.raises(ConfigError):
        fit_closed(X, n_pieces=6, opts=PmeOptions(d=2), glue_axis=3)


def _circular_span(angles):
    """Length of the shortest arc holding every angle."""
    ordered = np.sort(np.mod(angles, 2 * math.pi))
    gaps = np.diff(np.concatenate([ordered, [ordered[0] + 2 * math.pi]]))
    return 2 * math.pi - gaps.max()


@pytest.fixture(scope="module")
def noisy_ring():
    rng = np.random.default_rng(3)
    tau = rng.uniform(0.0, 2 * math.pi, 400)
    return tau, np.column_stack([np.cos(tau), np.sin(tau)]) + 0.02 * rng.normal(size=(400, 2))


def test_loop_angles_follow_the_circle():
    n = 40
    shuffle = np.random.default_rng(0).permutation(n)
    true = 2 * math.pi * shuffle / n
    nodes = np.column_stack([np.cos(true), np.sin(true)])
    angles = loop_angles(nodes)
    ranks = np.rint(angles * n / (2 * math.pi)).astype(int)
    assert sorted(ranks.tolist()) == list(range(n))
    # walking around the circle moves one rank per node, in one direction, with one wrap
    steps = np.mod(np.diff(ranks[np.argsort(true)]), n)
    assert np.all(steps == 1) or np.all(steps == n - 1)


def test_loop_angles_need_an_arc_left():
    nodes = np.column_stack([np.cos(np.arange(6)), np.sin(np.arange(6))])
    with pytest.raises(DegenerateError):
        loop_angles(nodes, k=5)


def test_ring_angles_give_contiguous_sectors(noisy_ring):
    tau, X = noisy_ring
    sectors = partition_by_angle(ring_angles(X, PmeOptions(d=1)), 4)
    for k in range(4):
        assert _circular_span(tau[sectors == k]) < 0.75 * math.pi


def test_fit_closed_on_a_noisy_ring(noisy_ring):
    _, X = noisy_ring
    cf = fit_closed(X, n_pieces=4, opts=PmeOptions(d=1), lam=math.exp(-8))
    assert cf.n_pieces == 4 and len(cf.fits) == 4
    assert sorted(set(cf.partition.tolist())) == [0, 1, 2, 3]
    for k, junction in enumerate(cf.junctions):
        # junction k sits on sector k+1, the one pieces k and k+1 share
        np.testing.assert_allclose(junction.centroid, X[cf.partition == (k + 1) % 4].mean(axis=0))
        own = X[cf.partition == k].mean(axis=0)
        assert np.linalg.norm(junction.xi1 - own) < np.linalg.norm(junction.xi2 - own)

        weights = junction.weight(np.linspace(junction.b_lower, junction.b_upper, 31))
        assert weights[0] == 1.0 and weights[-1] == 0.0
        assert np.all(np.diff(weights) <= 0)

        _, values, ok = sample_junction(cf, k, resolution=15)
        assert ok.mean() >= 0.9
        np.testing.assert_allclose(np.linalg.norm(values[ok], axis=1), 1.0, atol=0.1)
