"""
Shared fixtures: small closed fits built directly from exact pieces.
"""

import math

import numpy as np
import pytest

from services.dataset import latent_curve_points
from services.gluing import ClosedFit, build_junction, choose_anchors, choose_glue_axis, principal_axes
from services.spline import assemble, solve


def _arc(lo, hi, n):
    angles = np.linspace(lo, hi, n)
    return angles, np.column_stack([np.cos(angles), np.sin(angles)])


@pytest.fixture(scope="session")
def ring_fit():
    """
    Unit circle as three interpolating pieces over 240 degrees each.

    Junction k is the 120-degree arc shared by pieces k and k+1.
    """
    third = 2 * math.pi / 3
    pieces, junctions = [], []
    for k in range(3):
        knots, targets = _arc(k * third, (k + 2) * third, 25)
        pieces.append(solve(assemble(knots, targets, np.full(25, 1 / 25)), 0.0))
    for k in range(3):
        _, Z = _arc((k + 1) * third, (k + 2) * third, 40)
        _, first_side = _arc(k * third, (k + 1) * third, 40)
        R, _ = principal_axes(Z, 1)
        xi1, xi2 = choose_anchors(R, Z, 0, first_side)
        junctions.append(build_junction(Z, xi1, xi2, 0, 1))
    return ClosedFit(pieces=pieces, junctions=junctions, partition=np.repeat(np.arange(3), 40))


@pytest.fixture(scope="session")
def paraboloid_pair():
    """
    Two pieces of z = x^2 + y^2 overlapping on 2.5 <= x <= 3.5, with their junction.

    Returns (f1, f2, junction, overlap points).
    """
    rng = np.random.default_rng(0)
    tau = np.column_stack([rng.uniform(2.0, 4.0, 400), rng.uniform(2.0, 6.0, 400)])
    clean = latent_curve_points("glue-paraboloid-3d", tau)
    first = tau[:, 0] <= 3.5
    second = tau[:, 0] >= 2.5
    f1 = solve(assemble(tau[first], clean[first], np.full(first.sum(), 1 / first.sum())), 1e-6)
    f2 = solve(assemble(tau[second], clean[second], np.full(second.sum(), 1 / second.sum())), 1e-6)

    Z = clean[first & second]
    R, _ = principal_axes(Z, 2)
    g = choose_glue_axis(R, Z, clean, 2)
    xi1, xi2 = choose_anchors(R, Z, g, clean[~second])
    return f1, f2, build_junction(Z, xi1, xi2, g, 2), Z
