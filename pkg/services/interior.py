"""
Interior identification for closed fits.

A point is interior when its orientation with respect to a piece (the sign of the
foot-to-point vector against the piece normal) agrees with that of a reference point.
Grid points are resolved per junction box; undecided points are voted by their nearest
decided neighbours. The slice-scan method labels points between boundary crossings of
vertical lines drawn through per-slice polygons.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
from sklearn.neighbors import NearestNeighbors

from services.dataset import EXTERIOR, INTERIOR, NO_LABEL, PointCloud
from services.errors import ClassificationError, ConfigError, GridMismatchError
from services.gluing import ClosedFit
from services.projection import ProjectionOptions, project_many
from services.spline import SplineMap
from services.workers import parallel_map

# Настройка логирования
logger = logging.getLogger(__name__)

SIGN_TOL = 1e-9
LINE_PERTURBATION = 1e-9
DEFAULT_VOTES = 10

PROVENANCES = ("box-reject", "scenario-i", "scenario-ii", "knn-fallback", "slice-scan", "degenerate", "unlabeled")


@dataclass
class OrientationResult:
    """Orientation of one point: sign in {-1, 0, 1}, foot parameter and normal at the foot."""

    sign: int
    foot: np.ndarray
    normal: np.ndarray
    degenerate: bool = False


@dataclass
class GridLabels:
    """
    Labels of grid points.

    Attributes:
        points: M x D grid.
        labels: INTERIOR, EXTERIOR or NO_LABEL per point.
        provenance: How each label was decided, one of PROVENANCES.
    """

    points: np.ndarray
    labels: np.ndarray
    provenance: np.ndarray

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        self.labels = np.asarray(self.labels, dtype=int)
        self.provenance = np.asarray(self.provenance, dtype=object)
        m = self.points.shape[0]
        if self.labels.shape != (m,) or self.provenance.shape != (m,):
            raise ConfigError("labels and provenance need one entry per grid point")
        unknown = set(self.provenance.tolist()) - set(PROVENANCES)
        if unknown:
            raise ConfigError(f"unknown provenance values: {sorted(unknown)}")

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def counts(self) -> Dict[str, int]:
        values, counts = np.unique(self.provenance.astype(str), return_counts=True)
        return {str(v): int(c) for v, c in zip(values, counts)}


# ---------------------------------------------------------------------------
# Normals and orientation


def normals(f: SplineMap, t) -> np.ndarray:
    """
    Normal vectors from the analytic jacobian.

    (d, D) = (1, 2): (-f2', f1'); (2, 3): df/dt1 x df/dt2.

    Returns:
        np.ndarray: M x D normals (unnormalized).

    Raises:
        ConfigError: For other (d, D) combinations.
    """
    if (f.d, f.D) not in ((1, 2), (2, 3)):
        raise ConfigError(f"normals are defined for (d, D) in {{(1, 2), (2, 3)}}, got ({f.d}, {f.D})")
    t = np.asarray(t, dtype=float).reshape(-1, f.d)
    jac = f.jacobian(t)
    if f.d == 1:
        return np.stack([-jac[:, 1, 0], jac[:, 0, 0]], axis=1)
    return np.cross(jac[:, :, 0], jac[:, :, 1])


def normal(f: SplineMap, t) -> np.ndarray:
    return normals(f, t)[0]


def orientations(f: SplineMap, X, projection: Optional[ProjectionOptions] = None
                 ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Orientation signs of many points.

    Returns:
        tuple: (signs, M x d feet, M x D normals). A sign is 0 when the point lies on the
        piece or the normal is degenerate.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    feet, _ = project_many(f, X, projection)
    n = normals(f, feet)
    diff = f.evaluate(feet).reshape(-1, f.D) - X
    inner = np.einsum("ij,ij->i", diff, n)
    diff_norm = np.linalg.norm(diff, axis=1)
    n_norm = np.linalg.norm(n, axis=1)
    zero = (np.abs(inner) <= SIGN_TOL * diff_norm * n_norm) | (
        diff_norm <= SIGN_TOL * np.maximum(1.0, np.linalg.norm(X, axis=1))
    )
    signs = np.where(zero, 0, np.sign(inner)).astype(int)
    return signs, feet, n


def orientation(f: SplineMap, xi, projection: Optional[ProjectionOptions] = None) -> OrientationResult:
    """Orientation of xi with respect to f."""
    signs, feet, n = orientations(f, np.asarray(xi, dtype=float).reshape(1, -1), projection)
    return OrientationResult(sign=int(signs[0]), foot=feet[0], normal=n[0],
                             degenerate=bool(np.linalg.norm(n[0]) == 0.0))


# ---------------------------------------------------------------------------
# Closed-fit grid classification


def _assign_boxes(cf: ClosedFit, grid: np.ndarray) -> np.ndarray:
    """Junction index per grid point; -1 outside every box. Ties go to the nearest overlap centroid."""
    inside = np.stack([j.contains(grid) for j in cf.junctions], axis=1)
    centroids = np.stack([j.centroid for j in cf.junctions])
    dist = np.linalg.norm(grid[:, None, :] - centroids[None, :, :], axis=2)
    dist = np.where(inside, dist, np.inf)
    box = np.argmin(dist, axis=1)
    box[~inside.any(axis=1)] = -1
    return box


def _vote(train_points, train_labels, query, k_votes):
    k = min(k_votes, train_points.shape[0])
    nn = NearestNeighbors(n_neighbors=k).fit(train_points)
    _, idx = nn.kneighbors(query)
    interior_votes = np.sum(train_labels[idx] == INTERIOR, axis=1)
    # an even split is exterior
    return np.where(2 * interior_votes > k, INTERIOR, EXTERIOR)


def classify_grid(
    cf: ClosedFit,
    c_star,
    grid,
    k_votes: int = DEFAULT_VOTES,
    projection: Optional[ProjectionOptions] = None,
    threads: Optional[int] = 1,
) -> GridLabels:
    """
    Labels grid points interior or exterior to a closed fit.

    Args:
        cf: Glued ring of pieces.
        c_star: Reference point on the interior side.
        grid: M x D grid points.
        k_votes: Neighbours consulted for undecided points.

    Returns:
        GridLabels: One label and provenance per grid point.

    Raises:
        ClassificationError: If c_star lies on a piece, or a box has undecided points but
            no decided ones to vote from.
    """
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    c_star = np.asarray(c_star, dtype=float).reshape(1, -1)
    if grid.shape[1] != cf.pieces[0].D or c_star.shape[1] != grid.shape[1]:
        raise ConfigError("grid, reference point and fit must share the ambient dimension")
    if k_votes < 1:
        raise ConfigError("k_votes must be positive")

    labels = np.full(grid.shape[0], EXTERIOR, dtype=int)
    provenance = np.full(grid.shape[0], "box-reject", dtype=object)
    box = _assign_boxes(cf, grid)

    ref_signs = []
    for k, f in enumerate(cf.pieces):
        sign = orientations(f, c_star, projection)[0][0]
        if sign == 0:
            raise ClassificationError(f"reference point lies on piece {k}; pick a point off the fit")
        ref_signs.append(sign)

    def run(k):
        members = np.flatnonzero(box == k)
        if members.size == 0:
            return members, None, None
        pts = grid[members]
        nxt = (k + 1) % cf.n_pieces
        in_first = orientations(cf.pieces[k], pts, projection)[0] * ref_signs[k] > 0
        in_second = orientations(cf.pieces[nxt], pts, projection)[0] * ref_signs[nxt] > 0
        box_labels = np.where(in_first & in_second, INTERIOR, EXTERIOR)
        box_prov = np.where(in_first & in_second, "scenario-i",
                            np.where(~in_first & ~in_second, "scenario-ii", "knn-fallback")).astype(object)
        undecided = box_prov == "knn-fallback"
        if undecided.any():
            decided = ~undecided
            if not decided.any():
                raise ClassificationError(
                    f"box {k} has {int(undecided.sum())} undecided points and no decided ones to vote from"
                )
            box_labels[undecided] = _vote(pts[decided], box_labels[decided], pts[undecided], k_votes)
        return members, box_labels, box_prov

    for members, box_labels, box_prov in parallel_map(run, range(cf.n_pieces), threads):
        if box_labels is not None:
            labels[members] = box_labels
            provenance[members] = box_prov

    result = GridLabels(points=grid, labels=labels, provenance=provenance)
    logger.info(f"classify_grid: {grid.shape[0]} points, {result.counts()}")
    return result


# ---------------------------------------------------------------------------
# Slice scan


def order_boundary(points: np.ndarray) -> np.ndarray:
    """Boundary points sorted by angle around their centroid."""
    centre = points.mean(axis=0)
    angles = np.arctan2(points[:, 1] - centre[1], points[:, 0] - centre[0])
    return points[np.argsort(angles, kind="stable")]


def _line_crossings(polygon: np.ndarray, x: float, tol: float) -> Optional[np.ndarray]:
    """
    Sorted y of the crossings of the vertical line at x with a closed polygon.

    Returns None when the line passes through a vertex or the crossing count is odd.
    """
    if np.any(np.abs(polygon[:, 0] - x) <= tol):
        return None
    p, q = polygon, np.roll(polygon, -1, axis=0)
    lo, hi = np.minimum(p[:, 0], q[:, 0]), np.maximum(p[:, 0], q[:, 0])
    hit = (lo < x) & (x < hi)
    if not hit.any():
        return np.zeros(0)
    p, q = p[hit], q[hit]
    y = p[:, 1] + (x - p[:, 0]) * (q[:, 1] - p[:, 1]) / (q[:, 0] - p[:, 0])
    if y.size % 2:
        return None
    return np.sort(y)


def scan_slice(boundary, queries) -> Tuple[np.ndarray, np.ndarray]:
    """
    Labels 2-D query points against the closed polygon through the ordered boundary.

    Points between the (1st, 2nd), (3rd, 4th), ... crossings of their vertical line are
    interior. A line through a vertex is shifted once by 1e-9 x extent; lines still
    degenerate after that are flagged.

    Returns:
        tuple: (labels, degenerate mask).
    """
    polygon = np.asarray(boundary, dtype=float)
    queries = np.atleast_2d(np.asarray(queries, dtype=float))
    extent = float(np.ptp(polygon, axis=0).max()) or 1.0
    tol = 1e-12 * extent
    labels = np.full(queries.shape[0], EXTERIOR, dtype=int)
    degenerate = np.zeros(queries.shape[0], dtype=bool)
    for x in np.unique(queries[:, 0]):
        on_line = np.flatnonzero(queries[:, 0] == x)
        crossings = _line_crossings(polygon, x, tol)
        if crossings is None:
            crossings = _line_crossings(polygon, x + LINE_PERTURBATION * extent, tol)
        if crossings is None:
            degenerate[on_line] = True
            continue
        y = queries[on_line, 1]
        pairs = crossings.reshape(-1, 2)
        inside = np.any((y[:, None] >= pairs[None, :, 0]) & (y[:, None] <= pairs[None, :, 1]), axis=1)
        labels[on_line] = np.where(inside, INTERIOR, EXTERIOR)
    return labels, degenerate


def naive_slice_interior(cloud: PointCloud, grid, slice_tol: Optional[float] = None) -> GridLabels:
    """
    Slice-scan labels of grid points.

    Each slice of `cloud` is a ring of boundary points at a common height (last
    coordinate). Grid points at a slice height are labeled against that slice's polygon
    in the first two coordinates; other grid points stay unlabeled.

    Args:
        cloud: Slice-tagged boundary points in R^3.
        grid: M x 3 grid points.
        slice_tol: Height tolerance; None is 1e-9 x grid extent.
    """
    if cloud.slice_ids is None:
        raise ConfigError("the slice scan needs slice-tagged input")
    if cloud.D != 3:
        raise ConfigError(f"the slice scan needs D = 3, got D = {cloud.D}")
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    if grid.shape[1] != 3:
        raise ConfigError("grid points must be 3-dimensional")
    extent = max(float(np.ptp(np.vstack([grid, cloud.points]), axis=0).max()), 1.0)
    tol = slice_tol if slice_tol is not None else 1e-9 * extent

    labels = np.full(grid.shape[0], NO_LABEL, dtype=int)
    provenance = np.full(grid.shape[0], "unlabeled", dtype=object)
    for sid in np.unique(cloud.slice_ids):
        ring = cloud.points[cloud.slice_ids == sid]
        if ring.shape[0] < 3:
            logger.warning(f"slice {sid} has {ring.shape[0]} boundary points; skipped")
            continue
        height = float(ring[:, 2].mean())
        members = np.flatnonzero(np.abs(grid[:, 2] - height) <= tol)
        if members.size == 0:
            continue
        slice_labels, degenerate = scan_slice(order_boundary(ring[:, :2]), grid[members, :2])
        labels[members] = np.where(degenerate, EXTERIOR, slice_labels)
        provenance[members] = np.where(degenerate, "degenerate", "slice-scan")
        if degenerate.any():
            logger.warning(f"slice {sid}: {int(degenerate.sum())} points on degenerate scan lines")
    result = GridLabels(points=grid, labels=labels, provenance=provenance)
    logger.info(f"naive_slice_interior: {result.counts()}")
    return result


# ---------------------------------------------------------------------------
# Metrics


def agreement(a: GridLabels, b: GridLabels) -> float:
    """
    Share of points given the same label by both labelings, among points both labeled.

    Raises:
        GridMismatchError: If the grids differ.
    """
    if a.points.shape != b.points.shape or not np.allclose(a.points, b.points, rtol=0.0, atol=1e-12):
        raise GridMismatchError("labelings were computed on different grids")
    both = (a.labels != NO_LABEL) & (b.labels != NO_LABEL)
    if not both.any():
        raise GridMismatchError("no grid point is labeled by both methods")
    return float(np.mean(a.labels[both] == b.labels[both]))


def error_rate(labels: GridLabels, truth, exclude_box_reject: bool = True) -> float:
    """Share of mislabeled points; box-rejected and unlabeled points are left out on request."""
    truth = np.asarray(truth, dtype=int)
    if truth.shape != labels.labels.shape:
        raise GridMismatchError("truth labels do not match the grid")
    keep = labels.labels != NO_LABEL
    if exclude_box_reject:
        keep &= labels.provenance != "box-reject"
    if not keep.any():
        return 0.0
    return float(np.mean(labels.labels[keep] != truth[keep]))
