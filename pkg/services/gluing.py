"""
Closed manifolds from a ring of overlapping pieces.

Two fitted pieces are welded over the data they share: the overlap is rotated to its
principal axes, both pieces are read as graphs over the first d rotated coordinates, and
a C^1 weight along one rotated axis hands over from the first piece to the second.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.sparse.csgraph import shortest_path
from scipy.spatial import cKDTree

from services import hdmde as hdmde_service
from services import isomap as isomap_service
from services.errors import ChartInversionError, ConfigError, DegenerateError, PartitionError
from services.pme import FitResult, PmeOptions, pme_fit, select_lambda
from services.projection import ProjectionOptions, project_many
from services.spline import SplineMap
from services.workers import parallel_map

# Настройка логирования
logger = logging.getLogger(__name__)

NEWTON_MAX_ITER = 50
NEWTON_MAX_HALVINGS = 30
INVERSION_TOL = 1e-8


def kappa(z):
    """Smooth step: 1 - 3z^2 + 2z^3 on (0, 1), 1 for z <= 0 and 0 for z >= 1."""
    z = np.asarray(z, dtype=float)
    inner = 1.0 - 3.0 * z ** 2 + 2.0 * z ** 3
    out = np.where(z <= 0.0, 1.0, np.where(z >= 1.0, 0.0, inner))
    return float(out) if out.ndim == 0 else out


@dataclass
class GlueJunction:
    """
    Gluing data for one pair of adjacent pieces.

    Attributes:
        R: D x D rotation, rows are principal axes of the overlap.
        g: Gluing axis, 0-based index among the first d rotated coordinates.
        d: Intrinsic dimension.
        box_lo, box_hi: Rotated-coordinate box of the overlap (length d).
        xi1, xi2: Orientation anchors.
        lift: Mean of the rotated overlap on coordinates d..D-1.
        data_lo, data_hi: Axis-aligned bounding box of the overlap in original coordinates.
        centroid: Overlap centroid in original coordinates.
    """

    R: np.ndarray
    g: int
    d: int
    box_lo: np.ndarray
    box_hi: np.ndarray
    xi1: np.ndarray
    xi2: np.ndarray
    lift: np.ndarray
    data_lo: np.ndarray
    data_hi: np.ndarray
    centroid: np.ndarray

    @property
    def b_lower(self) -> float:
        return float(self.box_lo[self.g])

    @property
    def b_upper(self) -> float:
        return float(self.box_hi[self.g])

    def weight(self, zeta_g):
        """K(zeta_g) = kappa((zeta_g - (2/3 B_L + 1/3 B_U)) / ((B_U - B_L)/3))."""
        lower, upper = self.b_lower, self.b_upper
        return kappa((np.asarray(zeta_g, dtype=float) - (2.0 * lower + upper) / 3.0) / ((upper - lower) / 3.0))

    def rotated(self, X) -> np.ndarray:
        return np.atleast_2d(np.asarray(X, dtype=float)) @ self.R.T

    def contains(self, X) -> np.ndarray:
        """Mask of points inside the original-coordinate overlap box."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.all((X >= self.data_lo) & (X <= self.data_hi), axis=1)

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.box_hi - self.box_lo))


@dataclass
class ClosedFit:
    """Ring of pieces; junction k glues piece k to piece k+1 (the last to the first)."""

    pieces: List[SplineMap]
    junctions: List[GlueJunction]
    partition: np.ndarray
    fits: List[FitResult] = field(default_factory=list)

    def __post_init__(self):
        if len(self.pieces) != len(self.junctions) or len(self.pieces) < 2:
            raise ConfigError("a closed fit needs one junction per piece and at least two pieces")

    @property
    def n_pieces(self) -> int:
        return len(self.pieces)

    @property
    def d(self) -> int:
        return self.pieces[0].d

    def pair(self, k: int) -> Tuple[SplineMap, SplineMap]:
        return self.pieces[k], self.pieces[(k + 1) % self.n_pieces]


def principal_axes(Z, d: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Rotation whose rows are the eigenvectors of the covariance of Z, descending.

    Each row is signed so that its largest-magnitude entry is positive.

    Raises:
        DegenerateError: If fewer than d directions carry variance.
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    centered = Z - Z.mean(axis=0)
    cov = centered.T @ centered / max(Z.shape[0] - 1, 1)
    values, vectors = np.linalg.eigh(cov)
    order = np.argsort(values)[::-1]
    values, R = values[order], vectors[:, order].T.copy()
    if values[0] <= 0 or values[d - 1] <= 1e-12 * values[0]:
        raise DegenerateError(f"overlap region is degenerate: covariance rank below d={d}")
    for row in R:
        lead = np.argmax(np.abs(row))
        if row[lead] < 0:
            row *= -1.0
    return R, values


def build_junction(Z, xi1, xi2, g: int, d: Optional[int] = None) -> GlueJunction:
    """
    Gluing data of an overlap.

    Args:
        Z: Overlap points, at least D + 1 of them.
        xi1, xi2: Anchors; after the flip rule (R xi1)_g <= (R xi2)_g.
        g: 0-based gluing axis among the first d rotated coordinates.
        d: Intrinsic dimension; None is D - 1.

    Returns:
        GlueJunction: Rotation, box and weight bounds.
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    dim = Z.shape[1]
    d = dim - 1 if d is None else d
    xi1 = np.asarray(xi1, dtype=float)
    xi2 = np.asarray(xi2, dtype=float)
    if Z.shape[0] < dim + 1:
        raise DegenerateError(f"overlap needs at least {dim + 1} points, has {Z.shape[0]}")
    if np.allclose(xi1, xi2):
        raise ConfigError("orientation anchors must differ")
    if not 0 <= g < d:
        raise ConfigError(f"gluing axis must lie in 1..{d}")
    R, _ = principal_axes(Z, d)
    if (R[g] @ xi1) > (R[g] @ xi2):
        R[g] = -R[g]
    rotated = Z @ R.T
    box_lo = rotated[:, :d].min(axis=0)
    box_hi = rotated[:, :d].max(axis=0)
    if box_hi[g] <= box_lo[g]:
        raise DegenerateError("overlap has no extent along the gluing axis")
    return GlueJunction(
        R=R, g=g, d=d, box_lo=box_lo, box_hi=box_hi, xi1=xi1, xi2=xi2,
        lift=rotated[:, d:].mean(axis=0), data_lo=Z.min(axis=0), data_hi=Z.max(axis=0),
        centroid=Z.mean(axis=0),
    )


def invert_chart_many(
    f: SplineMap,
    R: np.ndarray,
    zetas,
    lift: Optional[np.ndarray] = None,
    scale: float = 1.0,
    projection: Optional[ProjectionOptions] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Solves P_d(R f(t)) = zeta for many zeta by damped Newton.

    Starts come from projecting the lifted points R^T (zeta, lift) onto f. A point
    succeeds when its chart residual ends at or below 1e-8 x scale.

    Returns:
        tuple: (M x d parameters, success mask).
    """
    zetas = np.atleast_2d(np.asarray(zetas, dtype=float))
    d, dim = f.d, f.D
    m = zetas.shape[0]
    if m == 0:
        return np.zeros((0, d)), np.zeros(0, dtype=bool)
    lift = np.zeros(dim - d) if lift is None else np.asarray(lift, dtype=float)
    tol = INVERSION_TOL * scale
    Rd = np.asarray(R, dtype=float)[:d]

    lifted = np.hstack([zetas, np.broadcast_to(lift, (m, dim - d))]) @ R
    t, _ = project_many(f, lifted, projection)
    residual = f.evaluate(t) @ Rd.T - zetas
    # 0 running, 1 solved, 2 failed
    status = np.zeros(m, dtype=int)

    for _ in range(NEWTON_MAX_ITER):
        act = np.flatnonzero(status == 0)
        if act.size == 0:
            break
        norms = np.linalg.norm(residual[act], axis=1)
        tight = norms <= 1e-2 * tol
        status[act[tight]] = 1
        act = act[~tight]
        if act.size == 0:
            break
        jac = np.einsum("lk,mkj->mlj", Rd, f.jacobian(t[act]).reshape(-1, dim, d))
        col_norms = np.prod(np.linalg.norm(jac, axis=1), axis=1)
        singular = np.abs(np.linalg.det(jac)) <= 1e-12 * np.maximum(col_norms, 1e-300)
        status[act[singular]] = np.where(norms[~tight][singular] <= tol, 1, 2)
        act, jac = act[~singular], jac[~singular]
        if act.size == 0:
            break
        step = np.zeros_like(t)
        step[act] = -np.linalg.solve(jac, residual[act][:, :, None])[:, :, 0]

        pending = act
        for _ in range(NEWTON_MAX_HALVINGS):
            if pending.size == 0:
                break
            trial = t[pending] + step[pending]
            trial_res = f.evaluate(trial) @ Rd.T - zetas[pending]
            better = np.linalg.norm(trial_res, axis=1) < np.linalg.norm(residual[pending], axis=1)
            accepted = pending[better]
            t[accepted] = trial[better]
            residual[accepted] = trial_res[better]
            pending = pending[~better]
            step[pending] *= 0.5
        # no descent left: accept if already within tolerance
        if pending.size:
            status[pending] = np.where(np.linalg.norm(residual[pending], axis=1) <= tol, 1, 2)

    running = np.flatnonzero(status == 0)
    if running.size:
        status[running] = np.where(np.linalg.norm(residual[running], axis=1) <= tol, 1, 2)
    ok = status == 1
    t[~ok] = np.nan
    return t, ok


def invert_chart(f: SplineMap, R: np.ndarray, zeta, lift: Optional[np.ndarray] = None,
                 scale: float = 1.0, projection: Optional[ProjectionOptions] = None) -> np.ndarray:
    """
    Parameter t with P_d(R f(t)) = zeta.

    Raises:
        ChartInversionError: If Newton stalls or meets a singular chart jacobian.
    """
    t, ok = invert_chart_many(f, R, np.atleast_1d(np.asarray(zeta, dtype=float))[None, :], lift, scale, projection)
    if not ok[0]:
        raise ChartInversionError(
            f"chart inversion failed at zeta={np.asarray(zeta).tolist()}: the piece is not a graph over the "
            f"rotated coordinate plane there"
        )
    return t[0]


def glue_eval_many(f1: SplineMap, f2: SplineMap, junction: GlueJunction, zetas,
                   projection: Optional[ProjectionOptions] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Blended map G(zeta) = K f1(chart1^-1(zeta)) + (1 - K) f2(chart2^-1(zeta)) at many zeta.

    Only the branches with nonzero weight are inverted.

    Returns:
        tuple: (M x D values, success mask).
    """
    zetas = np.atleast_2d(np.asarray(zetas, dtype=float))
    weight = np.atleast_1d(junction.weight(zetas[:, junction.g]))
    values = np.zeros((zetas.shape[0], f1.D))
    ok = np.ones(zetas.shape[0], dtype=bool)
    scale = junction.diameter
    for f, w in ((f1, weight), (f2, 1.0 - weight)):
        need = np.flatnonzero(w > 0)
        if need.size == 0:
            continue
        t, solved = invert_chart_many(f, junction.R, zetas[need], junction.lift, scale, projection)
        ok[need[~solved]] = False
        good = need[solved]
        values[good] += w[good, None] * f.evaluate(t[solved]).reshape(-1, f.D)
    values[~ok] = np.nan
    return values, ok


def glue_eval(f1: SplineMap, f2: SplineMap, junction: GlueJunction, zeta,
              projection: Optional[ProjectionOptions] = None) -> np.ndarray:
    """
    Blended map at one zeta in the junction box.

    Raises:
        ChartInversionError: If a needed chart cannot be inverted.
    """
    values, ok = glue_eval_many(f1, f2, junction, np.atleast_1d(np.asarray(zeta, dtype=float))[None, :], projection)
    if not ok[0]:
        raise ChartInversionError(f"glue evaluation failed at zeta={np.asarray(zeta).tolist()}")
    return values[0]


def choose_glue_axis(R: np.ndarray, Z, union, d: int) -> int:
    """
    Rotated axis (0-based, among the first d) on which the overlap covers the smallest
    share of the extent of both pieces together; d - 1 without a two-piece extent.
    """
    if union is None or d == 1:
        return d - 1
    rz = np.atleast_2d(Z) @ R[:d].T
    ru = np.atleast_2d(union) @ R[:d].T
    share = np.ptp(rz, axis=0) / np.maximum(np.ptp(ru, axis=0), 1e-300)
    return int(np.argmin(share))


def choose_anchors(R: np.ndarray, Z, g: int, first_side=None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Overlap points extremal along rotated axis g; the first one lies nearer the data
    only the first piece covers.
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    along = Z @ R[g]
    low, high = Z[int(np.argmin(along))], Z[int(np.argmax(along))]
    if first_side is not None and len(first_side):
        centre = np.atleast_2d(first_side).mean(axis=0)
        if np.linalg.norm(high - centre) < np.linalg.norm(low - centre):
            return high, low
    return low, high


def loop_angles(nodes, k: Optional[int] = None, threads: Optional[int] = 1) -> np.ndarray:
    """
    Angle in [0, 2 pi) of every node of a closed curve, from its wrapped 1-D ISOMAP parameter.

    The neighbour graph is cut open at node 0 by removing that node with its neighbours.
    The remaining arc is ordered by its 1-D ISOMAP parameter, the removed nodes follow the
    arc's upper end by their geodesic distance from it inside the cut, and the ranks of
    this cyclic order are spread evenly over [0, 2 pi).

    Raises:
        DegenerateError: If the cut leaves fewer than two nodes.
        GraphDisconnectedError: If the remaining arc falls apart.
    """
    nodes = np.atleast_2d(np.asarray(nodes, dtype=float))
    n = nodes.shape[0]
    k = isomap_service.default_k(n, 1) if k is None else k
    graph = isomap_service.knn_graph(nodes, min(k, n - 1))
    matrix = graph.matrix
    cut = np.union1d([0], matrix.indices[matrix.indptr[0]:matrix.indptr[1]])
    arc = np.setdiff1d(np.arange(n), cut)
    if arc.size < 2:
        raise DegenerateError(f"cutting the loop at one node leaves {arc.size} of {n} nodes; lower the neighbour count")

    arc_graph = isomap_service.NeighborGraph(matrix=matrix[arc][:, arc].tocsr(), k=graph.k)
    arc_param = isomap_service.classical_mds(isomap_service.geodesic_distances(arc_graph, threads), 1)[:, 0]
    end = arc[int(np.argmax(arc_param))]

    gap = np.concatenate([[end], cut])
    from_end = shortest_path(matrix[gap][:, gap].tocsr(), method="D", directed=False, indices=0)[1:]
    if not np.all(np.isfinite(from_end)):
        # the cut is not connected to the arc's end inside itself
        from_end = np.linalg.norm(nodes[cut] - nodes[end], axis=1)

    order = np.concatenate([arc[np.argsort(arc_param, kind="stable")], cut[np.argsort(from_end, kind="stable")]])
    angles = np.empty(n)
    angles[order] = 2 * math.pi * np.arange(n) / n
    return angles


def ring_angles(X, opts: PmeOptions) -> np.ndarray:
    """
    Polar angle in [0, 2 pi) of every point.

    Angles are computed for the reduced nodes and each point takes the angle of its
    nearest node. For a surface (d = 2) the nodes are embedded in the plane by ISOMAP
    and a punched sphere maps to an annulus around the centre of the parameters. For a
    closed curve (d = 1) the angle is the rank of the wrapped 1-D parameter (`loop_angles`).
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    waj, _ = hdmde_service.hdmde(
        X, n0=opts.n0, alpha=opts.alpha, eps=opts.eps, max_iter=opts.max_em_iter,
        n_max=opts.n_max, seed=opts.seed, constraint_tol=opts.constraint_tol,
    )
    if opts.d == 1:
        node_angle = loop_angles(waj.nodes, k=opts.isomap_k, threads=opts.threads)
    else:
        params = isomap_service.isomap(waj.nodes, 2, k=opts.isomap_k, threads=opts.threads)
        node_angle = np.mod(np.arctan2(params[:, 1], params[:, 0]), 2 * math.pi)
    _, nearest = cKDTree(waj.nodes).query(X)
    return node_angle[nearest]


def partition_by_angle(angles, n_pieces: int) -> np.ndarray:
    """Sector index of every angle for n_pieces equal sectors of width 2 pi / n_pieces."""
    width = 2 * math.pi / n_pieces
    sectors = np.minimum(np.floor(np.asarray(angles) / width).astype(int), n_pieces - 1)
    counts = np.bincount(sectors, minlength=n_pieces)
    if np.any(counts == 0):
        empty = np.flatnonzero(counts == 0).tolist()
        raise PartitionError(f"angular sectors {empty} are empty; use fewer pieces", {"counts": counts.tolist()})
    return sectors


def fit_closed(
    X,
    n_pieces: int = 6,
    opts: Optional[PmeOptions] = None,
    lam: Optional[float] = None,
    lambda_grid: Optional[List[float]] = None,
    glue_axis: Optional[int] = None,
) -> ClosedFit:
    """
    Fits a closed manifold as a glued ring of pieces.

    Args:
        X: I x D data.
        n_pieces: Number of angular sectors, at least 3.
        opts: Options of every piece fit; `opts.d` is the intrinsic dimension.
        lam: Smoothing parameter of every piece; None selects it per piece over `lambda_grid`.
        glue_axis: 1-based gluing axis override.

    Returns:
        ClosedFit: Pieces, junctions and the per-point sector assignment.
    """
    opts = opts or PmeOptions(d=2)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    d = opts.d
    if n_pieces < 3:
        raise ConfigError("a closed fit needs at least 3 pieces")
    if glue_axis is not None and not 1 <= glue_axis <= d:
        raise ConfigError(f"gluing axis must lie in 1..{d}")

    sectors = partition_by_angle(ring_angles(X, opts), n_pieces)
    logger.info(f"fit_closed: {n_pieces} sectors, sizes {np.bincount(sectors, minlength=n_pieces).tolist()}")

    def members(*ks):
        return np.isin(sectors, [k % n_pieces for k in ks])

    def fit_piece(k):
        data = X[members(k, k + 1)]
        if lam is None:
            _, fit = select_lambda(data, opts, lambda_grid)
        else:
            fit = pme_fit(data, lam, opts)
        logger.info(f"fit_closed: piece {k} on {data.shape[0]} points, msd={fit.msd:.4e}")
        return fit

    fits = parallel_map(fit_piece, range(n_pieces), opts.threads)

    junctions = []
    for k in range(n_pieces):
        Z = X[members(k + 1)]
        R, _ = principal_axes(Z, d)
        g = glue_axis - 1 if glue_axis is not None else choose_glue_axis(R, Z, X[members(k, k + 1, k + 2)], d)
        xi1, xi2 = choose_anchors(R, Z, g, X[members(k)])
        junctions.append(build_junction(Z, xi1, xi2, g, d))
    return ClosedFit(pieces=[fit.f for fit in fits], junctions=junctions, partition=sectors, fits=fits)


def sample_junction(cf: ClosedFit, k: int, resolution: int = 20) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Glued values on a regular grid over junction k's box.

    Returns:
        tuple: (grid of zeta, values, success mask).
    """
    junction = cf.junctions[k]
    axes = [np.linspace(junction.box_lo[a], junction.box_hi[a], resolution) for a in range(junction.d)]
    mesh = np.meshgrid(*axes, indexing="ij")
    zetas = np.stack([m.ravel() for m in mesh], axis=1)
    f1, f2 = cf.pair(k)
    values, ok = glue_eval_many(f1, f2, junction, zetas)
    return zetas, values, ok
