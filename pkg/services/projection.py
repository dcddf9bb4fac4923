"""
Projection index and distance to a fitted manifold.

The nearest parameter is searched inside a box: a coarse grid is evaluated once per map,
each point starts damped Gauss-Newton descents from selected grid nodes, and among the
local minima within the tie tolerance of the best one the lexicographically largest
parameter is returned.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.ndimage import minimum_filter
from scipy.spatial.distance import cdist

from services.errors import ConfigError, ProjectionError
from services.spline import SplineMap

# Настройка логирования
logger = logging.getLogger(__name__)

DEFAULT_GRID0 = {1: 30, 2: 15, 3: 8}
# cap on (point, start) pairs refined together
MAX_BATCH_STATES = 200_000
MAX_GRID_CELLS = 2_000_000


@dataclass
class ProjectionOptions:
    """
    Search settings for the projection index.

    Attributes:
        box: (lo, hi) arrays of length d; None covers the knots with `inflate` margin.
        grid0: Coarse grid nodes per axis; None picks 30 / 15 / 8 for d = 1 / 2 / 3.
        refine_tol: Parameter step tolerance; None is 1e-8 x box diameter.
        tie_tol: Relative distance tolerance for near-ties.
        inflate: Margin added on each side of the knot bounding box, as a share of its width.
        max_iter: Descent iterations per start.
        max_starts: For d >= 2, at most this many grid local minima seed the descent.
        all_starts: Start from every grid node (default for d = 1).
    """

    box: Optional[Tuple[np.ndarray, np.ndarray]] = None
    grid0: Optional[int] = None
    refine_tol: Optional[float] = None
    tie_tol: float = 1e-6
    inflate: float = 0.25
    max_iter: int = 100
    max_starts: int = 8
    all_starts: Optional[bool] = None

    def __post_init__(self):
        if self.grid0 is not None and self.grid0 < 2:
            raise ConfigError("grid0 must be at least 2")
        if self.refine_tol is not None and self.refine_tol <= 0:
            raise ConfigError("refine_tol must be positive")
        if self.tie_tol <= 0:
            raise ConfigError("tie_tol must be positive")
        if self.inflate < 0:
            raise ConfigError("inflate must be nonnegative")


def search_box(f: SplineMap, opts: ProjectionOptions) -> Tuple[np.ndarray, np.ndarray]:
    if opts.box is not None:
        lo, hi = (np.asarray(b, dtype=float).reshape(f.d) for b in opts.box)
        if np.any(hi <= lo):
            raise ConfigError("projection box must have hi > lo on every axis")
        return lo, hi
    lo = f.centers.min(axis=0)
    hi = f.centers.max(axis=0)
    width = hi - lo
    width = np.where(width > 0, width, max(float(width.max()), 1.0))
    return lo - opts.inflate * width, hi + opts.inflate * width


def _grid_axes(lo, hi, g):
    return [np.linspace(lo[k], hi[k], g) for k in range(lo.shape[0])]


def coarse_grid(lo: np.ndarray, hi: np.ndarray, g: int) -> np.ndarray:
    """All g^d grid nodes in C order (last axis fastest)."""
    mesh = np.meshgrid(*_grid_axes(lo, hi, g), indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def _select_starts(sq: np.ndarray, d: int, g: int, opts: ProjectionOptions, all_starts: bool):
    """Returns (point index, grid index) pairs to refine for a chunk of squared grid distances."""
    m = sq.shape[0]
    if all_starts:
        pts, nodes = np.meshgrid(np.arange(m), np.arange(sq.shape[1]), indexing="ij")
        return pts.ravel(), nodes.ravel()
    shaped = sq.reshape((m,) + (g,) * d)
    local = minimum_filter(shaped, size=(1,) + (3,) * d, mode="constant", cval=np.inf)
    is_min = (shaped <= local).reshape(m, -1)
    ranked = np.where(is_min, sq, np.inf)
    k = min(opts.max_starts, sq.shape[1])
    best = np.argsort(ranked, axis=1, kind="stable")[:, :k]
    keep = np.isfinite(np.take_along_axis(ranked, best, axis=1))
    pts = np.repeat(np.arange(m), k).reshape(m, k)
    return pts[keep], best[keep]


def _refine(f, targets, t0, lo, hi, tol, max_iter):
    """
    Batched damped Gauss-Newton (Levenberg-Marquardt) on ||f(t) - x||^2 inside the box.

    Returns the final parameters and squared distances.
    """
    t = t0.copy()
    residual = f.evaluate(t) - targets
    value = np.einsum("ij,ij->i", residual, residual)
    mu = np.full(t.shape[0], 1e-3)
    active = np.ones(t.shape[0], dtype=bool)
    eye = np.eye(f.d)
    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        jac = f.jacobian(t[idx])
        if jac.ndim == 2:
            jac = jac[None]
        jtj = np.einsum("kli,klj->kij", jac, jac)
        grad = np.einsum("kli,kl->ki", jac, residual[idx])
        scale = np.trace(jtj, axis1=1, axis2=2) / f.d + 1e-300
        system = jtj + (mu[idx] * scale)[:, None, None] * eye
        step = -np.linalg.solve(system, grad[:, :, None])[:, :, 0]
        candidate = np.clip(t[idx] + step, lo, hi)
        cand_residual = f.evaluate(candidate) - targets[idx]
        if cand_residual.ndim == 1:
            cand_residual = cand_residual[None]
        cand_value = np.einsum("ij,ij->i", cand_residual, cand_residual)
        if not np.all(np.isfinite(cand_value)):
            raise ProjectionError("non-finite map value inside the projection box")
        moved = np.linalg.norm(candidate - t[idx], axis=1)
        better = cand_value < value[idx]

        upd = idx[better]
        t[upd] = candidate[better]
        residual[upd] = cand_residual[better]
        value[upd] = cand_value[better]
        mu[upd] = np.maximum(mu[upd] * 0.3, 1e-12)
        mu[idx[~better]] *= 10.0

        done = (moved < tol) | (mu[idx] > 1e12)
        active[idx[done]] = False
    return t, value


def _lexicographic_pick(params: np.ndarray, values: np.ndarray, tie_tol: float, abs_tol: float) -> int:
    """Index of the lexicographically largest parameter among near-best candidates."""
    dist = np.sqrt(np.maximum(values, 0.0))
    best = dist.min()
    near = np.flatnonzero(dist <= best + max(tie_tol * best, abs_tol))
    # lexsort sorts by the last key first
    order = np.lexsort(tuple(params[near, k] for k in reversed(range(params.shape[1]))))
    return int(near[order[-1]])


def project_many(f: SplineMap, X, opts: Optional[ProjectionOptions] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Projection indices of many points.

    Args:
        f: Fitted map.
        X: M x D points.
        opts: Search settings.

    Returns:
        tuple: (M x d parameters, length-M distances).
    """
    opts = opts or ProjectionOptions()
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != f.D:
        raise ConfigError(f"points have dimension {X.shape[1]}, map has D={f.D}")
    lo, hi = search_box(f, opts)
    g = opts.grid0 or DEFAULT_GRID0[f.d]
    all_starts = opts.all_starts if opts.all_starts is not None else f.d == 1
    tol = opts.refine_tol or 1e-8 * float(np.linalg.norm(hi - lo))
    abs_tol = 1e-12 * max(float(np.abs(X).max(initial=0.0)), 1.0)

    nodes = coarse_grid(lo, hi, g)
    node_values = f.evaluate(nodes)
    if not np.all(np.isfinite(node_values)):
        raise ProjectionError("non-finite map value on the coarse grid")

    n_nodes = nodes.shape[0]
    per_point = n_nodes if all_starts else min(opts.max_starts, n_nodes)
    chunk = max(1, min(MAX_BATCH_STATES // per_point, MAX_GRID_CELLS // n_nodes))
    params = np.empty((X.shape[0], f.d))
    dists = np.empty(X.shape[0])
    for start in range(0, X.shape[0], chunk):
        block = X[start:start + chunk]
        sq = cdist(block, node_values, "sqeuclidean")
        pts, starts = _select_starts(sq, f.d, g, opts, all_starts)
        t, values = _refine(f, block[pts], nodes[starts], lo, hi, tol, opts.max_iter)
        boundaries = np.flatnonzero(np.diff(pts)) + 1
        for group in np.split(np.arange(pts.shape[0]), boundaries):
            i = pts[group[0]]
            pick = group[_lexicographic_pick(t[group], values[group], opts.tie_tol, abs_tol)]
            params[start + i] = t[pick]
            dists[start + i] = np.sqrt(max(values[pick], 0.0))
    logger.debug(f"projected {X.shape[0]} points onto a d={f.d} map ({n_nodes} grid nodes)")
    return params, dists


def project(f: SplineMap, x, opts: Optional[ProjectionOptions] = None) -> np.ndarray:
    """
    Projection index of one point.

    Returns:
        np.ndarray: Parameter t* of length d.
    """
    params, _ = project_many(f, np.asarray(x, dtype=float).reshape(1, -1), opts)
    return params[0]


def dist_many(f: SplineMap, X, opts: Optional[ProjectionOptions] = None) -> np.ndarray:
    return project_many(f, X, opts)[1]


def dist(f: SplineMap, x, opts: Optional[ProjectionOptions] = None) -> float:
    """Distance from x to the image of f."""
    return float(dist_many(f, np.asarray(x, dtype=float).reshape(1, -1), opts)[0])
