"""
Principal manifold fitting on reduced data.

The data are reduced to a weighted average joint, its nodes are parameterized by ISOMAP,
and the map alternates between projecting the nodes onto the current fit and re-solving
the weighted spline problem on the projected knots.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from services import hdmde as hdmde_service
from services import isomap as isomap_service
from services.errors import ConfigError, DegenerateError, PmeError, PmeIterationError, SelectionError, SplineSolveError
from services.hdmde import Waj
from services.projection import ProjectionOptions, dist_many, project_many
from services.spline import SplineMap, assemble, solve
from services.workers import parallel_map

# Настройка логирования
logger = logging.getLogger(__name__)

DEFAULT_LAMBDA_EXPONENTS = tuple(range(-15, 6))
# relative slack for "near-tied" test MSDs
LAMBDA_TIE_REL = 1e-9
LAMBDA_TIE_ABS = 1e-10


def default_lambda_grid() -> List[float]:
    return [math.exp(k) for k in DEFAULT_LAMBDA_EXPONENTS]


@dataclass
class PmeOptions:
    """
    Inputs of the fitting loop.

    Attributes:
        d: Intrinsic dimension.
        eps: EM sup-norm tolerance of the data reduction.
        eps_star: Relative-change stop tolerance of the outer loop.
        alpha: Level of the model-size test.
        n0: Lower bound of the model size; None is 20 x D.
        n_max: Upper bound of the model size; None is I/2.
        max_em_iter: EM iteration cap.
        max_outer_iter: Outer iteration cap.
        isomap_k: Neighbour count for the initialization; None picks the default.
        best_ratio: Return the best iterate when the final one is worse by more than this factor.
        seed: Seed of the data reduction.
        threads: Worker threads for grid searches.
        projection: Projection search settings.
    """

    d: int = 1
    eps: float = hdmde_service.DEFAULT_EPS
    eps_star: float = 1e-3
    alpha: float = hdmde_service.DEFAULT_ALPHA
    n0: Optional[int] = None
    n_max: Optional[int] = None
    max_em_iter: int = hdmde_service.DEFAULT_MAX_ITER
    max_outer_iter: int = 100
    isomap_k: Optional[int] = None
    best_ratio: float = 1.1
    seed: int = 0
    threads: Optional[int] = 1
    constraint_tol: Optional[float] = None
    projection: ProjectionOptions = field(default_factory=ProjectionOptions)

    def __post_init__(self):
        if self.d not in (1, 2, 3):
            raise ConfigError(f"intrinsic dimension d={self.d} not supported")
        for name in ("eps", "eps_star"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")
        if self.max_outer_iter < 1 or self.max_em_iter < 1:
            raise ConfigError("iteration caps must be positive")


@dataclass
class FitResult:
    """
    A fitted map with its diagnostics.

    `returned_iterate` is the 1-based index of the iterate returned; it differs from
    `n_iter` when the best-iterate fallback fired. `grid_msd` lists (lambda, msd) pairs
    of a selection run (msd is NaN for failed grid points).
    """

    f: SplineMap
    lam: float
    msd: float
    weighted_msd_trace: List[float]
    n_iter: int
    converged: bool
    returned_iterate: int = 0
    flag: Optional[str] = None
    waj: Optional[Waj] = None
    grid_msd: List[Tuple[float, float]] = field(default_factory=list)


def msd(f: SplineMap, X, opts: Optional[ProjectionOptions] = None) -> float:
    """Mean squared distance (1/I) sum_i ||x_i - f(pi_f(x_i))||^2."""
    distances = dist_many(f, np.atleast_2d(np.asarray(X, dtype=float)), opts)
    return float(np.mean(distances ** 2))


def weighted_msd(f: SplineMap, waj: Waj, opts: Optional[ProjectionOptions] = None) -> float:
    """sum_j theta_j ||mu_j - f(pi_f(mu_j))||^2."""
    return _weighted_msd_and_knots(f, waj, opts)[0]


def _weighted_msd_and_knots(f, waj, opts):
    knots, distances = project_many(f, waj.nodes, opts)
    return float(np.sum(waj.weights * distances ** 2)), knots


def reduce_data(X, opts: PmeOptions) -> Waj:
    """Data reduction step shared by every lambda."""
    waj, _ = hdmde_service.hdmde(
        X, n0=opts.n0, alpha=opts.alpha, eps=opts.eps, max_iter=opts.max_em_iter,
        n_max=opts.n_max, seed=opts.seed, constraint_tol=opts.constraint_tol,
    )
    return waj


def initial_knots(waj: Waj, opts: PmeOptions) -> np.ndarray:
    return isomap_service.isomap(waj.nodes, opts.d, k=opts.isomap_k, threads=opts.threads)


def pme_fit(
    X,
    lam: float,
    opts: Optional[PmeOptions] = None,
    waj: Optional[Waj] = None,
    init: Optional[np.ndarray] = None,
    compute_msd: bool = True,
) -> FitResult:
    """
    Fits a principal manifold at one smoothing level.

    Args:
        X: I x D data.
        lam: Smoothing parameter, >= 0.
        opts: Loop options.
        waj: Precomputed reduced data (skips the reduction).
        init: Precomputed initial knots for the nodes (skips ISOMAP).
        compute_msd: Evaluate the test MSD on X.

    Returns:
        FitResult: The returned iterate with its trace.

    Raises:
        PmeIterationError: If a solve inside the loop fails.
    """
    opts = opts or PmeOptions()
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if lam < 0:
        raise ConfigError(f"lambda must be nonnegative, got {lam}")
    if opts.d >= X.shape[1]:
        raise ConfigError(f"intrinsic dimension d={opts.d} must be below D={X.shape[1]}")
    waj = waj if waj is not None else reduce_data(X, opts)
    knots = init if init is not None else initial_knots(waj, opts)

    trace: List[float] = []
    try:
        f = solve(assemble(knots, waj.nodes, waj.weights), lam)
    except (ConfigError, DegenerateError, SplineSolveError) as e:
        raise PmeIterationError(f"initial solve failed: {e}", 0, trace) from e
    value, knots = _weighted_msd_and_knots(f, waj, opts.projection)
    trace.append(value)
    best = (value, f, 1)
    converged = False
    flag = None
    n_iter = 1

    while n_iter < opts.max_outer_iter:
        try:
            f_next = solve(assemble(knots, waj.nodes, waj.weights), lam)
        except (ConfigError, DegenerateError, SplineSolveError) as e:
            raise PmeIterationError(f"solve failed at iteration {n_iter + 1}: {e}", n_iter + 1, trace) from e
        value_next, knots = _weighted_msd_and_knots(f_next, waj, opts.projection)
        trace.append(value_next)
        n_iter += 1
        previous = value
        f, value = f_next, value_next
        if value < best[0]:
            best = (value, f, n_iter)
        if previous == 0.0:
            if value == 0.0:
                converged = True
            else:
                flag = "zero-weighted-msd-then-nonzero"
                logger.warning("weighted MSD left zero; stopping without convergence")
            break
        change = abs(value - previous) / previous
        logger.debug(f"pme_fit lambda={lam:.3g} iteration {n_iter}: D={value:.6e}, change={change:.3e}")
        if change < opts.eps_star:
            converged = True
            break

    returned = n_iter
    if value > opts.best_ratio * best[0]:
        logger.warning(
            f"final weighted MSD {value:.4e} exceeds the best iterate ({best[0]:.4e} at {best[2]}); returning the best"
        )
        f, returned = best[1], best[2]
        flag = flag or "best-iterate"

    test_msd = msd(f, X, opts.projection) if compute_msd else float("nan")
    logger.info(
        f"pme_fit lambda={lam:.4g}: {n_iter} iterations, converged={converged}, msd={test_msd:.6e}"
    )
    return FitResult(
        f=f, lam=lam, msd=test_msd, weighted_msd_trace=trace, n_iter=n_iter, converged=converged,
        returned_iterate=returned, flag=flag, waj=waj,
    )


def select_lambda(
    X,
    opts: Optional[PmeOptions] = None,
    grid: Optional[Sequence[float]] = None,
    waj: Optional[Waj] = None,
    init: Optional[np.ndarray] = None,
) -> Tuple[float, FitResult]:
    """
    Fits every lambda of the grid and keeps the one with the smallest test MSD.

    Near-ties go to the larger lambda. The reduction and the ISOMAP initialization are
    computed once.

    Raises:
        SelectionError: If every grid fit fails.
    """
    opts = opts or PmeOptions()
    X = np.atleast_2d(np.asarray(X, dtype=float))
    grid = list(grid) if grid is not None else default_lambda_grid()
    if not grid:
        raise ConfigError("lambda grid is empty")
    waj = waj if waj is not None else reduce_data(X, opts)
    init = init if init is not None else initial_knots(waj, opts)

    def run(lam):
        try:
            return pme_fit(X, lam, opts, waj=waj, init=init)
        except PmeError as e:
            logger.warning(f"fit at lambda={lam:.4g} failed: {e}")
            return e

    results = parallel_map(run, grid, opts.threads)
    table = [(lam, r.msd if isinstance(r, FitResult) else float("nan")) for lam, r in zip(grid, results)]
    fits = [(lam, r) for lam, r in zip(grid, results) if isinstance(r, FitResult)]
    if not fits:
        raise SelectionError(
            "every lambda in the grid failed",
            [f"lambda={lam:.4g}: {r}" for lam, r in zip(grid, results)],
        )
    best_msd = min(r.msd for _, r in fits)
    slack = max(LAMBDA_TIE_REL * best_msd, LAMBDA_TIE_ABS * _diameter(X) ** 2)
    lam_star, fit = max(((lam, r) for lam, r in fits if r.msd <= best_msd + slack), key=lambda p: p[0])
    fit.grid_msd = table
    logger.info(f"select_lambda: lambda*={lam_star:.4g} (log={math.log(lam_star):.2f}), msd={fit.msd:.6e}")
    return lam_star, fit


def baseline_isomap_fit(X, d: int, lam: float, opts: Optional[PmeOptions] = None,
                        params: Optional[np.ndarray] = None) -> FitResult:
    """
    One weighted spline solve on ISOMAP parameters of the raw points, uniform weights 1/I.

    `params` reuses parameters computed for another lambda.
    """
    opts = opts or PmeOptions(d=d)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    waj = Waj.uniform(X)
    if params is None:
        if X.shape[0] > isomap_service.LARGE_GRAPH_WARNING:
            logger.warning(f"ISOMAP baseline on {X.shape[0]} raw points: all-pairs geodesics are expensive")
        params = isomap_service.isomap(X, d, k=opts.isomap_k, threads=opts.threads)
    f = solve(assemble(params, waj.nodes, waj.weights), lam)
    test_msd = msd(f, X, opts.projection)
    logger.info(f"baseline_isomap_fit lambda={lam:.4g}: msd={test_msd:.6e}")
    return FitResult(f=f, lam=lam, msd=test_msd, weighted_msd_trace=[test_msd], n_iter=1, converged=True,
                     returned_iterate=1, waj=waj)


def weighted_pca_plane(waj: Waj, d: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Weighted principal hyperplane through the reduced data.

    Returns:
        tuple: (weighted mean, D x d orthonormal basis of the top-d principal directions).
    """
    mean = waj.mean()
    centered = waj.nodes - mean
    cov = (centered * waj.weights[:, None]).T @ centered
    values, vectors = np.linalg.eigh(cov)
    order = np.argsort(values)[::-1][:d]
    return mean, vectors[:, order]


def _diameter(X: np.ndarray) -> float:
    return float(np.linalg.norm(X.max(axis=0) - X.min(axis=0)))
