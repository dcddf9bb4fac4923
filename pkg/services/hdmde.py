"""
Data reduction by a Gaussian mixture with fixed nodes and bandwidth.

For each model size N the data are partitioned by k-means, the bandwidth is estimated
from the within-cluster spread, and the mixture weights are fitted by an EM iteration
whose M-step keeps the weighted mean of the nodes equal to the sample mean. N grows
from N0 until the Z statistic comparing the models at N and N+1 is insignificant.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.optimize import least_squares
from scipy.spatial.distance import cdist
from scipy.special import logsumexp
from scipy.stats import norm

from services.errors import ConfigError, ConvergenceError, DegenerateError, NumericalError, SelectionError

# Настройка логирования
logger = logging.getLogger(__name__)

DEFAULT_ALPHA = 0.05
DEFAULT_EPS = 1e-4
DEFAULT_MAX_ITER = 1000
KMEANS_MAX_ITER = 300
CONSTRAINT_TOL = 1e-6


@dataclass
class Waj:
    """
    Weighted average joint: nodes with simplex weights and the mixture bandwidth.

    Attributes:
        nodes: N x D node locations.
        weights: Length-N weights summing to one.
        sigma: Bandwidth of the isotropic Gaussian kernel.
        alpha: Level used for the selection (None when not selected by the Z rule).
        n0: Lower bound used for the selection.
    """

    nodes: np.ndarray
    weights: np.ndarray
    sigma: float
    alpha: Optional[float] = None
    n0: Optional[int] = None

    def __post_init__(self):
        self.nodes = np.atleast_2d(np.asarray(self.nodes, dtype=float))
        self.weights = np.asarray(self.weights, dtype=float).ravel()
        if self.weights.shape[0] != self.nodes.shape[0]:
            raise ConfigError("Waj needs one weight per node")

    @property
    def n(self) -> int:
        return self.nodes.shape[0]

    @property
    def D(self) -> int:
        return self.nodes.shape[1]

    def mean(self) -> np.ndarray:
        return self.weights @ self.nodes

    @classmethod
    def uniform(cls, points) -> "Waj":
        """Every point a node with weight 1/I (no reduction)."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        return cls(nodes=points.copy(), weights=np.full(points.shape[0], 1.0 / points.shape[0]), sigma=0.0)


@dataclass
class ZReport:
    """Comparison of the mixtures at N and N+1 on the same data."""

    n: int
    z: float
    delta_bar: float
    s_hat: float
    deltas: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))


@dataclass
class MixtureFit:
    nodes: np.ndarray
    weights: np.ndarray
    sigma: float
    assignment: np.ndarray
    em_iterations: int = 0


def _rng(seed, *keys) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *keys])))


def _kmeans_plusplus(points: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Seeds n centers with probability proportional to squared distance to the chosen ones."""
    n_points = points.shape[0]
    chosen = [int(rng.integers(n_points))]
    closest = np.sum((points - points[chosen[0]]) ** 2, axis=1)
    for _ in range(1, n):
        total = closest.sum()
        if total > 0:
            nxt = int(rng.choice(n_points, p=closest / total))
        else:
            remaining = np.setdiff1d(np.arange(n_points), chosen)
            nxt = int(remaining[0]) if remaining.size else int(rng.integers(n_points))
        chosen.append(nxt)
        closest = np.minimum(closest, np.sum((points - points[nxt]) ** 2, axis=1))
    return points[chosen].copy()


def kmeans_partition(points, n: int, seed: int = 0, max_iter: int = KMEANS_MAX_ITER) -> Tuple[np.ndarray, np.ndarray]:
    """
    Lloyd's k-means with k-means++ seeding.

    Empty clusters are re-seeded with the points farthest from their current centers.

    Args:
        points: I x D data.
        n: Number of clusters, 1 <= n <= I.
        seed: Seed of the counter-based generator.
        max_iter: Cap on Lloyd iterations.

    Returns:
        tuple: (n x D centers, length-I assignment).
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n_points = points.shape[0]
    if n < 1 or n > n_points:
        raise ConfigError(f"cluster count must satisfy 1 <= N <= I (N={n}, I={n_points})")
    rng = _rng(seed, n)
    centers = _kmeans_plusplus(points, n, rng)
    assignment = np.full(n_points, -1)
    for it in range(max_iter):
        sq = cdist(points, centers, "sqeuclidean")
        new_assignment = np.argmin(sq, axis=1)
        counts = np.bincount(new_assignment, minlength=n)
        empty = np.flatnonzero(counts == 0)
        if empty.size:
            far = iter(np.argsort(-sq[np.arange(n_points), new_assignment], kind="stable"))
            for j in empty:
                for i in far:
                    # never empty the donor cluster
                    if counts[new_assignment[i]] > 1:
                        counts[new_assignment[i]] -= 1
                        new_assignment[i] = j
                        counts[j] = 1
                        break
        for j in range(n):
            centers[j] = points[new_assignment == j].mean(axis=0)
        if np.array_equal(new_assignment, assignment):
            break
        assignment = new_assignment
    else:
        logger.debug(f"k-means stopped at the iteration cap ({max_iter}) for N={n}")
    return centers, assignment


def estimate_sigma(points, centers, assignment) -> float:
    """
    Pooled within-cluster bandwidth ((1/D)(1/N) sum_j mean_l ||x_jl - mu_j||^2)^(1/2).
    """
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        points = points.reshape(-1, 1)
    centers = np.asarray(centers, dtype=float).reshape(-1, points.shape[1])
    assignment = np.asarray(assignment, dtype=int)
    n, dim = centers.shape[0], points.shape[1]
    sq = np.sum((points - centers[assignment]) ** 2, axis=1)
    sums = np.bincount(assignment, weights=sq, minlength=n)
    counts = np.bincount(assignment, minlength=n)
    if np.any(counts == 0):
        raise ConfigError("every cluster must be nonempty")
    return float(math.sqrt(np.sum(sums / counts) / (dim * n)))


def log_kernel_matrix(points, nodes, sigma: float) -> np.ndarray:
    """log psi_sigma(x_i - mu_j) for the isotropic Gaussian kernel, I x N."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    nodes = np.atleast_2d(np.asarray(nodes, dtype=float))
    dim = points.shape[1]
    sq = cdist(points, nodes, "sqeuclidean")
    return -sq / (2.0 * sigma ** 2) - 0.5 * dim * math.log(2.0 * math.pi * sigma ** 2)


def mixture_density(points, nodes, sigma: float, weights) -> np.ndarray:
    """p_N(x) = sum_j theta_j psi_sigma(x - mu_j) at every point."""
    with np.errstate(divide="ignore"):
        log_w = np.log(np.asarray(weights, dtype=float))
    return np.exp(logsumexp(log_kernel_matrix(points, nodes, sigma) + log_w[None, :], axis=1))


def responsibilities(log_kernel: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """w_ij(theta), computed with a max shift in log space."""
    with np.errstate(divide="ignore"):
        log_joint = log_kernel + np.log(weights)[None, :]
    return np.exp(log_joint - logsumexp(log_joint, axis=1)[:, None])


def inner_objective(lam1: float, lam2, col_sums, nodes, xbar) -> float:
    """|sum_j W_j/(l1 + l2.mu_j) - 1|^2 + ||sum_j W_j mu_j/(l1 + l2.mu_j) - xbar||^2."""
    nodes = np.atleast_2d(np.asarray(nodes, dtype=float))
    theta = np.asarray(col_sums, dtype=float) / (lam1 + nodes @ np.asarray(lam2, dtype=float))
    return float((theta.sum() - 1.0) ** 2 + np.sum((theta @ nodes - np.asarray(xbar)) ** 2))


def _constrained_update(col_sums: np.ndarray, nodes: np.ndarray, xbar: np.ndarray) -> np.ndarray:
    """
    theta_j = W_j / (l1 + l2.mu_j) with (l1, l2) minimizing the inner objective.

    Solved by Levenberg-Marquardt in the equivalent scaled form
    theta_j = (W_j/I) / (c1 + c2.(mu_j - xbar)/scale), started at (1, 0).
    """
    total = col_sums.sum()
    a = col_sums / total
    scale = max(float(np.abs(nodes - xbar).max()), 1e-300)
    c = (nodes - xbar) / scale
    dim = nodes.shape[1]

    def residual(lam):
        theta = a / (lam[0] + c @ lam[1:])
        return np.concatenate([[theta.sum() - 1.0], theta @ c])

    def jac(lam):
        den = lam[0] + c @ lam[1:]
        dtheta = -a / den ** 2
        J = np.empty((dim + 1, dim + 1))
        J[0, 0] = dtheta.sum()
        J[0, 1:] = dtheta @ c
        J[1:, 0] = c.T @ dtheta
        J[1:, 1:] = (c * dtheta[:, None]).T @ c
        return J

    x0 = np.zeros(dim + 1)
    x0[0] = 1.0
    if np.max(np.abs(residual(x0))) < 1e-15:
        lam = x0
    else:
        result = least_squares(residual, x0, jac=jac, method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15)
        lam = result.x
    den = lam[0] + c @ lam[1:]
    if not np.all(np.isfinite(den)) or np.any(den <= 0):
        raise NumericalError(
            "constrained EM update has a nonpositive denominator",
            {"lambda": lam.tolist(), "min_denominator": float(np.min(den))},
        )
    return a / den


def em_theta(
    points,
    nodes,
    sigma: float,
    eps: float = DEFAULT_EPS,
    max_iter: int = DEFAULT_MAX_ITER,
    constraint_tol: Optional[float] = None,
    return_iterations: bool = False,
):
    """
    Mixture weights by the mean-constrained EM iteration.

    Starts from theta = 1/N and stops at the first update whose sup-norm change is below eps;
    that update is returned.

    Args:
        points: I x D data.
        nodes: N x D fixed nodes.
        sigma: Fixed kernel bandwidth, > 0.
        eps: Sup-norm tolerance.
        max_iter: Iteration cap.
        constraint_tol: Allowed mean-constraint violation; default 1e-6 x diam(points).

    Returns:
        np.ndarray: Length-N weights (and the iteration count when requested).

    Raises:
        ConvergenceError: If max_iter updates do not meet the stop rule.
        NumericalError: If the inner solve breaks down.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    nodes = np.atleast_2d(np.asarray(nodes, dtype=float))
    if sigma <= 0:
        raise DegenerateError(f"kernel bandwidth must be positive, got {sigma}")
    n = nodes.shape[0]
    xbar = points.mean(axis=0)
    log_kernel = log_kernel_matrix(points, nodes, sigma)
    theta = np.full(n, 1.0 / n)
    iterations = 0
    for iterations in range(1, max_iter + 1):
        col_sums = responsibilities(log_kernel, theta).sum(axis=0)
        updated = _constrained_update(col_sums, nodes, xbar)
        change = float(np.max(np.abs(updated - theta)))
        theta = updated
        logger.debug(f"em_theta iteration {iterations}: sup change {change:.3e}")
        if change < eps:
            break
    else:
        raise ConvergenceError(
            f"em_theta did not converge in {max_iter} iterations (last sup change {change:.3e})",
            {"theta": theta.tolist()},
        )
    theta = theta / theta.sum()

    diameter = float(np.linalg.norm(points.max(axis=0) - points.min(axis=0)))
    tol = CONSTRAINT_TOL * max(diameter, 1e-300) if constraint_tol is None else constraint_tol
    violation = float(np.linalg.norm(theta @ nodes - xbar))
    if violation > tol:
        raise NumericalError(
            f"mean constraint violated by {violation:.3e} (tolerance {tol:.3e})",
            {"theta": theta.tolist()},
        )
    return (theta, iterations) if return_iterations else theta


def fit_mixture(points, n: int, seed: int = 0, eps: float = DEFAULT_EPS, max_iter: int = DEFAULT_MAX_ITER,
                constraint_tol: Optional[float] = None) -> MixtureFit:
    """k-means partition, bandwidth and constrained-EM weights at one model size."""
    centers, assignment = kmeans_partition(points, n, seed=seed)
    sigma = estimate_sigma(points, centers, assignment)
    if sigma <= 0:
        raise DegenerateError(f"bandwidth estimate is zero at N={n}: every point sits on its center")
    theta, iterations = em_theta(points, centers, sigma, eps=eps, max_iter=max_iter,
                                 constraint_tol=constraint_tol, return_iterations=True)
    return MixtureFit(nodes=centers, weights=theta, sigma=sigma, assignment=assignment, em_iterations=iterations)


def z_statistic(points, model_n: Tuple, model_n1: Tuple) -> ZReport:
    """
    Z statistic comparing the mixtures at N and N+1.

    Args:
        points: I x D data both models were fitted on.
        model_n: (nodes, weights, sigma) at N.
        model_n1: (nodes, weights, sigma) at N+1.

    Returns:
        ZReport: With z = sqrt(I) mean(delta) / S_hat.

    Raises:
        DegenerateError: If S_hat vanishes.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    nodes0, weights0, sigma0 = model_n
    nodes1, weights1, sigma1 = model_n1
    p0 = mixture_density(points, nodes0, sigma0, weights0)
    p1 = mixture_density(points, nodes1, sigma1, weights1)
    return z_from_deltas(p1 - p0, n=np.atleast_2d(nodes0).shape[0], scale=float(np.max(np.abs(p0))))


def z_from_deltas(deltas, n: int = 0, scale: Optional[float] = None) -> ZReport:
    """Z statistic from per-point density differences."""
    deltas = np.asarray(deltas, dtype=float)
    count = deltas.shape[0]
    delta_bar = float(deltas.mean())
    s_sq = float(np.mean(deltas ** 2) - delta_bar ** 2)
    s_hat = math.sqrt(max(s_sq, 0.0))
    floor = 1e-12 * (scale if scale is not None else float(np.max(np.abs(deltas), initial=0.0)))
    if s_hat <= floor:
        raise DegenerateError(f"Z statistic is degenerate at N={n}: all density differences are equal")
    z = math.sqrt(count) * delta_bar / s_hat
    return ZReport(n=n, z=z, delta_bar=delta_bar, s_hat=s_hat, deltas=deltas)


def z_threshold(alpha: float) -> float:
    """Two-sided standard-normal critical value z_(1 - alpha/2)."""
    return float(norm.ppf(1.0 - alpha / 2.0))


def hdmde(
    points,
    n0: Optional[int] = None,
    alpha: float = DEFAULT_ALPHA,
    eps: float = DEFAULT_EPS,
    max_iter: int = DEFAULT_MAX_ITER,
    n_max: Optional[int] = None,
    seed: int = 0,
    constraint_tol: Optional[float] = None,
) -> Tuple[Waj, List[ZReport]]:
    """
    Selects the model size by the Z rule and returns the reduced data.

    Args:
        points: I x D data.
        n0: Lower bound N0; None is 20 x D (capped at I).
        alpha: Test level in (0, 1).
        eps: EM sup-norm tolerance.
        max_iter: EM iteration cap.
        n_max: Upper bound on N; None is I/2. Never above I.
        seed: Seed; the k-means seeding at each N uses its own stream.

    Returns:
        tuple: (Waj at the selected N, list of ZReports in order of N).

    Raises:
        SelectionError: If no N up to the cap passes the test.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n_points, dim = points.shape
    if not 0 < alpha < 1:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
    n0 = min(20 * dim, n_points) if n0 is None else n0
    if n0 < 1:
        raise ConfigError(f"N0 must be at least 1, got {n0}")
    cap = min(n_points, n_max if n_max is not None else max(n_points // 2, n0 + 1))
    threshold = z_threshold(alpha)
    trace: List[ZReport] = []
    logger.info(f"hdmde: I={n_points}, D={dim}, N0={n0}, alpha={alpha}, cap={cap}")

    n = n0
    if n + 1 > cap:
        raise SelectionError(f"N0={n0} leaves no room below the cap N_max={cap}", trace)
    current = fit_mixture(points, n, seed=seed, eps=eps, max_iter=max_iter, constraint_tol=constraint_tol)
    while True:
        if n + 1 > cap:
            raise SelectionError(f"no model size up to N_max={cap} passed the Z test at alpha={alpha}", trace)
        following = fit_mixture(points, n + 1, seed=seed, eps=eps, max_iter=max_iter, constraint_tol=constraint_tol)
        report = z_statistic(
            points,
            (current.nodes, current.weights, current.sigma),
            (following.nodes, following.weights, following.sigma),
        )
        trace.append(report)
        logger.debug(f"hdmde: N={n}, Z={report.z:.4f}")
        if abs(report.z) < threshold:
            logger.info(f"hdmde: selected N={n} (|Z|={abs(report.z):.3f} < {threshold:.3f})")
            waj = Waj(nodes=current.nodes, weights=current.weights, sigma=current.sigma, alpha=alpha, n0=n0)
            return waj, trace
        n += 1
        current = following


def outlier_weight_ratio(waj: Waj, center, radius: float) -> float:
    """
    Weight of the single node inside a ball relative to the mean weight of the others.

    Raises:
        DegenerateError: If the ball does not contain exactly one node.
    """
    inside = np.linalg.norm(waj.nodes - np.asarray(center, dtype=float), axis=1) < radius
    if inside.sum() != 1:
        raise DegenerateError(f"expected exactly one node in the outlier ball, found {int(inside.sum())}")
    return float(waj.weights[inside][0] / waj.weights[~inside].mean())
