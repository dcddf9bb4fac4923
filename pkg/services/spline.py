"""
Penalized spline maps R^d -> R^D.

A map is f(t) = sum_j s_j eta_nu(t - c_j) + a_0 + sum_k a_k t_k with nu = 4 - d and
the side condition T^T s = 0. The coefficients come from the symmetric block system

    [2EWE + 2 lam E   2EWT    T] [s]   [2EW mu ]
    [2T^T W E         2T^TWT  0] [a] = [2T^TW mu]
    [T^T              0       0] [m]   [0      ]

of order N + 2d + 2, factorized once and reused for all D output coordinates.
"""

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy.linalg import LinAlgWarning, get_lapack_funcs
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from services.errors import ConfigError, DegenerateError, SplineSolveError

# Настройка логирования
logger = logging.getLogger(__name__)

SUPPORTED_DIMS = (1, 2, 3)
MERGE_TOL = 1e-9
RESIDUAL_TOL = 1e-8


def kernel_order(d: int) -> int:
    if d not in SUPPORTED_DIMS:
        raise ConfigError(f"intrinsic dimension d={d} not supported (expected 1, 2 or 3)")
    return 4 - d


def eta_radial(nu: int, r: np.ndarray) -> np.ndarray:
    """eta_nu as a function of the radius r = ||t||."""
    r = np.asarray(r, dtype=float)
    if nu % 2 == 1:
        return r ** nu
    out = np.zeros_like(r)
    pos = r > 0
    out[pos] = r[pos] ** nu * np.log(r[pos])
    return out


def eta(nu: int, t) -> float:
    """
    Radial kernel of order nu evaluated at a vector t.

    Args:
        nu: Kernel order in {1, 2, 3}.
        t: Vector in R^d (a scalar is read as d = 1).

    Returns:
        float: ||t||^nu log ||t|| for even nu (0 at the origin), ||t||^nu for odd nu.
    """
    if nu not in (1, 2, 3):
        raise ConfigError(f"kernel order nu={nu} not supported")
    r = float(np.linalg.norm(np.atleast_1d(np.asarray(t, dtype=float))))
    return float(eta_radial(nu, np.array(r)))


def _eta_gradient_factor(nu: int, r: np.ndarray) -> np.ndarray:
    """Factor h(r) with grad eta_nu(u) = h(||u||) u; zero at the origin."""
    out = np.zeros_like(r)
    pos = r > 0
    if nu == 1:
        out[pos] = 1.0 / r[pos]
    elif nu == 2:
        out[pos] = 2.0 * np.log(r[pos]) + 1.0
    else:
        out[pos] = nu * r[pos] ** (nu - 2)
    return out


def as_parameters(t) -> np.ndarray:
    """N x d array; a flat vector is read as N one-dimensional parameters."""
    t = np.asarray(t, dtype=float)
    return t.reshape(-1, 1) if t.ndim <= 1 else t


def polynomial_matrix(t: np.ndarray) -> np.ndarray:
    """Rows (1, t_1, ..., t_d)."""
    t = np.atleast_2d(t)
    return np.hstack([np.ones((t.shape[0], 1)), t])


@dataclass(frozen=True)
class SplineMap:
    """
    An embedding map R^d -> R^D in kernel-plus-affine form.

    Attributes:
        centers: N x d knots.
        s: N x D kernel coefficients.
        a: (d+1) x D affine coefficients for the basis (1, t_1, ..., t_d).
    """

    centers: np.ndarray
    s: np.ndarray
    a: np.ndarray

    def __post_init__(self):
        centers = as_parameters(self.centers)
        s = np.atleast_2d(np.asarray(self.s, dtype=float))
        a = np.atleast_2d(np.asarray(self.a, dtype=float))
        kernel_order(centers.shape[1])
        if s.shape[0] != centers.shape[0] or a.shape != (centers.shape[1] + 1, s.shape[1]):
            raise ConfigError(
                f"inconsistent spline shapes: centers {centers.shape}, s {s.shape}, a {a.shape}"
            )
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "a", a)

    @property
    def d(self) -> int:
        return self.centers.shape[1]

    @property
    def D(self) -> int:
        return self.s.shape[1]

    @property
    def nu(self) -> int:
        return 4 - self.d

    @property
    def n_centers(self) -> int:
        return self.centers.shape[0]

    def _as_params(self, t) -> Tuple[np.ndarray, bool]:
        t = np.asarray(t, dtype=float)
        single = t.ndim <= 1
        if t.ndim == 0:
            t = t.reshape(1, 1)
        elif t.ndim == 1:
            t = t.reshape(1, -1) if t.shape[0] == self.d else t.reshape(-1, 1)
        if t.shape[1] != self.d:
            raise ConfigError(f"parameter dimension {t.shape[1]} does not match d={self.d}")
        single = single and t.shape[0] == 1
        return t, single

    def evaluate(self, t) -> np.ndarray:
        """
        Evaluates the map.

        Args:
            t: One parameter (d,) or a batch (M, d).

        Returns:
            np.ndarray: (D,) for one parameter, (M, D) for a batch.
        """
        params, single = self._as_params(t)
        diff = params[:, None, :] - self.centers[None, :, :]
        kernel = eta_radial(self.nu, np.linalg.norm(diff, axis=2))
        values = kernel @ self.s + polynomial_matrix(params) @ self.a
        return values[0] if single else values

    __call__ = evaluate

    def jacobian(self, t) -> np.ndarray:
        """
        Analytic derivative of the map.

        Returns:
            np.ndarray: D x d for one parameter, (M, D, d) for a batch.
        """
        params, single = self._as_params(t)
        diff = params[:, None, :] - self.centers[None, :, :]
        factor = _eta_gradient_factor(self.nu, np.linalg.norm(diff, axis=2))
        grads = factor[:, :, None] * diff
        jac = np.einsum("mnk,nl->mlk", grads, self.s) + self.a[1:].T[None, :, :]
        return jac[0] if single else jac

    def gram(self) -> np.ndarray:
        diff = self.centers[:, None, :] - self.centers[None, :, :]
        return eta_radial(self.nu, np.linalg.norm(diff, axis=2))

    def hessian_penalty(self) -> float:
        """Curvature penalty sum_l s_l^T E s_l; round-off negatives are clamped to zero."""
        value = float(np.einsum("nl,nm,ml->", self.s, self.gram(), self.s))
        scale = float(np.abs(self.s).sum() ** 2 * max(np.abs(self.gram()).max(), 1.0))
        if value < 0:
            if value < -1e-10 * max(scale, 1.0):
                logger.warning(f"curvature penalty is negative beyond round-off: {value:.3e}")
            return 0.0
        return value

    def constraint_residual(self) -> float:
        """max |T^T s| over output coordinates."""
        return float(np.abs(polynomial_matrix(self.centers).T @ self.s).max())


@dataclass
class SplineSystem:
    """
    Assembled block-system ingredients for one set of knots.

    `merged_from` maps every input knot to its row after duplicate merging.
    """

    knots: np.ndarray
    targets: np.ndarray
    weights: np.ndarray
    E: np.ndarray
    T: np.ndarray
    merged_from: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    @property
    def n(self) -> int:
        return self.knots.shape[0]

    @property
    def d(self) -> int:
        return self.knots.shape[1]

    @property
    def W(self) -> np.ndarray:
        return np.diag(self.weights)


def _merge_duplicates(knots, targets, weights, tol):
    """Groups knots closer than tol (transitively) and merges each group."""
    pairs = cKDTree(knots).query_pairs(tol, output_type="ndarray")
    n = knots.shape[0]
    if len(pairs) == 0:
        return knots, targets, weights, np.arange(n)
    adjacency = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    n_groups, labels = connected_components(adjacency, directed=False)
    # keep groups ordered by first occurrence
    first = np.full(n_groups, n)
    np.minimum.at(first, labels, np.arange(n))
    order = np.argsort(first, kind="stable")
    relabel = np.empty(n_groups, dtype=int)
    relabel[order] = np.arange(n_groups)
    labels = relabel[labels]

    merged_knots = np.zeros((n_groups, knots.shape[1]))
    merged_targets = np.zeros((n_groups, targets.shape[1]))
    merged_weights = np.zeros(n_groups)
    counts = np.zeros(n_groups)
    np.add.at(merged_weights, labels, weights)
    np.add.at(counts, labels, 1.0)
    np.add.at(merged_knots, labels, knots)
    merged_knots /= counts[:, None]
    for g in range(n_groups):
        members = labels == g
        w = weights[members]
        if w.sum() > 0:
            merged_targets[g] = (w[:, None] * targets[members]).sum(axis=0) / w.sum()
        else:
            merged_targets[g] = targets[members].mean(axis=0)
    logger.debug(f"merged {n - n_groups} duplicate knots")
    return merged_knots, merged_targets, merged_weights, labels


def assemble(knots, targets, weights, merge_tol: Optional[float] = None) -> SplineSystem:
    """
    Builds E, T and W for the given knots.

    Args:
        knots: N x d parameters.
        targets: N x D values the map should reproduce.
        weights: Length-N nonnegative weights.
        merge_tol: Knots closer than this are merged; default 1e-9 x knot-set diameter.

    Returns:
        SplineSystem: The assembled system.

    Raises:
        ConfigError: If fewer than d + 2 distinct knots remain after merging.
        DegenerateError: If T has rank below d + 1 after merging.
    """
    knots = as_parameters(knots)
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    weights = np.asarray(weights, dtype=float).ravel()
    d = knots.shape[1]
    nu = kernel_order(d)
    if targets.shape[0] != knots.shape[0] or weights.shape[0] != knots.shape[0]:
        raise ConfigError("knots, targets and weights must have the same number of rows")
    if np.any(weights < 0) or not np.all(np.isfinite(weights)):
        raise ConfigError("weights must be finite and nonnegative")
    if not (np.all(np.isfinite(knots)) and np.all(np.isfinite(targets))):
        raise SplineSolveError("non-finite knots or targets")

    diameter = float(np.linalg.norm(knots.max(axis=0) - knots.min(axis=0)))
    tol = MERGE_TOL * diameter if merge_tol is None else merge_tol
    if tol > 0:
        knots, targets, weights, merged_from = _merge_duplicates(knots, targets, weights, tol)
    else:
        merged_from = np.arange(knots.shape[0])

    if knots.shape[0] < d + 2:
        raise ConfigError(f"a d={d} spline needs at least {d + 2} distinct knots, got {knots.shape[0]}")
    T = polynomial_matrix(knots)
    if np.linalg.matrix_rank(T) < d + 1:
        raise DegenerateError(
            f"knot configuration is degenerate: polynomial matrix has rank "
            f"{np.linalg.matrix_rank(T)} < {d + 1}",
            {"n_knots": knots.shape[0]},
        )
    diff = knots[:, None, :] - knots[None, :, :]
    E = eta_radial(nu, np.linalg.norm(diff, axis=2))
    return SplineSystem(knots=knots, targets=targets, weights=weights, E=E, T=T, merged_from=merged_from)


def block_matrix(system: SplineSystem, lam: float) -> Tuple[np.ndarray, np.ndarray]:
    """Returns the symmetric block matrix and the right-hand sides (one column per output)."""
    E, T, w = system.E, system.T, system.weights
    n, p = system.n, system.T.shape[1]
    EW = E * w[None, :]
    size = n + 2 * p
    A = np.zeros((size, size))
    A[:n, :n] = 2.0 * EW @ E + 2.0 * lam * E
    A[:n, n:n + p] = 2.0 * EW @ T
    A[n:n + p, :n] = A[:n, n:n + p].T
    A[:n, n + p:] = T
    A[n + p:, :n] = T.T
    A[n:n + p, n:n + p] = 2.0 * (T.T * w[None, :]) @ T
    A = 0.5 * (A + A.T)
    B = np.zeros((size, system.targets.shape[1]))
    B[:n] = 2.0 * EW @ system.targets
    B[n:n + p] = 2.0 * (T.T * w[None, :]) @ system.targets
    return A, B


class _SymmetricFactor:
    """Bunch-Kaufman factorization of a symmetric indefinite matrix, reused across solves."""

    def __init__(self, A: np.ndarray):
        sytrf, sytrs = get_lapack_funcs(("sytrf", "sytrs"), (A,))
        ldu, ipiv, info = sytrf(A, lower=1)
        if info != 0:
            raise SplineSolveError(
                "spline block matrix is singular; add a small lambda jitter or merge nearby knots",
                {"lapack_info": int(info)},
            )
        self._ldu, self._ipiv, self._sytrs = ldu, ipiv, sytrs

    def solve(self, B: np.ndarray) -> np.ndarray:
        x, info = self._sytrs(self._ldu, self._ipiv, B, lower=1)
        if info != 0:
            raise SplineSolveError("triangular solve failed", {"lapack_info": int(info)})
        return x


def solve(system: SplineSystem, lam: float, return_multipliers: bool = False, refine_steps: int = 2):
    """
    Solves the block system for every output coordinate.

    Args:
        system: Assembled system.
        lam: Smoothing parameter, >= 0.
        return_multipliers: Also return the Lagrange multipliers (d+1) x D.
        refine_steps: Iterative refinement steps reusing the factorization.

    Returns:
        SplineMap, or (SplineMap, multipliers) when requested.

    Raises:
        SplineSolveError: Singular or inaccurate solve.
    """
    if lam < 0 or not np.isfinite(lam):
        raise ConfigError(f"lambda must be finite and nonnegative, got {lam}")
    A, B = block_matrix(system, lam)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LinAlgWarning)
        factor = _SymmetricFactor(A)
        X = factor.solve(B)
        for _ in range(refine_steps):
            X = X + factor.solve(B - A @ X)

    if not np.all(np.isfinite(X)):
        raise SplineSolveError("spline solve produced non-finite coefficients; add a small lambda jitter")
    backward = np.linalg.norm(A @ X - B) / (np.linalg.norm(A) * np.linalg.norm(X) + np.linalg.norm(B) + 1e-300)
    if backward > RESIDUAL_TOL:
        raise SplineSolveError(
            f"block system residual {backward:.2e} exceeds {RESIDUAL_TOL:.0e}; "
            f"add a small lambda jitter or merge nearby knots",
            {"residual": float(backward)},
        )
    n, p = system.n, system.T.shape[1]
    f = SplineMap(centers=system.knots.copy(), s=X[:n], a=X[n:n + p])
    if return_multipliers:
        return f, X[n + p:]
    return f


def objective(system: SplineSystem, f: SplineMap, lam: float) -> float:
    """Reduced objective sum_l ||W^(1/2)(mu_l - E s_l - T a_l)||^2 + lam s_l^T E s_l."""
    residual = system.targets - system.E @ f.s - system.T @ f.a
    fit = float(np.sum(system.weights[:, None] * residual ** 2))
    return fit + lam * float(np.einsum("nl,nm,ml->", f.s, system.E, f.s))


def penalized_objective(f: SplineMap, knots, targets, weights, lam: float) -> float:
    """Same objective for a map whose centers need not equal the knots."""
    knots = as_parameters(knots)
    residual = np.asarray(targets, dtype=float) - f.evaluate(knots)
    fit = float(np.sum(np.asarray(weights, dtype=float)[:, None] * residual ** 2))
    return fit + lam * f.hessian_penalty()


def kkt_residual(system: SplineSystem, f: SplineMap, multipliers: np.ndarray, lam: float) -> float:
    """
    Relative norm of the Lagrangian gradient and of the side condition.

    The gradient is assembled from E, T and W directly, independent of the block matrix.
    """
    E, T, w = system.E, system.T, system.weights
    residual = system.targets - E @ f.s - T @ f.a
    grad_s = -2.0 * E @ (w[:, None] * residual) + 2.0 * lam * E @ f.s + T @ multipliers
    grad_a = -2.0 * T.T @ (w[:, None] * residual)
    constraint = T.T @ f.s
    scale = (
        np.linalg.norm(2.0 * E @ (w[:, None] * system.targets))
        + np.linalg.norm(2.0 * T.T @ (w[:, None] * system.targets))
        + 1e-300
    )
    coef_scale = np.linalg.norm(T) * np.linalg.norm(f.s) + 1e-300
    return float(
        max(
            np.linalg.norm(np.vstack([grad_s, grad_a])) / scale,
            np.linalg.norm(constraint) / coef_scale if np.linalg.norm(f.s) > 0 else 0.0,
        )
    )
