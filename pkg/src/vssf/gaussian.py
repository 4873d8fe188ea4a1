"""Multivariate Gaussians in moment and information form.

Moment form carries (mean, cov); information form carries the natural
parameters (eta, lam) with eta = cov^-1 @ mean and lam = cov^-1. Fusing
independent evidence is addition in information form, which is why the
filtering code works there and converts back only when a moment-form
belief is needed.

All inversions go through Cholesky factors. Covariance and precision
matrices are re-symmetrized as (M + M.T) / 2 on construction so that
round-off never accumulates into asymmetry.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DimensionMismatch, NonFiniteError, NotPositiveDefinite

LOG_2PI = float(np.log(2.0 * np.pi))

# One shot of diagonal jitter is allowed before an inversion gives up.
JITTER_SCALE = 1e-9


def _as_vector(x, name: str) -> np.ndarray:
    arr = np.array(x, dtype=np.float64)  # always copies: values are immutable
    if arr.ndim != 1:
        raise DimensionMismatch(f"{name} must be a 1-d vector, got shape {arr.shape}")
    arr.flags.writeable = False
    return arr


def _as_square(m, dim: int, name: str) -> np.ndarray:
    arr = np.array(m, dtype=np.float64)
    if arr.shape != (dim, dim):
        raise DimensionMismatch(f"{name} must have shape ({dim}, {dim}), got {arr.shape}")
    return arr


def symmetrize(m: np.ndarray) -> np.ndarray:
    """Project a nearly-symmetric matrix back onto the symmetric cone."""
    return 0.5 * (m + m.T)


def chol_psd(m: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of a symmetric PD matrix.

    On failure a single diagonal jitter of 1e-9 * trace/m is added; if the
    factorization still fails the matrix is genuinely not positive definite
    and NotPositiveDefinite is raised.
    """
    sym = symmetrize(m)
    if not np.isfinite(sym).all():
        # LAPACK may hand back a NaN factor without signalling, so catch it here
        raise NonFiniteError("matrix to factor contains non-finite values")
    try:
        return np.linalg.cholesky(sym)
    except np.linalg.LinAlgError:
        pass
    n = sym.shape[0]
    jitter = JITTER_SCALE * max(np.trace(sym) / max(n, 1), 1.0)
    try:
        return np.linalg.cholesky(sym + jitter * np.eye(n))
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(
            f"matrix is not positive definite (min diag {sym.diagonal().min():.3e})"
        ) from exc


def inv_psd(m: np.ndarray) -> np.ndarray:
    """Inverse of a symmetric PD matrix via its Cholesky factor."""
    factor = chol_psd(m)
    y = solve_triangular(factor, np.eye(m.shape[0]), lower=True)
    inv = solve_triangular(factor, y, lower=True, trans="T")
    return symmetrize(inv)


def _solve_lower(l: np.ndarray, b: np.ndarray) -> np.ndarray:
    return solve_triangular(l, b, lower=True)


@dataclass(frozen=True)
class GaussianMoment:
    """Gaussian in moment form: mean vector and PD covariance."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = _as_vector(self.mean, "mean")
        cov = symmetrize(_as_square(self.cov, mean.shape[0], "cov"))
        chol_psd(cov)  # PD check; raises NotPositiveDefinite
        cov.flags.writeable = False
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class GaussianInfo:
    """Gaussian in information form: eta = cov^-1 mean, lam = cov^-1.

    lam must be symmetric; it is strictly PD whenever the object represents
    a full belief (checked on conversion back to moment form, not here, so
    that information-form evidence with singular lam can be represented).
    """

    eta: np.ndarray
    lam: np.ndarray

    def __post_init__(self):
        eta = _as_vector(self.eta, "eta")
        lam = symmetrize(_as_square(self.lam, eta.shape[0], "lam"))
        lam.flags.writeable = False
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "lam", lam)

    @property
    def dim(self) -> int:
        return self.eta.shape[0]


def to_info(g: GaussianMoment) -> GaussianInfo:
    """Convert moment form to information form."""
    lam = inv_psd(g.cov)
    return GaussianInfo(eta=lam @ g.mean, lam=lam)


def to_moment(g: GaussianInfo) -> GaussianMoment:
    """Convert information form to moment form.

    Raises NotPositiveDefinite when lam is singular (evidence alone is not
    a normalizable belief).
    """
    cov = inv_psd(g.lam)
    return GaussianMoment(mean=cov @ g.eta, cov=cov)


def product_info(a: GaussianInfo, b: GaussianInfo) -> GaussianInfo:
    """Unnormalized product of two Gaussian factors (addition of naturals)."""
    if a.dim != b.dim:
        raise DimensionMismatch(f"dimension mismatch: {a.dim} vs {b.dim}")
    return GaussianInfo(eta=a.eta + b.eta, lam=symmetrize(a.lam + b.lam))


def log_density(g: GaussianMoment, x) -> float:
    """Log density of x under g, evaluated via the Cholesky factor of cov."""
    x = _as_vector(x, "x")
    if x.shape[0] != g.dim:
        raise DimensionMismatch(f"x has dim {x.shape[0]}, expected {g.dim}")
    factor = chol_psd(g.cov)
    resid = _solve_lower(factor, x - g.mean)
    log_det = 2.0 * np.sum(np.log(np.diagonal(factor)))
    return float(-0.5 * (g.dim * LOG_2PI + log_det + resid @ resid))


def log_density_rows(mean_rows: np.ndarray, cov: np.ndarray, x_rows: np.ndarray) -> np.ndarray:
    """Row-wise log densities N(x_i; mean_i, cov) for a shared covariance.

    mean_rows and x_rows are (n, m); broadcasting a single mean over many
    rows is allowed. This is the vectorized path used by the samplers.
    """
    diff = np.atleast_2d(x_rows) - np.atleast_2d(mean_rows)
    m = cov.shape[0]
    factor = chol_psd(cov)
    resid = _solve_lower(factor, diff.T)
    log_det = 2.0 * np.sum(np.log(np.diagonal(factor)))
    quad = np.sum(resid * resid, axis=0)
    return -0.5 * (m * LOG_2PI + log_det + quad)


def log_density_rows_node(mean_rows, cov, x_rows):
    """Graph twin of log_density_rows: row-wise log N(x_i; mean_i, cov).

    mean_rows, cov, x_rows are autodiff Nodes (or arrays, wrapped as
    constants); cov is shared across rows. Returns an (n,) Node.
    """
    from . import autodiff as ad

    mean_rows = ad.as_node(mean_rows)
    cov = ad.as_node(cov)
    x_rows = ad.as_node(x_rows)
    m = cov.value.shape[0]
    factor = ad.cholesky(cov)
    diff = ad.transpose(ad.sub(x_rows, mean_rows))
    resid = ad.triangular_solve(factor, diff, trans="N")
    quad = ad.reduce_sum(ad.mul(resid, resid), axis=0)
    log_det = ad.mul(ad.reduce_sum(ad.log(ad.diag_part(factor))), 2.0)
    return ad.mul(ad.add(ad.add(quad, log_det), m * LOG_2PI), -0.5)


def sample(g: GaussianMoment, rng: np.random.Generator, count: int | None = None) -> np.ndarray:
    """Draw samples from g: mean + chol(cov) @ eps with eps ~ N(0, I).

    Returns shape (dim,) when count is None, else (count, dim).
    """
    factor = chol_psd(g.cov)
    if count is None:
        eps = rng.standard_normal(g.dim)
        return g.mean + factor @ eps
    eps = rng.standard_normal((count, g.dim))
    return g.mean + eps @ factor.T
