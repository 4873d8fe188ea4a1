"""Linear-Gaussian latent dynamics.

The latent chain is z_1 ~ N(0, sigma_z) and z_{t+1} = A z_t + B u_t + w_t
with w_t ~ N(0, sigma_w). Inputs are conditioned on throughout; u_seq[t]
is the input driving the transition from step t to step t+1 (0-based).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, NonFiniteError, NotStable
from .gaussian import GaussianMoment, chol_psd, log_density, symmetrize

STATIONARY_TOL = 1e-6


@dataclass(frozen=True)
class DynamicsParams:
    """Transition matrix, input matrix, process noise, initial covariance.

    stationary_consistent marks systems whose initial covariance is the
    stationary covariance of the noise-driven chain, which is what makes
    the prior-substitution step in the evidence construction exact. The
    flag is validated on construction.
    """

    a: np.ndarray
    b: np.ndarray
    sigma_w: np.ndarray
    sigma_z: np.ndarray
    stationary_consistent: bool = False

    def __post_init__(self):
        a = np.array(self.a, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise DimensionMismatch(f"a must be square, got {a.shape}")
        m = a.shape[0]
        b = np.array(self.b, dtype=np.float64)
        if b.ndim != 2 or b.shape[0] != m:
            raise DimensionMismatch(f"b must have {m} rows, got {b.shape}")
        if not (np.isfinite(a).all() and np.isfinite(b).all()):
            raise NonFiniteError("dynamics matrices contain non-finite values")
        sigma_w = symmetrize(np.array(self.sigma_w, dtype=np.float64))
        sigma_z = symmetrize(np.array(self.sigma_z, dtype=np.float64))
        if sigma_w.shape != (m, m) or sigma_z.shape != (m, m):
            raise DimensionMismatch("noise covariances must match the state dimension")
        chol_psd(sigma_w)
        chol_psd(sigma_z)
        if self.stationary_consistent:
            residual = sigma_z - (a @ sigma_z @ a.T + sigma_w)
            rel = np.linalg.norm(residual) / max(np.linalg.norm(sigma_z), 1e-300)
            if rel >= STATIONARY_TOL:
                raise NotStable(
                    f"sigma_z is not stationary for (a, sigma_w): residual {rel:.2e}"
                )
        for arr in (a, b, sigma_w, sigma_z):
            arr.flags.writeable = False
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "sigma_w", sigma_w)
        object.__setattr__(self, "sigma_z", sigma_z)

    @property
    def state_dim(self) -> int:
        return self.a.shape[0]

    @property
    def input_dim(self) -> int:
        return self.b.shape[1]


def _input_vector(psi: DynamicsParams, u) -> np.ndarray:
    if u is None:
        return np.zeros(psi.input_dim)
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (psi.input_dim,):
        raise DimensionMismatch(f"u must have shape ({psi.input_dim},), got {u.shape}")
    return u


def prior_belief(psi: DynamicsParams) -> GaussianMoment:
    """Belief over z_1 before any evidence: N(0, sigma_z)."""
    return GaussianMoment(mean=np.zeros(psi.state_dim), cov=psi.sigma_z)


def predict(psi: DynamicsParams, belief: GaussianMoment, u=None) -> GaussianMoment:
    """Push a belief through one transition: N(A m + B u, A P A^T + sigma_w)."""
    u = _input_vector(psi, u)
    mean = psi.a @ belief.mean + psi.b @ u
    cov = psi.a @ belief.cov @ psi.a.T + psi.sigma_w
    return GaussianMoment(mean=mean, cov=cov)


def transition_log_density(psi: DynamicsParams, z_t, u_t, z_next) -> float:
    """log N(z_next; A z_t + B u_t, sigma_w)."""
    z_t = np.asarray(z_t, dtype=np.float64)
    u = _input_vector(psi, u_t)
    mean = psi.a @ z_t + psi.b @ u
    return log_density(GaussianMoment(mean=mean, cov=psi.sigma_w), z_next)


def sample_trajectory(psi: DynamicsParams, u_seq, rng: np.random.Generator) -> np.ndarray:
    """Roll the chain forward for T steps; u_seq has shape (T-1, d).

    Returns the latent trajectory as a (T, m) array.
    """
    u_seq = np.asarray(u_seq, dtype=np.float64)
    if u_seq.ndim != 2 or u_seq.shape[1] != psi.input_dim:
        raise DimensionMismatch(
            f"u_seq must have shape (T-1, {psi.input_dim}), got {u_seq.shape}"
        )
    steps = u_seq.shape[0] + 1
    m = psi.state_dim
    z = np.empty((steps, m))
    z[0] = chol_psd(psi.sigma_z) @ rng.standard_normal(m)
    chol_w = chol_psd(psi.sigma_w)
    for t in range(steps - 1):
        z[t + 1] = psi.a @ z[t] + psi.b @ u_seq[t] + chol_w @ rng.standard_normal(m)
    return z


def spectral_radius(a: np.ndarray) -> float:
    return float(np.abs(np.linalg.eigvals(a)).max())


def stationary_covariance(a: np.ndarray, sigma_w: np.ndarray,
                          tol: float = 1e-10, max_iter: int = 10_000) -> np.ndarray:
    """Fixed point of S = A S A^T + sigma_w for a strictly stable A.

    Uses the doubling form of the fixed-point iteration (each pass squares
    the number of accumulated terms of sum_k A^k sigma_w A^k^T), so systems
    with spectral radius close to one still converge in a few dozen passes.
    Raises NotStable when the spectral radius is not strictly below one.
    """
    a = np.asarray(a, dtype=np.float64)
    sigma_w = symmetrize(np.asarray(sigma_w, dtype=np.float64))
    if spectral_radius(a) >= 1.0 - 1e-9:
        raise NotStable(f"spectral radius {spectral_radius(a):.6f} is not < 1")
    s = sigma_w.copy()
    power = a.copy()
    for _ in range(max_iter):
        step = power @ s @ power.T
        s = symmetrize(s + step)
        if np.linalg.norm(step) < tol:
            return s
        power = power @ power
    raise NotStable("stationary covariance iteration did not converge")
