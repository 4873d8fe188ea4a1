"""Backward smoothing: reverse conditionals, trajectory sampler, marginals.

The smoothing posterior factors as the final filtering posterior times a
chain of reverse conditionals q(z_t | z_{t+1}, evidence up to t). For
linear dynamics each reverse conditional is Gaussian: its precision adds
the transition information A^T W^-1 A on top of the filtering posterior
precision, so A is never inverted and singular dynamics are fine.

Sampling a trajectory is two passes: draw z_T from the last posterior,
then walk backward drawing each z_t from its reverse conditional. The
log-density of the draw accumulates over exactly those factors, which is
what the evidence bound needs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, NonFiniteError, NotPositiveDefinite
from .filtering import FilterBelief
from .gaussian import (
    GaussianInfo,
    GaussianMoment,
    chol_psd,
    inv_psd,
    log_density,
    log_density_rows,
    product_info,
    sample,
    symmetrize,
    to_info,
    to_moment,
)
from .lgssm import DynamicsParams, _input_vector

PRECISION_CONSISTENCY_TOL = 1e-10


@dataclass(frozen=True)
class BackwardConditional:
    """Reverse conditional N(ell, l_cov) evaluated at one next state."""

    ell: np.ndarray
    l_cov: np.ndarray

    def __post_init__(self):
        ell = np.array(self.ell, dtype=np.float64)
        if ell.ndim != 1:
            raise DimensionMismatch(f"ell must be a vector, got shape {ell.shape}")
        l_cov = np.array(self.l_cov, dtype=np.float64)
        if l_cov.shape != (ell.shape[0], ell.shape[0]):
            raise DimensionMismatch(
                f"l_cov must be ({ell.shape[0]}, {ell.shape[0]}), got {l_cov.shape}")
        l_cov = symmetrize(l_cov)
        chol_psd(l_cov)  # PD or it is not a conditional
        ell.flags.writeable = False
        l_cov.flags.writeable = False
        object.__setattr__(self, "ell", ell)
        object.__setattr__(self, "l_cov", l_cov)

    @property
    def dim(self) -> int:
        return self.ell.shape[0]

    @property
    def moment(self) -> GaussianMoment:
        return GaussianMoment(mean=self.ell, cov=self.l_cov)


@dataclass(frozen=True)
class SmoothingSample:
    """One trajectory draw plus its log-density under the sampler."""

    trajectory: np.ndarray
    log_q: float

    def __post_init__(self):
        trajectory = np.array(self.trajectory, dtype=np.float64)
        if trajectory.ndim != 2:
            raise DimensionMismatch(
                f"trajectory must be (T, state_dim), got shape {trajectory.shape}")
        log_q = float(self.log_q)
        if not np.isfinite(log_q) or not np.all(np.isfinite(trajectory)):
            raise NonFiniteError("smoothing sample is not finite")
        trajectory.flags.writeable = False
        object.__setattr__(self, "trajectory", trajectory)
        object.__setattr__(self, "log_q", log_q)


def _reverse_parts(psi: DynamicsParams, posterior: GaussianMoment):
    """Affine pieces shared by every use of one step's reverse conditional.

    Returns (gain, pull, l_cov) with conditional mean
    gain @ (z_next - B u) + pull and covariance l_cov. The precision
    identity L^-1 = P^-1 + A^T W^-1 A is re-checked after inversion so a
    badly conditioned step fails loudly instead of skewing the sampler.
    """
    info = to_info(posterior)
    w_inv = inv_psd(psi.sigma_w)
    cross = psi.a.T @ w_inv
    prec = symmetrize(info.lam + cross @ psi.a)
    l_cov = inv_psd(prec)
    round_trip = inv_psd(l_cov)
    scale = max(1.0, float(np.abs(prec).max()))
    if np.abs(round_trip - prec).max() > PRECISION_CONSISTENCY_TOL * scale:
        raise NotPositiveDefinite("reverse conditional precision round trip drifted")
    gain = l_cov @ cross
    pull = l_cov @ info.eta
    return gain, pull, l_cov


def backward_conditional(psi: DynamicsParams, posterior_t: GaussianMoment,
                         u_t, z_next) -> GaussianMoment:
    """q(z_t | z_{t+1} = z_next, evidence up to t) in moment form.

    Formed as the information-form product of the filtering posterior with
    the reversed-dynamics likelihood factor
    (A^T W^-1 (z_next - B u_t), A^T W^-1 A).
    """
    z_next = np.asarray(z_next, dtype=np.float64)
    if z_next.shape != (psi.state_dim,):
        raise DimensionMismatch(
            f"z_next must have shape ({psi.state_dim},), got {z_next.shape}")
    if posterior_t.dim != psi.state_dim:
        raise DimensionMismatch(
            f"posterior dim {posterior_t.dim} does not match state dim {psi.state_dim}")
    w_inv = inv_psd(psi.sigma_w)
    shift = psi.b @ _input_vector(psi, u_t)
    eta = psi.a.T @ (w_inv @ (z_next - shift))
    lam = symmetrize(psi.a.T @ w_inv @ psi.a)
    fused = to_moment(product_info(to_info(posterior_t), GaussianInfo(eta=eta, lam=lam)))
    expected_prec = symmetrize(inv_psd(posterior_t.cov) + lam)
    actual_prec = inv_psd(fused.cov)
    scale = max(1.0, float(np.abs(expected_prec).max()))
    if np.abs(actual_prec - expected_prec).max() > PRECISION_CONSISTENCY_TOL * scale:
        raise NotPositiveDefinite("reverse conditional precision round trip drifted")
    cond = BackwardConditional(ell=fused.mean, l_cov=fused.cov)
    return cond.moment


def _check_run(psi: DynamicsParams, beliefs, u_seq):
    beliefs = list(beliefs)
    steps = len(beliefs)
    u_seq = np.asarray(u_seq, dtype=np.float64)
    for belief in beliefs:
        if not isinstance(belief, FilterBelief):
            raise DimensionMismatch("beliefs must be FilterBelief instances")
        if belief.dim != psi.state_dim:
            raise DimensionMismatch(
                f"belief dim {belief.dim} does not match state dim {psi.state_dim}")
    if steps > 0 and (u_seq.ndim != 2 or u_seq.shape[0] != steps - 1):
        raise DimensionMismatch(
            f"u_seq must have shape ({steps - 1}, d), got {u_seq.shape}")
    return beliefs, steps, u_seq


def sample_smoothing(psi: DynamicsParams, beliefs, u_seq,
                     rng: np.random.Generator, count: int) -> list[SmoothingSample]:
    """Draw `count` trajectories from the smoothing posterior with log-densities.

    All samples share one set of per-step reverse conditionals, so the cost
    is one Cholesky per step regardless of count.
    """
    beliefs, steps, u_seq = _check_run(psi, beliefs, u_seq)
    count = int(count)
    if count < 1:
        raise DimensionMismatch(f"count must be >= 1, got {count}")
    if steps == 0:
        return []
    m = psi.state_dim
    z = np.empty((steps, count, m))
    last = beliefs[-1].posterior
    z[-1] = np.atleast_2d(sample(last, rng, count))
    log_q = log_density_rows(last.mean, last.cov, z[-1])
    for t in range(steps - 2, -1, -1):
        gain, pull, l_cov = _reverse_parts(psi, beliefs[t].posterior)
        shift = psi.b @ _input_vector(psi, u_seq[t])
        means = (z[t + 1] - shift) @ gain.T + pull
        factor = chol_psd(l_cov)
        z[t] = means + rng.standard_normal((count, m)) @ factor.T
        log_q = log_q + log_density_rows(means, l_cov, z[t])
    return [SmoothingSample(trajectory=z[:, i, :], log_q=float(log_q[i]))
            for i in range(count)]


def smoothing_log_density(psi: DynamicsParams, beliefs, u_seq, trajectory) -> float:
    """Log-density of one trajectory under the backward factorization."""
    beliefs, steps, u_seq = _check_run(psi, beliefs, u_seq)
    trajectory = np.asarray(trajectory, dtype=np.float64)
    if trajectory.shape != (steps, psi.state_dim):
        raise DimensionMismatch(
            f"trajectory must be ({steps}, {psi.state_dim}), got {trajectory.shape}")
    if steps == 0:
        return 0.0
    total = log_density(beliefs[-1].posterior, trajectory[-1])
    for t in range(steps - 2, -1, -1):
        gain, pull, l_cov = _reverse_parts(psi, beliefs[t].posterior)
        shift = psi.b @ _input_vector(psi, u_seq[t])
        mean = gain @ (trajectory[t + 1] - shift) + pull
        total += log_density_rows(mean, l_cov, trajectory[t])[0]
    return float(total)


def smoothing_marginals(psi: DynamicsParams, beliefs, u_seq) -> list[GaussianMoment]:
    """Per-step smoothed marginals of the backward factorization.

    Backward linear-Gaussian composition: the marginal at t pushes the
    marginal at t+1 through the affine reverse conditional.
    """
    beliefs, steps, u_seq = _check_run(psi, beliefs, u_seq)
    if steps == 0:
        return []
    out: list[GaussianMoment] = [None] * steps
    out[-1] = beliefs[-1].posterior
    for t in range(steps - 2, -1, -1):
        gain, pull, l_cov = _reverse_parts(psi, beliefs[t].posterior)
        shift = psi.b @ _input_vector(psi, u_seq[t])
        mean = gain @ (out[t + 1].mean - shift) + pull
        cov = gain @ out[t + 1].cov @ gain.T + l_cov
        out[t] = GaussianMoment(mean=mean, cov=symmetrize(cov))
    return out


def rts_smooth(psi: DynamicsParams, beliefs, u_seq) -> list[GaussianMoment]:
    """Textbook fixed-interval backward smoother on the filter output.

    An independent route to the smoothed marginals (gain built from the
    predicted covariance rather than from added precisions), kept as a
    cross-check for the backward factorization.
    """
    beliefs, steps, u_seq = _check_run(psi, beliefs, u_seq)
    if steps == 0:
        return []
    out: list[GaussianMoment] = [None] * steps
    out[-1] = beliefs[-1].posterior
    for t in range(steps - 2, -1, -1):
        post = beliefs[t].posterior
        pred_next = beliefs[t + 1].predicted
        gain = post.cov @ psi.a.T @ inv_psd(pred_next.cov)
        mean = post.mean + gain @ (out[t + 1].mean - pred_next.mean)
        cov = post.cov + gain @ (out[t + 1].cov - pred_next.cov) @ gain.T
        out[t] = GaussianMoment(mean=mean, cov=symmetrize(cov))
    return out
