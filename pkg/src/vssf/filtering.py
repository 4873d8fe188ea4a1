"""Information-form forward filtering with multi-sensor fusion.

Each step predicts the belief through the dynamics in moment form, converts
to information form, adds every sensor's evidence (eta_e, lambda_e), and
converts back. Fusion is associative and order-free because it is plain
addition of natural parameters; sensors can drop in and out per step by
simply not contributing a term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, NotPositiveDefinite
from .gaussian import (
    GaussianInfo,
    GaussianMoment,
    inv_psd,
    log_density,
    symmetrize,
    to_info,
    to_moment,
)
from .lgssm import DynamicsParams, predict, prior_belief
from .sensors import LinearSensor, SensorEvidence

PRECISION_GAIN_TOL = 1e-10


@dataclass(frozen=True)
class EvidenceBundle:
    """All sensor evidence arriving at one time step (possibly none)."""

    items: tuple

    def __init__(self, items=()):
        items = tuple(items)
        for item in items:
            if not isinstance(item, SensorEvidence):
                raise DimensionMismatch("EvidenceBundle items must be SensorEvidence")
        dims = {item.dim for item in items}
        if len(dims) > 1:
            raise DimensionMismatch(f"mixed evidence dimensions {sorted(dims)}")
        object.__setattr__(self, "items", items)

    def __len__(self) -> int:
        return len(self.items)


@dataclass(frozen=True)
class FilterBelief:
    """Predicted and posterior belief at one step.

    Fusing evidence can only add precision, so the posterior precision must
    dominate the predicted precision; this is checked on construction and
    catches sign errors in evidence construction early.
    """

    predicted: GaussianMoment
    posterior: GaussianMoment

    def __post_init__(self):
        if self.predicted.dim != self.posterior.dim:
            raise DimensionMismatch("predicted and posterior dimensions differ")
        gain = inv_psd(self.posterior.cov) - inv_psd(self.predicted.cov)
        smallest = np.linalg.eigvalsh(symmetrize(gain)).min()
        scale = max(1.0, np.abs(gain).max())
        if smallest < -PRECISION_GAIN_TOL * scale:
            raise NotPositiveDefinite(
                f"posterior precision lost information over predicted ({smallest:.3e})"
            )

    @property
    def dim(self) -> int:
        return self.posterior.dim


def filter_step(psi: DynamicsParams, prev_posterior: GaussianMoment | None,
                u_prev, evidence: EvidenceBundle) -> FilterBelief:
    """One predict-then-fuse step.

    prev_posterior None means this is the first step and the prediction is
    the prior N(0, sigma_z); u_prev is the input that drove the transition
    into this step (ignored on the first step).
    """
    if prev_posterior is None:
        predicted = prior_belief(psi)
    else:
        predicted = predict(psi, prev_posterior, u_prev)
    info = to_info(predicted)
    eta, lam = info.eta, info.lam
    for item in evidence.items:
        if item.dim != predicted.dim:
            raise DimensionMismatch(
                f"evidence dim {item.dim} does not match state dim {predicted.dim}")
        eta = eta + item.eta_e
        lam = lam + item.lambda_e
    posterior = to_moment(GaussianInfo(eta=eta, lam=lam))
    return FilterBelief(predicted=predicted, posterior=posterior)


def filter_forward(psi: DynamicsParams, evidence_seq, u_seq) -> list[FilterBelief]:
    """Run the filter over a whole trajectory.

    evidence_seq is one EvidenceBundle per step; u_seq is (T-1, d) with
    u_seq[t] driving the transition from step t to t+1.
    """
    evidence_seq = list(evidence_seq)
    steps = len(evidence_seq)
    u_seq = np.asarray(u_seq, dtype=np.float64)
    if steps == 0:
        return []
    if u_seq.ndim != 2 or u_seq.shape[0] != steps - 1:
        raise DimensionMismatch(
            f"u_seq must have shape ({steps - 1}, d), got {u_seq.shape}")
    beliefs: list[FilterBelief] = []
    posterior = None
    for t, bundle in enumerate(evidence_seq):
        u_prev = u_seq[t - 1] if t > 0 else None
        belief = filter_step(psi, posterior, u_prev, bundle)
        beliefs.append(belief)
        posterior = belief.posterior
    return beliefs


def linear_marginal_log_likelihood(psi: DynamicsParams, sensors: list[LinearSensor],
                                   obs_seqs: list[np.ndarray], u_seq) -> float:
    """Exact log p(all observations | inputs) for purely linear sensors.

    Prediction-error decomposition: within each step the sensors are folded
    in one at a time, each scoring its observation against the belief that
    already absorbed the previous sensors. The total is order-invariant.

    obs_seqs holds one (T, obs_dim_j) array per sensor, aligned with
    `sensors`. This is the closed-form reference the Monte-Carlo evidence
    bound is tested against.
    """
    if len(sensors) != len(obs_seqs):
        raise DimensionMismatch("one observation sequence per sensor required")
    obs_seqs = [np.asarray(o, dtype=np.float64) for o in obs_seqs]
    steps = obs_seqs[0].shape[0] if obs_seqs else 0
    for sensor, obs in zip(sensors, obs_seqs):
        if obs.shape != (steps, sensor.obs_dim):
            raise DimensionMismatch(
                f"observations must be ({steps}, {sensor.obs_dim}), got {obs.shape}")
    u_seq = np.asarray(u_seq, dtype=np.float64)

    total = 0.0
    belief = None
    for t in range(steps):
        if belief is None:
            belief = prior_belief(psi)
        else:
            belief = predict(psi, belief, u_seq[t - 1])
        for sensor, obs in zip(sensors, obs_seqs):
            x = obs[t]
            innov_cov = sensor.c @ belief.cov @ sensor.c.T + sensor.sigma_x
            total += log_density(
                GaussianMoment(mean=sensor.c @ belief.mean, cov=innov_cov), x)
            # condition on x before the next sensor sees the belief
            gain = belief.cov @ sensor.c.T @ inv_psd(innov_cov)
            mean = belief.mean + gain @ (x - sensor.c @ belief.mean)
            cov = belief.cov - gain @ innov_cov @ gain.T
            belief = GaussianMoment(mean=mean, cov=symmetrize(cov))
    return float(total)
