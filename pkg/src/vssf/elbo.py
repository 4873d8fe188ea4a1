"""Monte-Carlo evidence lower bound over smoothing-posterior samples.

One graph evaluates a whole minibatch. Every sensor's evidence precision is
observation-independent, so the filter's covariance path is shared by all
trajectories; only the mean rows scale with batch size and sample count.
The same construction serves plain evaluation (read the scalar values) and
training (run backward), which keeps the estimator and its gradients
consistent by construction.

Sampling is pathwise: each Gaussian draw is written as mean + chol(cov) @ eps
with eps ~ N(0, I) drawn from the caller's rng in a fixed order (final step
first, then backward in time). Gradients flow through means and covariances,
and reusing a seed gives common random numbers, which is what makes
finite-difference checks of the gradient well-posed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DimensionMismatch, NonFiniteError, UnknownSensor
from .gaussian import GaussianMoment, inv_psd, log_density, log_density_rows_node
from .lgssm import DynamicsParams, transition_log_density
from .model import Model, collect_params
from .sensors import (
    LinearSensor,
    decode_log_density_graph,
    encode_evidence_graph,
    linear_evidence_graph,
    linear_log_density_graph,
)

BREAKDOWN_TOL = 1e-10


@dataclass(frozen=True)
class ElboBreakdown:
    """Scalar terms of one bound estimate: total = recon_term - kl_term."""

    total: float
    kl_term: float
    recon_term: float
    per_sensor_recon: dict
    sample_count: int

    def __post_init__(self):
        values = [self.total, self.kl_term, self.recon_term,
                  *self.per_sensor_recon.values()]
        if not all(np.isfinite(v) for v in values):
            raise NonFiniteError("elbo terms are not finite")
        if self.sample_count < 1:
            raise DimensionMismatch("sample_count must be >= 1")
        gap = abs(self.total - (self.recon_term - self.kl_term))
        scale = max(1.0, abs(self.recon_term), abs(self.kl_term))
        if gap > BREAKDOWN_TOL * scale:
            raise NonFiniteError(f"breakdown does not add up (gap {gap:.3e})")


@dataclass(frozen=True)
class TrajectoryBatch:
    """A block of trajectories: per-sensor observations plus inputs.

    obs maps sensor name -> (batch, T, obs_dim); u is (batch, T-1, input_dim).
    """

    obs: dict
    u: np.ndarray

    def __post_init__(self):
        u = np.array(self.u, dtype=np.float64)
        if u.ndim != 3:
            raise DimensionMismatch(f"u must be (batch, T-1, d), got shape {u.shape}")
        obs = {}
        for name, seq in dict(self.obs).items():
            seq = np.array(seq, dtype=np.float64)
            if seq.ndim != 3 or seq.shape[0] != u.shape[0]:
                raise DimensionMismatch(
                    f"observations for {name!r} must be ({u.shape[0]}, T, obs_dim), "
                    f"got shape {seq.shape}")
            if seq.shape[1] != u.shape[1] + 1:
                raise DimensionMismatch(
                    f"observations for {name!r} cover {seq.shape[1]} steps, "
                    f"inputs imply {u.shape[1] + 1}")
            if not np.all(np.isfinite(seq)):
                raise NonFiniteError(f"observations for {name!r} are not finite")
            seq.flags.writeable = False
            obs[name] = seq
        u.flags.writeable = False
        object.__setattr__(self, "obs", obs)
        object.__setattr__(self, "u", u)

    @property
    def batch_size(self) -> int:
        return self.u.shape[0]

    @property
    def steps(self) -> int:
        return self.u.shape[1] + 1


def prior_log_density(psi: DynamicsParams, trajectory, u_seq) -> float:
    """log p(z_1) + sum of transition log densities along one trajectory."""
    trajectory = np.asarray(trajectory, dtype=np.float64)
    u_seq = np.asarray(u_seq, dtype=np.float64)
    if trajectory.ndim != 2 or trajectory.shape[1] != psi.state_dim:
        raise DimensionMismatch(
            f"trajectory must be (T, {psi.state_dim}), got shape {trajectory.shape}")
    steps = trajectory.shape[0]
    if u_seq.shape[0] != steps - 1:
        raise DimensionMismatch(
            f"u_seq must have {steps - 1} rows, got {u_seq.shape[0]}")
    total = log_density(
        GaussianMoment(mean=np.zeros(psi.state_dim), cov=psi.sigma_z), trajectory[0])
    for t in range(steps - 1):
        total += transition_log_density(psi, trajectory[t], u_seq[t], trajectory[t + 1])
    return float(total)


def reconstruction_log_density(sensors: dict, observations: dict, trajectory):
    """Total and per-sensor log p(x | z) summed over a trajectory.

    sensors maps name -> sensor model; observations maps name -> (T, obs_dim).
    Returns (total, {name: per-sensor total}).
    """
    from .sensors import decode_log_density_rows, linear_log_density

    trajectory = np.asarray(trajectory, dtype=np.float64)
    per_sensor: dict[str, float] = {}
    for name, seq in observations.items():
        if name not in sensors:
            raise UnknownSensor(f"observations for unknown sensor {name!r}")
        sensor = sensors[name]
        seq = np.asarray(seq, dtype=np.float64)
        if seq.ndim != 2 or seq.shape[0] != trajectory.shape[0]:
            raise DimensionMismatch(
                f"observations for {name!r} must be ({trajectory.shape[0]}, obs_dim)")
        if isinstance(sensor, LinearSensor):
            value = sum(linear_log_density(sensor, seq[t], trajectory[t])
                        for t in range(seq.shape[0]))
        else:
            value = float(np.sum(decode_log_density_rows(sensor, seq, trajectory)))
        per_sensor[name] = float(value)
    return float(sum(per_sensor.values())), per_sensor


def _inv_node(mat: ad.Node, dim: int) -> ad.Node:
    factor = ad.cholesky(mat)
    half = ad.triangular_solve(factor, ad.constant(np.eye(dim)), trans="N")
    return ad.triangular_solve(factor, half, trans="T")


def _split_leaves(leaves: dict | None, prefix: str) -> dict | None:
    if leaves is None:
        return None
    picked = {k[len(prefix):]: v for k, v in leaves.items() if k.startswith(prefix)}
    return picked or None


def _check_batch(model: Model, batch: TrajectoryBatch):
    if batch.u.shape[2] != model.input_dim:
        raise DimensionMismatch(
            f"batch inputs have dim {batch.u.shape[2]}, model expects {model.input_dim}")
    for name, seq in batch.obs.items():
        if name not in model.sensors:
            raise UnknownSensor(f"observations for unknown sensor {name!r}")
        if seq.shape[2] != model.sensors[name].obs_dim:
            raise DimensionMismatch(
                f"observations for {name!r} have dim {seq.shape[2]}, "
                f"sensor expects {model.sensors[name].obs_dim}")


def _build_graph(model: Model, batch: TrajectoryBatch, sample_count: int,
                 rng: np.random.Generator, leaves: dict | None):
    """Assemble the full bound as autodiff nodes; returns the scalar terms.

    Rows are laid out sample-major: row s*batch + b is sample s of
    trajectory b. eps draws come in a fixed order (final step, then each
    backward step), so a fixed seed pins the whole estimate.
    """
    _check_batch(model, batch)
    m = model.state_dim
    steps = batch.steps
    n = batch.batch_size
    psi = model.dynamics

    if leaves is not None and "dyn.a" in leaves:
        a_node = leaves["dyn.a"]
        b_node = leaves["dyn.b"]
        w_chol = ad.tril(leaves["dyn.w_chol"])
        sigma_w = ad.matmul(w_chol, ad.transpose(w_chol))
    else:
        a_node = ad.constant(psi.a)
        b_node = ad.constant(psi.b)
        sigma_w = ad.constant(psi.sigma_w)
    sigma_z = ad.constant(psi.sigma_z)
    sigma_z_inv = inv_psd(psi.sigma_z)

    # per-step input shifts B @ u_t as (n, m) nodes, shared by the filter,
    # the backward kernels, and the prior
    bu = [ad.matmul(ad.constant(batch.u[:, t]), ad.transpose(b_node))
          for t in range(steps - 1)]

    # evidence per sensor per step (precisions shared across the batch)
    evidence: list[list[tuple[ad.Node, ad.Node]]] = [[] for _ in range(steps)]
    for name, sensor in model.sensors.items():
        if name not in batch.obs:
            continue
        seq = batch.obs[name]
        sensor_leaves = _split_leaves(leaves, f"sensor.{name}.")
        for t in range(steps):
            if isinstance(sensor, LinearSensor):
                lam, eta = linear_evidence_graph(sensor, seq[:, t], sensor_leaves)
            else:
                lam, eta = encode_evidence_graph(sensor, seq[:, t], sigma_z_inv,
                                                 sensor_leaves)
            evidence[t].append((lam, eta))

    # forward filter, moment and information forms side by side
    post_cov: list[ad.Node] = []
    post_mean: list[ad.Node] = []
    post_lam: list[ad.Node] = []
    post_eta: list[ad.Node] = []
    for t in range(steps):
        if t == 0:
            pred_cov = sigma_z
            pred_mean = ad.constant(np.zeros((n, m)))
        else:
            pred_cov = ad.add(
                ad.matmul(ad.matmul(a_node, post_cov[-1]), ad.transpose(a_node)),
                sigma_w)
            pred_mean = ad.add(ad.matmul(post_mean[-1], ad.transpose(a_node)), bu[t - 1])
        lam_t = _inv_node(pred_cov, m)
        eta_t = ad.matmul(pred_mean, ad.transpose(lam_t))
        for lam_e, eta_e in evidence[t]:
            lam_t = ad.add(lam_t, lam_e)
            eta_t = ad.add(eta_t, eta_e)
        cov_t = _inv_node(lam_t, m)
        mean_t = ad.matmul(eta_t, ad.transpose(cov_t))
        post_cov.append(cov_t)
        post_mean.append(mean_t)
        post_lam.append(lam_t)
        post_eta.append(eta_t)

    # backward sampler, all samples at once
    rows = n * sample_count
    last_mean = ad.tile_rows(post_mean[-1], sample_count)
    factor = ad.cholesky(post_cov[-1])
    eps = rng.standard_normal((rows, m))
    z = [None] * steps
    z[-1] = ad.add(last_mean, ad.matmul(ad.constant(eps), ad.transpose(factor)))
    log_q = log_density_rows_node(last_mean, post_cov[-1], z[-1])
    w_inv = _inv_node(sigma_w, m)
    cross = ad.matmul(ad.transpose(a_node), w_inv)
    lam_trans = ad.matmul(cross, a_node)
    for t in range(steps - 2, -1, -1):
        l_prec = ad.add(post_lam[t], lam_trans)
        l_cov = _inv_node(l_prec, m)
        gain = ad.matmul(l_cov, cross)
        pull = ad.tile_rows(ad.matmul(post_eta[t], ad.transpose(l_cov)), sample_count)
        shifted = ad.sub(z[t + 1], ad.tile_rows(bu[t], sample_count))
        means = ad.add(ad.matmul(shifted, ad.transpose(gain)), pull)
        factor = ad.cholesky(l_cov)
        eps = rng.standard_normal((rows, m))
        z[t] = ad.add(means, ad.matmul(ad.constant(eps), ad.transpose(factor)))
        log_q = ad.add(log_q, log_density_rows_node(means, l_cov, z[t]))

    # prior density of the sampled trajectories
    log_prior = log_density_rows_node(ad.constant(np.zeros(m)), sigma_z, z[0])
    for t in range(steps - 1):
        mean_next = ad.add(ad.matmul(z[t], ad.transpose(a_node)),
                           ad.tile_rows(bu[t], sample_count))
        log_prior = ad.add(log_prior, log_density_rows_node(mean_next, sigma_w, z[t + 1]))

    # reconstruction, per sensor
    per_sensor_nodes: dict[str, ad.Node] = {}
    for name, sensor in model.sensors.items():
        if name not in batch.obs:
            continue
        seq = batch.obs[name]
        sensor_leaves = _split_leaves(leaves, f"sensor.{name}.")
        term = None
        for t in range(steps):
            x_rows = np.tile(seq[:, t], (sample_count, 1))
            if isinstance(sensor, LinearSensor):
                part = linear_log_density_graph(sensor, x_rows, z[t], sensor_leaves)
            else:
                part = decode_log_density_graph(sensor, x_rows, z[t], sensor_leaves)
            term = part if term is None else ad.add(term, part)
        per_sensor_nodes[name] = term

    recon_rows = None
    for term in per_sensor_nodes.values():
        recon_rows = term if recon_rows is None else ad.add(recon_rows, term)
    kl = ad.reduce_mean(ad.sub(log_q, log_prior))
    if recon_rows is None:
        recon = ad.constant(np.float64(0.0))
        total = ad.sub(recon, kl)
    else:
        recon = ad.reduce_mean(recon_rows)
        total = ad.sub(recon, kl)
    per_sensor = {name: ad.reduce_mean(node) for name, node in per_sensor_nodes.items()}
    return total, kl, recon, per_sensor


def _breakdown(total, kl, recon, per_sensor, sample_count: int) -> ElboBreakdown:
    return ElboBreakdown(
        total=float(total.value),
        kl_term=float(kl.value),
        recon_term=float(recon.value),
        per_sensor_recon={name: float(node.value) for name, node in per_sensor.items()},
        sample_count=sample_count,
    )


def elbo_estimate(model: Model, batch: TrajectoryBatch, sample_count: int,
                  rng: np.random.Generator) -> ElboBreakdown:
    """Monte-Carlo bound estimate; deterministic for a fixed rng state."""
    sample_count = int(sample_count)
    if sample_count < 1:
        raise DimensionMismatch(f"sample_count must be >= 1, got {sample_count}")
    total, kl, recon, per_sensor = _build_graph(model, batch, sample_count, rng, None)
    return _breakdown(total, kl, recon, per_sensor, sample_count)


def elbo_with_gradients(model: Model, batch: TrajectoryBatch, sample_count: int,
                        rng: np.random.Generator, params: dict | None = None,
                        learn_dynamics: bool = False):
    """Bound estimate plus gradients of the total w.r.t. trainable parameters.

    `params` overrides the trainable values stored in the model (the trainer
    keeps the flat dict as the source of truth); when omitted they are
    collected from the model. Returns (ElboBreakdown, grads) with grads keyed
    exactly like collect_params. Parameters untouched by the batch (e.g. a
    sensor with no observations) get zero gradients.
    """
    sample_count = int(sample_count)
    if sample_count < 1:
        raise DimensionMismatch(f"sample_count must be >= 1, got {sample_count}")
    if params is None:
        params = collect_params(model, learn_dynamics=learn_dynamics)
    known = collect_params(model, learn_dynamics=True)
    unknown = set(params) - set(known)
    if unknown:
        raise UnknownSensor(f"parameters {sorted(unknown)} match no model slot")
    leaves = {name: ad.leaf(value) for name, value in params.items()}
    total, kl, recon, per_sensor = _build_graph(model, batch, sample_count, rng,
                                                leaves or None)
    if not np.isfinite(total.value):
        raise NonFiniteError("elbo total is not finite")
    if not leaves:
        return _breakdown(total, kl, recon, per_sensor, sample_count), {}
    ad.backward(total)
    grads = {}
    for name, node in leaves.items():
        grad = node.grad if node.grad is not None else np.zeros_like(node.value)
        if not np.all(np.isfinite(grad)):
            raise NonFiniteError(f"gradient for {name} is not finite")
        grads[name] = grad
    return _breakdown(total, kl, recon, per_sensor, sample_count), grads
