"""Sensor models and their information-form evidence.

Every sensor contributes evidence (eta_e, lambda_e) that the filter adds to
the predicted belief's natural parameters. For a linear readout
x = C z + noise the evidence is exact Bayes: lambda_e = C^T R^-1 C (rank
deficient when the readout is partial) and eta_e = C^T R^-1 x.

For an image sensor the evidence comes from an amortized Gaussian
recognition term N(r(x), H) divided by the latent prior N(0, sigma_z):
the precision lambda_e = (L^T L + eps I)^-1 depends only on the learned
factor L, never on the observation, so it is positive definite by
construction; the information vector is eta_e = (lambda_e + sigma_z^-1) r(x).
Fusing that evidence with the prior alone reproduces the recognition
Gaussian exactly.

Each evidence/density computation has a plain numpy form and a graph form
(suffix _graph) used by the trainer; the two must agree to the last bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Mlp, mlp_forward
from .errors import DimensionMismatch, NotPositiveDefinite
from .gaussian import (
    GaussianInfo,
    GaussianMoment,
    chol_psd,
    inv_psd,
    log_density,
    log_density_rows,
    log_density_rows_node,
    product_info,
    symmetrize,
    to_info,
    to_moment,
)

PSD_TOL = 1e-10


@dataclass(frozen=True)
class LinearSensor:
    """Noisy linear readout of the latent state."""

    c: np.ndarray
    sigma_x: np.ndarray
    trainable: bool = False

    def __post_init__(self):
        c = np.array(self.c, dtype=np.float64)
        if c.ndim != 2:
            raise DimensionMismatch(f"c must be 2-d, got shape {c.shape}")
        if c.shape[0] > c.shape[1]:
            raise DimensionMismatch("readout dimension cannot exceed the state dimension")
        sigma_x = symmetrize(np.array(self.sigma_x, dtype=np.float64))
        if sigma_x.shape != (c.shape[0], c.shape[0]):
            raise DimensionMismatch("sigma_x must match the readout dimension")
        chol_psd(sigma_x)
        c.flags.writeable = False
        sigma_x.flags.writeable = False
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "sigma_x", sigma_x)

    @property
    def obs_dim(self) -> int:
        return self.c.shape[0]

    @property
    def state_dim(self) -> int:
        return self.c.shape[1]


@dataclass(frozen=True)
class NonlinearSensor:
    """Image sensor: MLP encoder for evidence, MLP decoder for likelihood.

    evidence_factor is the learned L with lambda_e = (L^T L + epsilon I)^-1;
    decoder_sigma_x is the fixed observation covariance of the decoder.
    """

    encoder: Mlp
    evidence_factor: np.ndarray
    decoder: Mlp
    decoder_sigma_x: np.ndarray
    epsilon: float = 1e-4

    def __post_init__(self):
        m = self.encoder.out_dim
        p = self.encoder.in_dim
        if self.decoder.in_dim != m or self.decoder.out_dim != p:
            raise DimensionMismatch(
                f"decoder ({self.decoder.in_dim}->{self.decoder.out_dim}) must mirror "
                f"encoder ({p}->{m})"
            )
        factor = np.array(self.evidence_factor, dtype=np.float64)
        if factor.shape != (m, m):
            raise DimensionMismatch(f"evidence_factor must be ({m}, {m}), got {factor.shape}")
        sigma = symmetrize(np.array(self.decoder_sigma_x, dtype=np.float64))
        if sigma.shape != (p, p):
            raise DimensionMismatch(f"decoder_sigma_x must be ({p}, {p}), got {sigma.shape}")
        chol_psd(sigma)
        if not self.epsilon > 0:
            raise DimensionMismatch("epsilon must be positive")
        factor.flags.writeable = False
        sigma.flags.writeable = False
        object.__setattr__(self, "evidence_factor", factor)
        object.__setattr__(self, "decoder_sigma_x", sigma)

    @property
    def obs_dim(self) -> int:
        return self.encoder.in_dim

    @property
    def state_dim(self) -> int:
        return self.encoder.out_dim


@dataclass(frozen=True)
class SensorEvidence:
    """Information-form evidence contribution of one sensor at one step."""

    eta_e: np.ndarray
    lambda_e: np.ndarray

    def __post_init__(self):
        eta = np.array(self.eta_e, dtype=np.float64)
        if eta.ndim != 1:
            raise DimensionMismatch(f"eta_e must be a vector, got shape {eta.shape}")
        lam = symmetrize(np.array(self.lambda_e, dtype=np.float64))
        if lam.shape != (eta.shape[0], eta.shape[0]):
            raise DimensionMismatch("lambda_e must match eta_e")
        smallest = np.linalg.eigvalsh(lam).min()
        if smallest < -PSD_TOL * max(1.0, np.abs(lam).max()):
            raise NotPositiveDefinite(f"lambda_e has negative eigenvalue {smallest:.3e}")
        eta.flags.writeable = False
        lam.flags.writeable = False
        object.__setattr__(self, "eta_e", eta)
        object.__setattr__(self, "lambda_e", lam)

    @property
    def dim(self) -> int:
        return self.eta_e.shape[0]


# --- linear sensor ---

def _check_obs(sensor, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (sensor.obs_dim,):
        raise DimensionMismatch(f"observation must have shape ({sensor.obs_dim},), got {x.shape}")
    return x


def linear_evidence(sensor: LinearSensor, x) -> SensorEvidence:
    """Exact evidence of a linear observation: (C^T R^-1 x, C^T R^-1 C)."""
    x = _check_obs(sensor, x)
    r_inv_c = np.linalg.solve(sensor.sigma_x, sensor.c)
    return SensorEvidence(eta_e=r_inv_c.T @ x, lambda_e=sensor.c.T @ r_inv_c)


def linear_posterior(sensor: LinearSensor, x, prior: GaussianMoment) -> GaussianMoment:
    """Condition a Gaussian prior on one linear observation."""
    evidence = linear_evidence(sensor, x)
    fused = product_info(to_info(prior), GaussianInfo(eta=evidence.eta_e, lam=evidence.lambda_e))
    return to_moment(fused)


def linear_log_density(sensor: LinearSensor, x, z) -> float:
    """log N(x; C z, sigma_x)."""
    x = _check_obs(sensor, x)
    z = np.asarray(z, dtype=np.float64)
    return log_density(GaussianMoment(mean=sensor.c @ z, cov=sensor.sigma_x), x)


# --- nonlinear sensor ---

def evidence_precision(sensor: NonlinearSensor) -> np.ndarray:
    """lambda_e = (L^T L + epsilon I)^-1; constant across observations."""
    l = sensor.evidence_factor
    return inv_psd(l.T @ l + sensor.epsilon * np.eye(sensor.state_dim))


def encode_evidence(sensor: NonlinearSensor, x, sigma_z: np.ndarray) -> SensorEvidence:
    """Evidence of one image under the recognition model.

    sigma_z is the latent prior covariance being divided out; eta_e is
    (lambda_e + sigma_z^-1) r(x) so that evidence times prior recovers the
    recognition Gaussian N(r(x), (lambda_e + sigma_z^-1)^-1) exactly.
    """
    x = _check_obs(sensor, x)
    lam = evidence_precision(sensor)
    r = mlp_forward(sensor.encoder, x)
    eta = (lam + inv_psd(sigma_z)) @ r
    return SensorEvidence(eta_e=eta, lambda_e=lam)


def encode_evidence_batch(sensor: NonlinearSensor, x_rows: np.ndarray,
                          sigma_z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized evidence for (n, obs_dim) observations.

    Returns (lambda_e, eta_rows) with eta_rows of shape (n, state_dim);
    lambda_e is shared by every row.
    """
    x_rows = np.asarray(x_rows, dtype=np.float64)
    if x_rows.ndim != 2 or x_rows.shape[1] != sensor.obs_dim:
        raise DimensionMismatch(f"x_rows must be (n, {sensor.obs_dim}), got {x_rows.shape}")
    lam = evidence_precision(sensor)
    r = mlp_forward(sensor.encoder, x_rows)
    eta_rows = r @ (lam + inv_psd(sigma_z)).T
    return lam, eta_rows


def decode_log_density(sensor: NonlinearSensor, x, z) -> float:
    """log N(x; decoder(z), decoder_sigma_x)."""
    x = _check_obs(sensor, x)
    z = np.asarray(z, dtype=np.float64)
    mean = mlp_forward(sensor.decoder, z)
    return log_density(GaussianMoment(mean=mean, cov=sensor.decoder_sigma_x), x)


def decode_log_density_rows(sensor: NonlinearSensor, x_rows: np.ndarray,
                            z_rows: np.ndarray) -> np.ndarray:
    """Vectorized decoder log densities, one per row."""
    means = mlp_forward(sensor.decoder, np.asarray(z_rows, dtype=np.float64))
    return log_density_rows(means, sensor.decoder_sigma_x, x_rows)


# --- graph twins (differentiable paths used by the trainer) ---
#
# Parameter leaves are passed as a dict; a sensor with no entry in the dict
# contributes constants. Leaf keys follow the parameter naming used by the
# trainer: "c", "x_chol" for linear sensors; "enc.w{i}", "enc.b{i}", "L",
# "dec.w{i}", "dec.b{i}" for nonlinear ones.


def _mlp_leaves(mlp: Mlp, leaves: dict | None, prefix: str):
    if leaves is None:
        return None
    pairs = []
    for i in range(len(mlp.weights)):
        wk, bk = f"{prefix}.w{i}", f"{prefix}.b{i}"
        if wk not in leaves:
            return None
        pairs.append((leaves[wk], leaves[bk]))
    return pairs


def linear_evidence_graph(sensor: LinearSensor, x_rows: np.ndarray, leaves: dict | None = None):
    """(lambda_e node, eta-rows node) for a block of linear observations."""
    if leaves is not None and "c" in leaves:
        c = leaves["c"]
        x_chol = ad.tril(leaves["x_chol"])
        sigma_x = ad.matmul(x_chol, ad.transpose(x_chol))
    else:
        c = ad.constant(sensor.c)
        sigma_x = ad.constant(sensor.sigma_x)
    factor = ad.cholesky(sigma_x)
    r_inv_c = ad.triangular_solve(factor, ad.triangular_solve(factor, c, trans="N"), trans="T")
    lam = ad.matmul(ad.transpose(c), r_inv_c)
    eta_rows = ad.matmul(ad.constant(np.asarray(x_rows, dtype=np.float64)), r_inv_c)
    return lam, eta_rows


def linear_sigma_x_graph(sensor: LinearSensor, leaves: dict | None = None):
    """The (possibly learned) observation covariance as a graph node."""
    if leaves is not None and "x_chol" in leaves:
        x_chol = ad.tril(leaves["x_chol"])
        return ad.matmul(x_chol, ad.transpose(x_chol))
    return ad.constant(sensor.sigma_x)


def linear_log_density_graph(sensor: LinearSensor, x_rows: np.ndarray, z_rows,
                             leaves: dict | None = None):
    """Row-wise log N(x; C z, sigma_x) with gradients through C, sigma_x, z."""
    c = leaves["c"] if leaves is not None and "c" in leaves else ad.constant(sensor.c)
    sigma_x = linear_sigma_x_graph(sensor, leaves)
    means = ad.matmul(z_rows, ad.transpose(c))
    return log_density_rows_node(means, sigma_x, ad.constant(np.asarray(x_rows, dtype=np.float64)))


def evidence_precision_graph(sensor: NonlinearSensor, leaves: dict | None = None):
    """lambda_e = (L^T L + eps I)^-1 as a graph node."""
    l = leaves["L"] if leaves is not None and "L" in leaves else ad.constant(sensor.evidence_factor)
    m = sensor.state_dim
    gram = ad.add(ad.matmul(ad.transpose(l), l), ad.constant(sensor.epsilon * np.eye(m)))
    factor = ad.cholesky(gram)
    inv = ad.triangular_solve(factor, ad.triangular_solve(factor, ad.constant(np.eye(m)), trans="N"), trans="T")
    return inv


def encode_evidence_graph(sensor: NonlinearSensor, x_rows: np.ndarray,
                          sigma_z_inv: np.ndarray, leaves: dict | None = None):
    """(lambda_e node, eta-rows node) for a block of image observations."""
    lam = evidence_precision_graph(sensor, leaves)
    enc = _mlp_leaves(sensor.encoder, leaves, "enc")
    r = ad.mlp_apply(sensor.encoder, ad.constant(np.asarray(x_rows, dtype=np.float64)), layer_leaves=enc)
    eta_rows = ad.matmul(r, ad.transpose(ad.add(lam, ad.constant(sigma_z_inv))))
    return lam, eta_rows


def decode_log_density_graph(sensor: NonlinearSensor, x_rows: np.ndarray, z_rows,
                             leaves: dict | None = None):
    """Row-wise decoder log densities with gradients through z and weights."""
    dec = _mlp_leaves(sensor.decoder, leaves, "dec")
    means = ad.mlp_apply(sensor.decoder, z_rows, layer_leaves=dec)
    x = ad.constant(np.asarray(x_rows, dtype=np.float64))
    return log_density_rows_node(means, ad.constant(sensor.decoder_sigma_x), x)
