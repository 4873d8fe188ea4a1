"""Variational state-space filtering with linear latent dynamics.

Information-form forward filtering over a linear-Gaussian latent chain,
heterogeneous sensor fusion (linear readouts and learned image encoders),
a backward-factorized smoothing sampler, and Monte-Carlo ELBO training of
the observation (and optionally dynamics) parameters.
"""

from . import errors
from .datastore import (
    Checkpoint,
    read_checkpoint,
    read_dataset,
    write_checkpoint,
    write_dataset,
)
from .elbo import (
    ElboBreakdown,
    TrajectoryBatch,
    elbo_estimate,
    elbo_with_gradients,
    prior_log_density,
    reconstruction_log_density,
)
from .environments import Dataset, DoubleIntegratorEnv, PendulumEnv, generate
from .filtering import (
    EvidenceBundle,
    FilterBelief,
    filter_forward,
    filter_step,
    linear_marginal_log_likelihood,
)
from .gaussian import (
    GaussianInfo,
    GaussianMoment,
    log_density,
    product_info,
    sample,
    to_info,
    to_moment,
)
from .lgssm import (
    DynamicsParams,
    predict,
    prior_belief,
    sample_trajectory,
    spectral_radius,
    stationary_covariance,
)
from .model import (
    Model,
    collect_params,
    observation_bundles,
    structure_descriptor,
    with_params,
)
from .sensors import (
    LinearSensor,
    NonlinearSensor,
    SensorEvidence,
    decode_log_density,
    encode_evidence,
    evidence_precision,
    linear_evidence,
)
from .smoothing import (
    SmoothingSample,
    rts_smooth,
    sample_smoothing,
    smoothing_log_density,
    smoothing_marginals,
)
from .training import (
    EvalReport,
    TrainConfig,
    TrainResult,
    TrainingDiverged,
    evaluate_filter,
    train,
)

__all__ = [
    "errors",
    # gaussian algebra
    "GaussianMoment",
    "GaussianInfo",
    "to_info",
    "to_moment",
    "product_info",
    "log_density",
    "sample",
    # dynamics
    "DynamicsParams",
    "prior_belief",
    "predict",
    "sample_trajectory",
    "spectral_radius",
    "stationary_covariance",
    # sensors
    "LinearSensor",
    "NonlinearSensor",
    "SensorEvidence",
    "linear_evidence",
    "encode_evidence",
    "evidence_precision",
    "decode_log_density",
    # filtering
    "EvidenceBundle",
    "FilterBelief",
    "filter_step",
    "filter_forward",
    "linear_marginal_log_likelihood",
    # smoothing
    "SmoothingSample",
    "sample_smoothing",
    "smoothing_log_density",
    "smoothing_marginals",
    "rts_smooth",
    # objective
    "TrajectoryBatch",
    "ElboBreakdown",
    "prior_log_density",
    "reconstruction_log_density",
    "elbo_estimate",
    "elbo_with_gradients",
    # model and training
    "Model",
    "collect_params",
    "with_params",
    "observation_bundles",
    "structure_descriptor",
    "TrainConfig",
    "TrainResult",
    "TrainingDiverged",
    "EvalReport",
    "train",
    "evaluate_filter",
    # environments and persistence
    "PendulumEnv",
    "DoubleIntegratorEnv",
    "Dataset",
    "generate",
    "Checkpoint",
    "write_dataset",
    "read_dataset",
    "write_checkpoint",
    "read_checkpoint",
]
