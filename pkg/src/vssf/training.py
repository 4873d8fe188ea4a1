"""Optimization loop and filter evaluation.

Training maximizes the Monte-Carlo evidence bound by minibatch Adam on the
flat parameter dictionary. The parameter dict, not the model object, is the
source of truth during a run; the model is rebuilt from it once at the end.
Each step draws its minibatch and its bound samples from an rng keyed by
(seed, step), so a run resumed from any step reproduces the uninterrupted
trace bit for bit.

Supervision attaches one extra linear sensor reading the ground-truth states
(all components, or just the position components) with a fixed 0.05 I noise
model. It participates in training only; the returned model and all
evaluation exclude it.
"""

import dataclasses

import numpy as np

from .elbo import TrajectoryBatch, elbo_with_gradients
from .environments import Dataset
from .errors import (
    ConfigMismatch,
    MissingGroundTruth,
    NonFiniteError,
    NonFiniteGradient,
    NotPositiveDefinite,
    ShapeMismatch,
)
from .filtering import EvidenceBundle, filter_forward
from .lgssm import spectral_radius
from .model import (
    Model,
    SUPERVISED_SENSOR,
    collect_params,
    observation_bundles,
    with_params,
)
from .sensors import LinearSensor

SUPERVISED_NOISE = 0.05

# collapse alarm thresholds: a dynamics matrix this close to zero or a
# posterior this concentrated means the latent no longer carries information
COLLAPSE_RADIUS = 0.01
COLLAPSE_TRACE = 1e-6

SUPERVISION_MODES = ("none", "partial", "full")


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    batch_size: int
    steps: int
    sample_count: int = 1
    seed: int = 0
    supervision: str = "none"
    learn_dynamics: bool = False
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    clip_norm: float = 10.0
    log_interval: int = 50

    def __post_init__(self):
        if self.batch_size < 1 or self.steps < 1 or self.sample_count < 1:
            raise ConfigMismatch("batch_size, steps, sample_count must be positive")
        if self.learning_rate <= 0 or self.adam_epsilon <= 0 or self.clip_norm <= 0:
            raise ConfigMismatch("learning_rate, adam_epsilon, clip_norm must be positive")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ConfigMismatch("betas must lie strictly inside (0, 1)")
        if self.log_interval < 1:
            raise ConfigMismatch("log_interval must be positive")
        if self.supervision not in SUPERVISION_MODES:
            raise ConfigMismatch(f"supervision must be one of {SUPERVISION_MODES}")


@dataclasses.dataclass(frozen=True)
class CollapseDiagnostics:
    spectral_radius_a: float
    mean_posterior_trace: float
    evidence_norm: float

    @property
    def alarm(self) -> bool:
        return (self.spectral_radius_a < COLLAPSE_RADIUS
                or self.mean_posterior_trace < COLLAPSE_TRACE)


@dataclasses.dataclass(frozen=True)
class AdamState:
    m: dict
    v: dict
    step: int


class TrainingDiverged(NonFiniteError):
    """The bound or its gradients went non-finite mid-run.

    Carries the last finite state so the caller can checkpoint it.
    """

    def __init__(self, message, step, params, adam_state, trace):
        super().__init__(message)
        self.step = step
        self.params = params
        self.adam_state = adam_state
        self.trace = trace


def adam_init(params: dict) -> AdamState:
    zeros = lambda: {k: np.zeros_like(v) for k, v in params.items()}
    return AdamState(m=zeros(), v=zeros(), step=0)


def adam_step(params: dict, grads: dict, state: AdamState,
              config: TrainConfig):
    """One bias-corrected Adam update, minimization convention.

    Callers maximizing an objective pass the negated gradient. Returns the
    updated (params, state); inputs are not mutated.
    """
    if set(params) != set(grads) or set(params) != set(state.m):
        raise ShapeMismatch("params, grads, and optimizer state must share keys")
    t = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, value in params.items():
        grad = np.asarray(grads[name], dtype=np.float64)
        if grad.shape != value.shape:
            raise ShapeMismatch(
                f"gradient for {name} has shape {grad.shape}, expected {value.shape}")
        if not np.all(np.isfinite(grad)):
            raise NonFiniteGradient(f"gradient for {name} is not finite")
        m = config.beta1 * state.m[name] + (1.0 - config.beta1) * grad
        v = config.beta2 * state.v[name] + (1.0 - config.beta2) * grad * grad
        m_hat = m / (1.0 - config.beta1 ** t)
        v_hat = v / (1.0 - config.beta2 ** t)
        new_params[name] = value - config.learning_rate * m_hat / (
            np.sqrt(v_hat) + config.adam_epsilon)
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(m=new_m, v=new_v, step=t)


def clip_gradients(grads: dict, max_norm: float):
    """Scale the whole gradient dict so its global norm is at most max_norm."""
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if not np.isfinite(total):
        raise NonFiniteGradient("gradient norm is not finite")
    if total <= max_norm or total == 0.0:
        return dict(grads), total
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}, total


def _supervision_matrix(supervision, state_dim, descriptor):
    if supervision == "full":
        return np.eye(state_dim)
    indices = descriptor.get("position_indices")
    if not indices:
        raise ConfigMismatch(
            "partial supervision needs position_indices in the dataset descriptor")
    indices = [int(i) for i in indices]
    if any(i < 0 or i >= state_dim for i in indices):
        raise ConfigMismatch(f"position_indices {indices} out of range for m={state_dim}")
    return np.eye(state_dim)[indices]


def _training_setup(model, dataset, supervision):
    """Attach the supervision sensor and its observations, with validation."""
    if dataset.size < 1:
        raise ConfigMismatch("cannot train on an empty dataset")
    if dataset.input_dim != model.input_dim:
        raise ConfigMismatch(
            f"dataset inputs have dimension {dataset.input_dim}, "
            f"model expects {model.input_dim}")
    for name, sensor in model.sensors.items():
        if name == SUPERVISED_SENSOR:
            raise ConfigMismatch(
                f"sensor name {SUPERVISED_SENSOR!r} is reserved for supervision")
        if name not in dataset.obs:
            raise ConfigMismatch(f"dataset has no observations for sensor {name!r}")
        if dataset.obs[name].shape[2] != sensor.obs_dim:
            raise ConfigMismatch(
                f"observations for {name!r} have dimension "
                f"{dataset.obs[name].shape[2]}, sensor expects {sensor.obs_dim}")
    obs_arrays = {name: dataset.obs[name] for name in model.sensors}
    if supervision == "none":
        return model, obs_arrays
    if dataset.states is None:
        raise MissingGroundTruth("supervision requires ground-truth states")
    if dataset.states.shape[2] != model.state_dim:
        raise ConfigMismatch(
            f"ground truth has dimension {dataset.states.shape[2]}, "
            f"model expects {model.state_dim}")
    c = _supervision_matrix(supervision, model.state_dim, dataset.descriptor)
    sensor = LinearSensor(c=c, sigma_x=SUPERVISED_NOISE * np.eye(c.shape[0]))
    sensors = dict(model.sensors)
    sensors[SUPERVISED_SENSOR] = sensor
    obs_arrays[SUPERVISED_SENSOR] = np.einsum(
        "ntm,pm->ntp", dataset.states, c).astype(np.float32)
    return Model(dynamics=model.dynamics, sensors=sensors), obs_arrays


def _diagnostics(train_model, params, obs_arrays, u, learn_dynamics):
    current = with_params(train_model, params) if params else train_model
    a = params["dyn.a"] if learn_dynamics and "dyn.a" in params else current.dynamics.a
    obs = {name: arr.astype(np.float64) for name, arr in obs_arrays.items()}
    bundles = observation_bundles(current, obs)
    norms = [float(np.linalg.norm(item.eta_e))
             for bundle in bundles for item in bundle.items]
    if not bundles:
        bundles = [EvidenceBundle(()) for _ in range(u.shape[0] + 1)]
    beliefs = filter_forward(current.dynamics, bundles, u.astype(np.float64))
    traces = [float(np.trace(belief.posterior.cov)) for belief in beliefs]
    return CollapseDiagnostics(
        spectral_radius_a=spectral_radius(a),
        mean_posterior_trace=float(np.mean(traces)) if traces else 0.0,
        evidence_norm=float(np.mean(norms)) if norms else 0.0,
    )


@dataclasses.dataclass(frozen=True)
class TrainResult:
    model: Model
    params: dict
    adam_state: AdamState
    trace: list
    diagnostics: list
    collapse_steps: tuple


def train(model: Model, dataset: Dataset, config: TrainConfig, *,
          start_step: int = 0, params: dict = None,
          adam_state: AdamState = None) -> TrainResult:
    """Run minibatch ascent on the evidence bound.

    Pass start_step with the params and optimizer state from a checkpoint to
    continue a run; the per-step rng keying makes the continuation exact.
    """
    if (params is None) != (adam_state is None):
        raise ConfigMismatch("resume needs both params and optimizer state")
    if not 0 <= start_step <= config.steps:
        raise ConfigMismatch(
            f"start_step {start_step} outside [0, {config.steps}]")
    train_model, obs_arrays = _training_setup(model, dataset, config.supervision)
    expected = collect_params(train_model, learn_dynamics=config.learn_dynamics)
    if params is None:
        params = expected
        adam_state = adam_init(params)
    else:
        if set(params) != set(expected):
            raise ConfigMismatch(
                "resumed parameters do not match the model's trainable groups")
        params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}

    n = dataset.size
    trace, diagnostics, collapse_steps = [], [], []
    for step in range(start_step, config.steps):
        rng = np.random.default_rng([config.seed, step])
        idx = rng.integers(0, n, size=config.batch_size)
        batch = TrajectoryBatch(
            obs={name: arr[idx].astype(np.float64)
                 for name, arr in obs_arrays.items()},
            u=dataset.u[idx].astype(np.float64))
        try:
            breakdown, grads = elbo_with_gradients(
                train_model, batch, config.sample_count, rng,
                params=params, learn_dynamics=config.learn_dynamics)
            ascent = {k: -g for k, g in grads.items()}
            clipped, _ = clip_gradients(ascent, config.clip_norm)
            params, adam_state = adam_step(params, clipped, adam_state, config)
        except (NonFiniteError, NotPositiveDefinite, np.linalg.LinAlgError) as exc:
            raise TrainingDiverged(
                f"training diverged at step {step}: {exc}",
                step=step, params=params, adam_state=adam_state, trace=trace,
            ) from exc
        rho_a = spectral_radius(
            params["dyn.a"]) if config.learn_dynamics else spectral_radius(
            model.dynamics.a)
        trace.append({
            "step": step,
            "elbo": breakdown.total,
            "kl": breakdown.kl_term,
            "recon": breakdown.recon_term,
            "rho_a": rho_a,
        })
        if step % config.log_interval == 0 or step == config.steps - 1:
            first = int(idx[0])
            report = _diagnostics(
                train_model, params,
                {name: arr[first] for name, arr in obs_arrays.items()},
                dataset.u[first], config.learn_dynamics)
            diagnostics.append((step, report))
            print(f"step={step} elbo={breakdown.total:.6f} "
                  f"kl={breakdown.kl_term:.6f} recon={breakdown.recon_term:.6f} "
                  f"rho_A={report.spectral_radius_a:.6f}")
            if report.alarm:
                collapse_steps.append(step)
                print(f"collapse warning at step {step}: "
                      f"rho_A={report.spectral_radius_a:.3e} "
                      f"posterior_trace={report.mean_posterior_trace:.3e}")

    final = with_params(train_model, params) if params else train_model
    final = Model(dynamics=final.dynamics,
                  sensors={k: v for k, v in final.sensors.items()
                           if k != SUPERVISED_SENSOR})
    return TrainResult(model=final, params=params, adam_state=adam_state,
                       trace=trace, diagnostics=diagnostics,
                       collapse_steps=tuple(collapse_steps))


@dataclasses.dataclass(frozen=True)
class EvalReport:
    component_mse: np.ndarray
    per_step_mse: np.ndarray
    horizon: int
    trajectory_count: int

    def __post_init__(self):
        object.__setattr__(self, "component_mse",
                           np.asarray(self.component_mse, dtype=np.float64))
        object.__setattr__(self, "per_step_mse",
                           np.asarray(self.per_step_mse, dtype=np.float64))


def evaluate_filter(model: Model, dataset: Dataset, horizon: int) -> EvalReport:
    """Filter each trajectory and score the posterior mean against the truth.

    Only the dataset's native sensors feed the filter; the supervision sensor,
    if present on the model, is excluded. Returns squared error per state
    component, averaged per step and overall.
    """
    horizon = int(horizon)
    if horizon < 1:
        raise ConfigMismatch("horizon must be positive")
    if dataset.states is None:
        raise MissingGroundTruth("evaluation requires ground-truth states")
    if dataset.steps < horizon:
        raise ConfigMismatch(
            f"dataset trajectories have {dataset.steps} steps, need {horizon}")
    if dataset.size < 1:
        raise ConfigMismatch("cannot evaluate on an empty dataset")
    if dataset.states.shape[2] != model.state_dim:
        raise ConfigMismatch(
            f"ground truth has dimension {dataset.states.shape[2]}, "
            f"model expects {model.state_dim}")
    sensors = {name: s for name, s in model.sensors.items()
               if name != SUPERVISED_SENSOR}
    for name, sensor in sensors.items():
        if name not in dataset.obs:
            raise ConfigMismatch(f"dataset has no observations for sensor {name!r}")
        if dataset.obs[name].shape[2] != sensor.obs_dim:
            raise ConfigMismatch(
                f"observations for {name!r} have dimension "
                f"{dataset.obs[name].shape[2]}, sensor expects {sensor.obs_dim}")
    eval_model = Model(dynamics=model.dynamics, sensors=sensors)
    m = model.state_dim
    total_sq = np.zeros((horizon, m))
    for i in range(dataset.size):
        if sensors:
            obs_i = {name: dataset.obs[name][i, :horizon].astype(np.float64)
                     for name in sensors}
            bundles = observation_bundles(eval_model, obs_i)
        else:
            bundles = [EvidenceBundle(()) for _ in range(horizon)]
        beliefs = filter_forward(
            eval_model.dynamics, bundles,
            dataset.u[i, :horizon - 1].astype(np.float64))
        means = np.stack([belief.posterior.mean for belief in beliefs])
        truth = dataset.states[i, :horizon].astype(np.float64)
        total_sq += (means - truth) ** 2
    per_step = total_sq / dataset.size
    return EvalReport(component_mse=per_step.mean(axis=0), per_step_mse=per_step,
                      horizon=horizon, trajectory_count=dataset.size)
