"""Synthetic data generators.

Two desk-scale environments share one recipe: exactly linear latent dynamics
(so ground-truth filtering is well defined) with all nonlinearity pushed into
the rendering that produces image observations.

* Pendulum: damped angle/velocity pair, rendered as an anti-aliased rod whose
  visual angle is squashed through 3.14*tanh(theta/3.14) so it stays inside
  (-pi, pi) however far the latent angle wanders.
* Double integrator: marginally stable planar motion observed through 16x16
  patches of a fixed random-Fourier terrain field, so the image is a smooth,
  position-dependent signature of (x, y).

Images depend on the latent only through the position components; velocities
are observable solely through how the images move.
"""

import dataclasses
import functools

import numpy as np

from .errors import DimensionMismatch, NonFiniteError, NotStable
from .lgssm import DynamicsParams, sample_trajectory, spectral_radius, stationary_covariance

IMAGE_SENSOR = "image"

# rod geometry in the [-1, 1]^2 image frame
ROD_LENGTH = 0.8
ROD_WIDTH = 0.08

# terrain field: correlation length as a fraction of the patch width; short
# enough that distant patches share no trend, coarse enough for the 16-pixel
# grid to resolve the field smoothly
FIELD_CORRELATION = 0.12


@dataclasses.dataclass(frozen=True)
class PendulumEnv:
    """Damped pendulum with torque input, observed as a rendered rod."""

    dt: float = 0.1
    damping: float = 0.1
    omega: float = 0.9
    process_noise: float = 0.05
    input_scale: float = 0.5
    image_size: int = 16

    def __post_init__(self):
        if self.dt <= 0 or self.process_noise <= 0 or self.input_scale < 0:
            raise DimensionMismatch("dt, process_noise must be positive")
        if self.damping < 0 or self.omega <= 0:
            raise DimensionMismatch("damping must be >= 0 and omega > 0")
        if self.image_size < 2:
            raise DimensionMismatch("image_size must be at least 2")

    @property
    def state_dim(self) -> int:
        return 2

    @property
    def input_dim(self) -> int:
        return 1

    @property
    def position_indices(self) -> tuple:
        return (0,)

    def descriptor(self) -> dict:
        return {
            "env": "pendulum",
            "dt": self.dt,
            "damping": self.damping,
            "omega": self.omega,
            "process_noise": self.process_noise,
            "input_scale": self.input_scale,
            "image_size": self.image_size,
            "state_dim": 2,
            "input_dim": 1,
            "position_indices": [0],
        }


@dataclasses.dataclass(frozen=True)
class DoubleIntegratorEnv:
    """Planar double integrator with acceleration input and a terrain camera."""

    dt: float = 0.1
    accel_noise: float = 0.05
    input_scale: float = 0.5
    image_size: int = 16
    patch_width: float = 1.0
    feature_count: int = 128
    field_seed: int = 7
    position_bound: float = 4.0

    def __post_init__(self):
        if self.dt <= 0 or self.accel_noise <= 0 or self.input_scale < 0:
            raise DimensionMismatch("dt, accel_noise must be positive")
        if self.image_size < 2 or self.feature_count < 1:
            raise DimensionMismatch("image_size and feature_count must be positive")
        if self.patch_width <= 0 or self.position_bound <= 0:
            raise DimensionMismatch("patch_width and position_bound must be positive")

    @property
    def state_dim(self) -> int:
        return 4

    @property
    def input_dim(self) -> int:
        return 2

    @property
    def position_indices(self) -> tuple:
        return (0, 1)

    def descriptor(self) -> dict:
        return {
            "env": "integrator",
            "dt": self.dt,
            "accel_noise": self.accel_noise,
            "input_scale": self.input_scale,
            "image_size": self.image_size,
            "patch_width": self.patch_width,
            "feature_count": self.feature_count,
            "field_seed": self.field_seed,
            "position_bound": self.position_bound,
            "state_dim": 4,
            "input_dim": 2,
            "position_indices": [0, 1],
        }


def pendulum_dynamics(env: PendulumEnv) -> DynamicsParams:
    """Euler discretization of a damped linear pendulum.

    A = [[1, dt], [-omega^2 dt, 1 - damping dt]]; B injects torque into the
    velocity row; sigma_w is the standard white-acceleration discretization
    scaled by process_noise; sigma_z is the stationary fixed point.
    """
    dt = env.dt
    a = np.array([[1.0, dt], [-env.omega ** 2 * dt, 1.0 - env.damping * dt]])
    radius = spectral_radius(a)
    if radius >= 1.0:
        raise NotStable(
            f"pendulum discretization has spectral radius {radius:.6f}; "
            "reduce dt or omega, or increase damping"
        )
    b = np.array([[0.0], [dt]])
    sigma_w = env.process_noise * np.array(
        [[dt ** 3 / 3.0, dt ** 2 / 2.0], [dt ** 2 / 2.0, dt]]
    )
    sigma_z = stationary_covariance(a, sigma_w)
    return DynamicsParams(a=a, b=b, sigma_w=sigma_w, sigma_z=sigma_z,
                          stationary_consistent=True)


def integrator_dynamics(env: DoubleIntegratorEnv) -> DynamicsParams:
    """Marginally stable planar double integrator.

    No stationary prior exists (spectral radius is exactly one), so sigma_z
    is a fixed diagonal spread over start positions and velocities.
    """
    dt = env.dt
    a = np.eye(4)
    a[0, 2] = dt
    a[1, 3] = dt
    b = np.zeros((4, 2))
    b[2, 0] = dt
    b[3, 1] = dt
    q = env.accel_noise
    sigma_w = np.zeros((4, 4))
    for pos, vel in ((0, 2), (1, 3)):
        sigma_w[pos, pos] = q * dt ** 3 / 3.0
        sigma_w[pos, vel] = sigma_w[vel, pos] = q * dt ** 2 / 2.0
        sigma_w[vel, vel] = q * dt
    sigma_z = np.diag([4.0, 4.0, 0.25, 0.25])
    return DynamicsParams(a=a, b=b, sigma_w=sigma_w, sigma_z=sigma_z)


def render_pendulum(env: PendulumEnv, theta: float) -> np.ndarray:
    """Render the rod at visual angle 3.14*tanh(theta/3.14).

    Returns a flattened image_size^2 vector in [0, 1], row-major with row 0 at
    the top. Angle 0 points straight up; positive angles rotate clockwise.
    """
    theta = float(theta)
    if not np.isfinite(theta):
        raise NonFiniteError("theta must be finite")
    visual = 3.14 * np.tanh(theta / 3.14)
    size = env.image_size
    coords = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    xs = coords[None, :]
    ys = -coords[:, None]
    dx, dy = np.sin(visual), np.cos(visual)
    along = np.clip(xs * dx + ys * dy, 0.0, ROD_LENGTH)
    off_x = xs - along * dx
    off_y = ys - along * dy
    image = np.exp(-0.5 * (off_x ** 2 + off_y ** 2) / ROD_WIDTH ** 2)
    return image.ravel()


@functools.lru_cache(maxsize=8)
def _terrain_features(env: DoubleIntegratorEnv):
    # frequencies ~ N(0, 1/len^2) approximate a squared-exponential field
    rng = np.random.default_rng(env.field_seed)
    length = FIELD_CORRELATION * env.patch_width
    freqs = rng.normal(0.0, 1.0 / length, size=(env.feature_count, 2))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=env.feature_count)
    for arr in (freqs, phases):
        arr.flags.writeable = False
    return freqs, phases


def render_terrain_patch(env: DoubleIntegratorEnv, x: float, y: float) -> np.ndarray:
    """Sample the fixed terrain field on a patch grid centered at (x, y).

    Returns a flattened image_size^2 vector in [0, 1], row-major with row 0 at
    the top (larger world y).
    """
    x, y = float(x), float(y)
    if not (np.isfinite(x) and np.isfinite(y)):
        raise NonFiniteError("patch center must be finite")
    freqs, phases = _terrain_features(env)
    size = env.image_size
    offsets = ((np.arange(size) + 0.5) / size - 0.5) * env.patch_width
    col, row = np.meshgrid(offsets, offsets)
    points = np.stack([(x + col).ravel(), (y - row).ravel()], axis=1)
    field = np.cos(points @ freqs.T + phases).sum(axis=1)
    field *= np.sqrt(2.0 / env.feature_count)
    return 0.5 + 0.5 * np.tanh(field / 2.0)


def _render_state(env, state: np.ndarray) -> np.ndarray:
    if isinstance(env, PendulumEnv):
        return render_pendulum(env, state[0])
    return render_terrain_patch(env, state[0], state[1])


def environment_dynamics(env) -> DynamicsParams:
    if isinstance(env, PendulumEnv):
        return pendulum_dynamics(env)
    if isinstance(env, DoubleIntegratorEnv):
        return integrator_dynamics(env)
    raise DimensionMismatch(f"not an environment: {type(env).__name__}")


def environment_from_descriptor(descriptor: dict):
    """Rebuild the generating environment from a dataset descriptor."""
    kind = descriptor.get("env")
    common = {k: v for k, v in descriptor.items()
              if k not in ("env", "state_dim", "input_dim", "position_indices")}
    if kind == "pendulum":
        return PendulumEnv(**common)
    if kind == "integrator":
        return DoubleIntegratorEnv(**common)
    raise DimensionMismatch(f"unknown environment kind: {kind!r}")


@dataclasses.dataclass(frozen=True)
class Dataset:
    """Trajectory corpus: per-sensor observations, inputs, and ground truth.

    Arrays are float32 (the on-disk dtype). Ground truth is optional in the
    type so files without it can still be represented; every generated
    dataset carries it, and it is only ever used for supervision wiring and
    evaluation, never as filter evidence.
    """

    obs: dict
    u: np.ndarray
    states: np.ndarray
    descriptor: dict
    seed: int

    def __post_init__(self):
        u = np.ascontiguousarray(np.asarray(self.u, dtype=np.float32))
        if u.ndim != 3:
            raise DimensionMismatch(f"u must be (n, T-1, d), got {u.shape}")
        n, steps_minus_one, _ = u.shape
        steps = steps_minus_one + 1
        obs = {}
        for name, arr in self.obs.items():
            arr = np.ascontiguousarray(np.asarray(arr, dtype=np.float32))
            if arr.ndim != 3 or arr.shape[0] != n or arr.shape[1] != steps:
                raise DimensionMismatch(
                    f"observations for {name!r} must be ({n}, {steps}, p), "
                    f"got {arr.shape}"
                )
            if not np.all(np.isfinite(arr)):
                raise NonFiniteError(f"observations for {name!r} are not finite")
            arr.flags.writeable = False
            obs[name] = arr
        states = self.states
        if states is not None:
            states = np.ascontiguousarray(np.asarray(states, dtype=np.float32))
            if states.ndim != 3 or states.shape[:2] != (n, steps):
                raise DimensionMismatch(
                    f"states must be ({n}, {steps}, m), got {states.shape}"
                )
            if not np.all(np.isfinite(states)):
                raise NonFiniteError("ground-truth states are not finite")
            states.flags.writeable = False
        if not np.all(np.isfinite(u)):
            raise NonFiniteError("inputs are not finite")
        u.flags.writeable = False
        object.__setattr__(self, "obs", obs)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "descriptor", dict(self.descriptor))
        object.__setattr__(self, "seed", int(self.seed))

    @property
    def size(self) -> int:
        return self.u.shape[0]

    @property
    def steps(self) -> int:
        return self.u.shape[1] + 1

    @property
    def input_dim(self) -> int:
        return self.u.shape[2]


def generate(env, n: int, steps: int, seed: int) -> Dataset:
    """Sample n trajectories of the given length and render their images.

    Trajectory i is drawn from rng [seed, i], so generation is reproducible
    and order-independent. Inputs are N(0, input_scale^2) per component.
    """
    n, steps = int(n), int(steps)
    if n < 0 or steps < 1:
        raise DimensionMismatch("need n >= 0 and steps >= 1")
    psi = environment_dynamics(env)
    m, d = psi.state_dim, psi.input_dim
    pixels = env.image_size ** 2
    images = np.empty((n, steps, pixels), dtype=np.float32)
    inputs = np.empty((n, steps - 1, d), dtype=np.float32)
    states = np.empty((n, steps, m), dtype=np.float32)
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        u_i = env.input_scale * rng.standard_normal((steps - 1, d))
        z_i = sample_trajectory(psi, u_i, rng)
        inputs[i] = u_i
        states[i] = z_i
        for t in range(steps):
            # render from the stored float32 state so the dataset is
            # self-consistent after the storage round trip
            images[i, t] = _render_state(env, states[i, t].astype(np.float64))
    return Dataset(obs={IMAGE_SENSOR: images}, u=inputs, states=states,
                   descriptor=env.descriptor(), seed=seed)
