"""Shared test oracles and generators.

The oracles here are deliberately independent of the package internals: the
Kalman oracle works in covariance form with Joseph updates, the grid oracle
does brute-force Bayes on a dense 1-d grid, and the finite-difference helper
is plain central differences. Tests compare package output against these.
A small adapter section at the bottom builds package objects from the plain
system dicts; the oracles never touch it.
"""

from __future__ import annotations

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))


# --- random problem generators ---

def random_spd(rng: np.random.Generator, n: int, scale: float = 1.0) -> np.ndarray:
    """Random symmetric positive definite matrix with bounded conditioning."""
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    eigs = rng.uniform(0.3, 2.0, size=n) * scale
    return q @ np.diag(eigs) @ q.T


def random_stable_matrix(rng: np.random.Generator, n: int, radius: float = 0.9) -> np.ndarray:
    """Random matrix rescaled so its spectral radius is exactly `radius`."""
    a = rng.standard_normal((n, n))
    rho = np.abs(np.linalg.eigvals(a)).max()
    return a * (radius / rho)


def random_system(rng: np.random.Generator, m: int, d: int = 1, n_sensors: int = 1,
                  radius: float = 0.9):
    """Random linear-Gaussian system plus linear sensors, as plain arrays.

    Returns a dict with keys a, b, sigma_w, sigma_z, sensors where sensors
    is a list of (c, sigma_x) pairs with observation dims 1..m.
    """
    a = random_stable_matrix(rng, m, radius=radius)
    b = rng.standard_normal((m, d))
    sigma_w = random_spd(rng, m)
    sigma_z = random_spd(rng, m)
    sensors = []
    for _ in range(n_sensors):
        s = int(rng.integers(1, m + 1))
        c = rng.standard_normal((s, m))
        sigma_x = random_spd(rng, s, scale=0.5)
        sensors.append((c, sigma_x))
    return {"a": a, "b": b, "sigma_w": sigma_w, "sigma_z": sigma_z, "sensors": sensors}


def simulate_system(rng: np.random.Generator, system: dict, steps: int):
    """Roll out one trajectory and per-sensor observations from a system dict."""
    m = system["a"].shape[0]
    d = system["b"].shape[1]
    u = rng.standard_normal((steps - 1, d))
    z = np.zeros((steps, m))
    z[0] = np.linalg.cholesky(system["sigma_z"]) @ rng.standard_normal(m)
    chol_w = np.linalg.cholesky(system["sigma_w"])
    for t in range(steps - 1):
        z[t + 1] = system["a"] @ z[t] + system["b"] @ u[t] + chol_w @ rng.standard_normal(m)
    obs = []
    for c, sigma_x in system["sensors"]:
        chol_x = np.linalg.cholesky(sigma_x)
        noise = rng.standard_normal((steps, c.shape[0])) @ chol_x.T
        obs.append(z @ c.T + noise)
    return z, u, obs


# --- covariance-form Kalman oracle (Joseph updates, sequential fusion) ---

def kalman_filter_oracle(system: dict, obs: list[np.ndarray], u: np.ndarray):
    """Textbook covariance-form Kalman filter, one sensor at a time.

    Returns (pred_means, pred_covs, post_means, post_covs), each a list over
    time. Completely independent of the information-form implementation.
    """
    a, b = system["a"], system["b"]
    sigma_w, sigma_z = system["sigma_w"], system["sigma_z"]
    m = a.shape[0]
    steps = obs[0].shape[0]
    pred_means, pred_covs, post_means, post_covs = [], [], [], []
    mean, cov = np.zeros(m), sigma_z.copy()
    for t in range(steps):
        if t > 0:
            mean = a @ mean + b @ u[t - 1]
            cov = a @ cov @ a.T + sigma_w
        pred_means.append(mean.copy())
        pred_covs.append(cov.copy())
        for (c, sigma_x), x_seq in zip(system["sensors"], obs):
            x = x_seq[t]
            s_mat = c @ cov @ c.T + sigma_x
            k = cov @ c.T @ np.linalg.inv(s_mat)
            mean = mean + k @ (x - c @ mean)
            ikc = np.eye(m) - k @ c
            cov = ikc @ cov @ ikc.T + k @ sigma_x @ k.T  # Joseph form
            cov = 0.5 * (cov + cov.T)
        post_means.append(mean.copy())
        post_covs.append(cov.copy())
    return pred_means, pred_covs, post_means, post_covs


def rts_smoother_oracle(system: dict, pred_means, pred_covs, post_means, post_covs):
    """Textbook RTS smoother on Kalman oracle output."""
    a = system["a"]
    steps = len(post_means)
    s_means = [None] * steps
    s_covs = [None] * steps
    s_means[-1], s_covs[-1] = post_means[-1], post_covs[-1]
    for t in range(steps - 2, -1, -1):
        gain = post_covs[t] @ a.T @ np.linalg.inv(pred_covs[t + 1])
        s_means[t] = post_means[t] + gain @ (s_means[t + 1] - pred_means[t + 1])
        s_covs[t] = post_covs[t] + gain @ (s_covs[t + 1] - pred_covs[t + 1]) @ gain.T
    return s_means, s_covs


# --- dense-grid Bayes oracle (1-d) ---

def make_grid(sigma: float, n_points: int = 4001, half_width: float = 8.0):
    return np.linspace(-half_width * sigma, half_width * sigma, n_points)


def grid_normalize(grid: np.ndarray, log_p: np.ndarray) -> np.ndarray:
    log_p = log_p - log_p.max()
    p = np.exp(log_p)
    return p / np.trapezoid(p, grid)


def gaussian_pdf(grid: np.ndarray, mean: float, var: float) -> np.ndarray:
    return np.exp(-0.5 * (grid - mean) ** 2 / var) / np.sqrt(2.0 * np.pi * var)


def tv_distance(grid: np.ndarray, p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * np.trapezoid(np.abs(p - q), grid)


class GridFilter1D:
    """Brute-force Bayes filter/smoother for a scalar linear-Gaussian chain.

    Evidence enters as information-form factors exp(eta*z - 0.5*lam*z^2),
    matching how the implementation represents sensor evidence, so the two
    can be compared factor for factor.
    """

    def __init__(self, a: float, b: float, sigma_w: float, sigma_z: float, grid: np.ndarray):
        self.a, self.b = a, b
        self.sigma_w, self.sigma_z = sigma_w, sigma_z
        self.grid = grid
        # transition density matrix T[i_next, i_prev] without the input shift
        diff = grid[:, None] - a * grid[None, :]
        self._diff = diff

    def _transition(self, u: float) -> np.ndarray:
        mean_shift = self.b * u
        return np.exp(-0.5 * (self._diff - mean_shift) ** 2 / self.sigma_w) / np.sqrt(
            2.0 * np.pi * self.sigma_w
        )

    def filter(self, evidence_seq, u_seq):
        """evidence_seq: per step, a list of (eta, lam) pairs. Returns
        (predicted densities, posterior densities) as lists of grid arrays."""
        preds, posts = [], []
        prior = gaussian_pdf(self.grid, 0.0, self.sigma_z)
        pred = prior
        for t, factors in enumerate(evidence_seq):
            if t > 0:
                trans = self._transition(u_seq[t - 1])
                pred = np.trapezoid(trans * posts[-1][None, :], self.grid, axis=1)
            preds.append(pred)
            log_post = np.log(np.maximum(pred, 1e-300))
            for eta, lam in factors:
                log_post = log_post + eta * self.grid - 0.5 * lam * self.grid**2
            posts.append(grid_normalize(self.grid, log_post))
        return preds, posts

    def smooth(self, evidence_seq, u_seq):
        """Grid forward-backward smoother; returns smoothed densities."""
        preds, posts = self.filter(evidence_seq, u_seq)
        steps = len(posts)
        smoothed = [None] * steps
        smoothed[-1] = posts[-1]
        for t in range(steps - 2, -1, -1):
            trans = self._transition(u_seq[t])  # T[next, cur]
            ratio = smoothed[t + 1] / np.maximum(preds[t + 1], 1e-300)
            back = np.trapezoid(trans * ratio[:, None], self.grid, axis=0)
            smoothed[t] = grid_normalize(
                self.grid, np.log(np.maximum(posts[t] * back, 1e-300)))
        return smoothed


def joint_marginal_loglik_oracle(system: dict, obs: list[np.ndarray], u: np.ndarray) -> float:
    """log p(all observations | inputs) via the stacked joint Gaussian.

    Builds the full covariance of (z_1..z_T), maps it through the stacked
    observation operator, and evaluates one big Gaussian density. A wholly
    different route from the prediction-error decomposition.
    """
    from scipy.stats import multivariate_normal

    a, b = system["a"], system["b"]
    sigma_w, sigma_z = system["sigma_w"], system["sigma_z"]
    m = a.shape[0]
    steps = obs[0].shape[0]

    mean_z = np.zeros(steps * m)
    for t in range(1, steps):
        mean_z[t * m:(t + 1) * m] = a @ mean_z[(t - 1) * m:t * m] + b @ u[t - 1]

    var = [None] * steps
    var[0] = sigma_z
    for t in range(1, steps):
        var[t] = a @ var[t - 1] @ a.T + sigma_w
    cov_z = np.zeros((steps * m, steps * m))
    for s in range(steps):
        block = var[s]
        cov_z[s * m:(s + 1) * m, s * m:(s + 1) * m] = block
        prop = block
        for t in range(s + 1, steps):
            # cov(z_s, z_t) = var_s (A^{t-s})^T for t > s
            prop = prop @ a.T
            cov_z[s * m:(s + 1) * m, t * m:(t + 1) * m] = prop
            cov_z[t * m:(t + 1) * m, s * m:(s + 1) * m] = prop.T

    obs_dims = [c.shape[0] for c, _ in system["sensors"]]
    total_obs = steps * sum(obs_dims)
    c_big = np.zeros((total_obs, steps * m))
    noise = np.zeros((total_obs, total_obs))
    x_stack = np.zeros(total_obs)
    row = 0
    for t in range(steps):
        for (c, sigma_x), x_seq in zip(system["sensors"], obs):
            s = c.shape[0]
            c_big[row:row + s, t * m:(t + 1) * m] = c
            noise[row:row + s, row:row + s] = sigma_x
            x_stack[row:row + s] = x_seq[t]
            row += s
    mean_x = c_big @ mean_z
    cov_x = c_big @ cov_z @ c_big.T + noise
    return float(multivariate_normal(mean=mean_x, cov=cov_x, allow_singular=False).logpdf(x_stack))


# --- adapters from system dicts to package objects (not oracles) ---

def system_params(system: dict):
    from vssf.lgssm import DynamicsParams

    return DynamicsParams(a=system["a"], b=system["b"],
                          sigma_w=system["sigma_w"], sigma_z=system["sigma_z"])


def system_sensors(system: dict):
    from vssf.sensors import LinearSensor

    return [LinearSensor(c=c, sigma_x=sx) for c, sx in system["sensors"]]


def system_bundles(sensors, obs):
    from vssf.filtering import EvidenceBundle
    from vssf.sensors import linear_evidence

    steps = obs[0].shape[0]
    return [
        EvidenceBundle([linear_evidence(s, x_seq[t]) for s, x_seq in zip(sensors, obs)])
        for t in range(steps)
    ]


# --- finite differences ---

def central_difference(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Dense central-difference gradient of scalar f at x (flattened)."""
    x = x.astype(np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        h = step * max(1.0, abs(keep))
        flat[i] = keep + h
        f_plus = f(x)
        flat[i] = keep - h
        f_minus = f(x)
        flat[i] = keep
        gflat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad
