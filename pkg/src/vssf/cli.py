"""Command-line entry point: gen, train, eval, export.

Settings resolve in three layers: built-in defaults, then the JSON config
file given with --config, then explicit flags. Every run prints the fully
resolved configuration before doing anything, so logs are self-describing.

Exit codes: 0 success, 2 usage error, 3 data or configuration error,
4 numerical failure. A training run that diverges still writes its last
finite state as a checkpoint before exiting with 4.
"""

import argparse
import json
import os
import sys

import numpy as np

from .autodiff import mlp_init
from .datastore import (
    Checkpoint,
    read_checkpoint,
    read_dataset,
    write_checkpoint,
    write_dataset,
)
from .environments import (
    DoubleIntegratorEnv,
    IMAGE_SENSOR,
    PendulumEnv,
    environment_dynamics,
    environment_from_descriptor,
    generate,
)
from .errors import (
    ConfigMismatch,
    DimensionMismatch,
    MissingGroundTruth,
    NonFiniteError,
    NotPositiveDefinite,
    NotStable,
    StoreError,
    ShapeMismatch,
    VssfError,
)
from .filtering import EvidenceBundle, filter_forward
from .model import (
    Model,
    SUPERVISED_SENSOR,
    observation_bundles,
    structure_descriptor,
    with_params,
)
from .sensors import NonlinearSensor
from .training import TrainConfig, TrainingDiverged, evaluate_filter, train

# image encoder/decoder: two hidden layers of 64 GELU units
HIDDEN_SIZES = [64, 64]

_DEFAULTS = {
    "gen": {"env": "pendulum", "n": 2000, "T": None, "seed": 0, "out": None,
            "env_params": {}, "threads": None},
    "train": {"dataset": None, "out": None, "checkpoint": None, "seed": 0,
              "supervision": "none", "learn_dynamics": False, "samples": 1,
              "steps": 2000, "batch_size": 32, "learning_rate": 1e-3,
              "decoder_sigma_x": 0.1, "log_interval": 50, "threads": None},
    "eval": {"dataset": None, "checkpoint": None, "out": None, "horizon": 200,
             "threads": None},
    "export": {"dataset": None, "checkpoint": None, "out": None,
               "threads": None},
}

_REQUIRED = {
    "gen": ("out",),
    "train": ("dataset", "out"),
    "eval": ("dataset", "checkpoint", "out"),
    "export": ("dataset", "checkpoint", "out"),
}

_ENV_DEFAULT_STEPS = {"pendulum": 5, "integrator": 4}

# config files are plain JSON, so merged values get type-checked explicitly
_INT_KEYS = {"seed", "n", "T", "samples", "steps", "batch_size",
             "log_interval", "horizon", "threads"}
_FLOAT_KEYS = {"learning_rate", "decoder_sigma_x"}
_STR_KEYS = {"out", "dataset", "checkpoint", "env", "supervision"}
_BOOL_KEYS = {"learn_dynamics"}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vssf",
        description="latent linear state-space filtering: data generation, "
                    "training, evaluation, export")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON file overriding defaults")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output file path")
        p.add_argument("--threads", type=int,
                       help="worker thread cap (default: VSSF_THREADS or all cores)")

    gen = sub.add_parser("gen", help="generate a synthetic dataset")
    common(gen)
    gen.add_argument("--env", choices=("pendulum", "integrator"))
    gen.add_argument("--n", type=int, help="trajectory count")
    gen.add_argument("--T", type=int, help="trajectory length")

    tr = sub.add_parser("train", help="train a model on a dataset")
    common(tr)
    tr.add_argument("--dataset", help="training dataset path")
    tr.add_argument("--checkpoint", help="resume from this checkpoint")
    tr.add_argument("--supervision", choices=("none", "partial", "full"))
    tr.add_argument("--learn-dynamics", dest="learn_dynamics",
                    action="store_const", const=True)
    tr.add_argument("--samples", type=int, help="bound samples per step")
    tr.add_argument("--steps", type=int)
    tr.add_argument("--batch-size", dest="batch_size", type=int)
    tr.add_argument("--learning-rate", dest="learning_rate", type=float)

    ev = sub.add_parser("eval", help="score filtering error against ground truth")
    common(ev)
    ev.add_argument("--dataset", help="evaluation dataset path")
    ev.add_argument("--checkpoint", help="trained checkpoint path")
    ev.add_argument("--horizon", type=int, help="steps to filter per trajectory")

    ex = sub.add_parser("export", help="dump latent posterior alongside ground truth")
    common(ex)
    ex.add_argument("--dataset")
    ex.add_argument("--checkpoint")
    return parser


def _resolve(args: argparse.Namespace) -> dict:
    resolved = dict(_DEFAULTS[args.command])
    if args.config is not None:
        try:
            with open(args.config, "r", encoding="utf-8") as handle:
                overrides = json.load(handle)
        except OSError as exc:
            raise ConfigMismatch(f"cannot read config file: {exc}") from exc
        except ValueError as exc:
            raise ConfigMismatch(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(overrides, dict):
            raise ConfigMismatch("config file must hold a JSON object")
        for key, value in overrides.items():
            if key not in resolved:
                raise ConfigMismatch(
                    f"config key {key!r} is not valid for {args.command}")
            resolved[key] = value
    for key in resolved:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    _check_types(resolved)
    resolved["threads"] = _resolve_threads(resolved["threads"])
    missing = [key for key in _REQUIRED[args.command] if resolved.get(key) is None]
    if missing:
        raise _UsageError(f"{args.command} requires {', '.join('--' + m for m in missing)}")
    return resolved


class _UsageError(Exception):
    pass


def _check_types(resolved: dict) -> None:
    for key, value in resolved.items():
        if value is None:
            continue
        if key in _INT_KEYS and (isinstance(value, bool) or not isinstance(value, int)):
            raise ConfigMismatch(f"{key} must be an integer, got {value!r}")
        if key in _FLOAT_KEYS and (isinstance(value, bool)
                                   or not isinstance(value, (int, float))):
            raise ConfigMismatch(f"{key} must be a number, got {value!r}")
        if key in _STR_KEYS and not isinstance(value, str):
            raise ConfigMismatch(f"{key} must be a string, got {value!r}")
        if key in _BOOL_KEYS and not isinstance(value, bool):
            raise ConfigMismatch(f"{key} must be a boolean, got {value!r}")


def _resolve_threads(value) -> int:
    if value is None:
        env = os.environ.get("VSSF_THREADS")
        if env is not None:
            try:
                value = int(env)
            except ValueError:
                raise _UsageError(f"VSSF_THREADS must be an integer, got {env!r}")
        else:
            value = os.cpu_count() or 1
    if value < 1:
        raise _UsageError("thread count must be positive")
    return int(value)


def _apply_threads(count: int) -> None:
    # all computation is plain numpy; cap its BLAS pool when possible so the
    # flag actually limits CPU use (results do not depend on the cap)
    try:
        import threadpoolctl
        threadpoolctl.threadpool_limits(limits=count)
    except ImportError:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, str(count))


def _print_config(command: str, resolved: dict) -> None:
    print(f"{command} config: {json.dumps(resolved, sort_keys=True)}")


def _build_env(resolved: dict):
    cls = {"pendulum": PendulumEnv, "integrator": DoubleIntegratorEnv}.get(resolved["env"])
    if cls is None:
        raise ConfigMismatch(f"unknown environment {resolved['env']!r}")
    params = resolved["env_params"]
    if not isinstance(params, dict):
        raise ConfigMismatch("env_params must be a JSON object")
    try:
        return cls(**params)
    except TypeError as exc:
        raise ConfigMismatch(f"bad env_params for {resolved['env']}: {exc}") from exc


def _image_model(descriptor: dict, seed: int, decoder_sigma_x: float) -> Model:
    """Fresh model for a generated dataset: known dynamics, image sensor.

    decoder_sigma_x scales the fixed decoder noise covariance sigma_x^2 I.
    """
    if decoder_sigma_x <= 0:
        raise ConfigMismatch(
            f"decoder_sigma_x must be positive, got {decoder_sigma_x!r}")
    env = environment_from_descriptor(descriptor)
    psi = environment_dynamics(env)
    m = psi.state_dim
    pixels = env.image_size ** 2
    rng = np.random.default_rng([seed, 104729])
    sensor = NonlinearSensor(
        encoder=mlp_init(rng, [pixels] + HIDDEN_SIZES + [m]),
        evidence_factor=np.eye(m),
        decoder=mlp_init(rng, [m] + HIDDEN_SIZES + [pixels]),
        decoder_sigma_x=float(decoder_sigma_x) * np.eye(pixels))
    return Model(dynamics=psi, sensors={IMAGE_SENSOR: sensor})


def cmd_gen(resolved: dict) -> int:
    env = _build_env(resolved)
    steps = resolved["T"]
    if steps is None:
        steps = _ENV_DEFAULT_STEPS[resolved["env"]]
    dataset = generate(env, resolved["n"], steps, resolved["seed"])
    write_dataset(dataset, resolved["out"])
    sensors = ", ".join(dataset.obs)
    print(f"wrote {resolved['out']}: n={dataset.size} T={dataset.steps} "
          f"sensors=[{sensors}] seed={dataset.seed}")
    return 0


def _train_config(resolved: dict) -> TrainConfig:
    return TrainConfig(
        batch_size=resolved["batch_size"], steps=resolved["steps"],
        sample_count=resolved["samples"], seed=resolved["seed"],
        supervision=resolved["supervision"],
        learn_dynamics=bool(resolved["learn_dynamics"]),
        learning_rate=resolved["learning_rate"],
        log_interval=resolved["log_interval"])


def _write_trace(path: str, trace) -> None:
    lines = [f"step={row['step']} elbo={float(row['elbo'])!r} "
             f"kl={float(row['kl'])!r} recon={float(row['recon'])!r} "
             f"rho_A={float(row['rho_a'])!r}"
             for row in trace]
    with open(path, "w", encoding="utf-8") as handle:
        handle.write("\n".join(lines) + ("\n" if lines else ""))


def cmd_train(resolved: dict) -> int:
    dataset = read_dataset(resolved["dataset"])
    model = _image_model(dataset.descriptor, resolved["seed"],
                         resolved["decoder_sigma_x"])
    config = _train_config(resolved)
    kwargs = {}
    if resolved["checkpoint"] is not None:
        previous = read_checkpoint(resolved["checkpoint"],
                                   expect_structure=structure_descriptor(model))
        kwargs = {"start_step": previous.step, "params": previous.params,
                  "adam_state": previous.adam_state}
        print(f"resuming from {resolved['checkpoint']} at step {previous.step}")
    snapshot = {k: v for k, v in resolved.items() if k not in ("threads",)}
    trace_path = resolved["out"] + ".trace"
    try:
        result = train(model, dataset, config, **kwargs)
    except TrainingDiverged as exc:
        # params stay authoritative for resume; the model view falls back to
        # the init arrays when the final params no longer form a valid model
        try:
            last_model = with_params(model, exc.params)
        except VssfError:
            last_model = model
        write_checkpoint(
            Checkpoint(model=last_model, params=exc.params,
                       adam_state=exc.adam_state, step=exc.step, config=snapshot),
            resolved["out"])
        _write_trace(trace_path, exc.trace)
        print(f"wrote last-good checkpoint at step {exc.step} to {resolved['out']}",
              file=sys.stderr)
        raise
    write_checkpoint(
        Checkpoint(model=result.model, params=result.params,
                   adam_state=result.adam_state, step=config.steps,
                   config=snapshot),
        resolved["out"])
    _write_trace(trace_path, result.trace)
    print(f"wrote {resolved['out']} and {trace_path}")
    return 0


def cmd_eval(resolved: dict) -> int:
    dataset = read_dataset(resolved["dataset"])
    checkpoint = read_checkpoint(resolved["checkpoint"])
    report = evaluate_filter(checkpoint.model, dataset, resolved["horizon"])
    m = report.component_mse.shape[0]
    lines = ["# filtering mse per state component, then per-step rows",
             "# component_mse " + " ".join(repr(float(v)) for v in report.component_mse),
             "# t " + " ".join(f"mse_{j}" for j in range(m))]
    for t in range(report.horizon):
        lines.append(f"{t} " + " ".join(repr(float(v))
                                        for v in report.per_step_mse[t]))
    with open(resolved["out"], "w", encoding="utf-8") as handle:
        handle.write("\n".join(lines) + "\n")
    summary = " ".join(f"{v:.6g}" for v in report.component_mse)
    print(f"evaluated {report.trajectory_count} trajectories over "
          f"{report.horizon} steps; component mse: {summary}")
    print(f"wrote {resolved['out']}")
    return 0


def cmd_export(resolved: dict) -> int:
    dataset = read_dataset(resolved["dataset"])
    checkpoint = read_checkpoint(resolved["checkpoint"])
    model = checkpoint.model
    if dataset.states is None:
        raise MissingGroundTruth("export requires ground-truth states")
    sensors = {name: s for name, s in model.sensors.items()
               if name != SUPERVISED_SENSOR}
    eval_model = Model(dynamics=model.dynamics, sensors=sensors)
    for name in sensors:
        if name not in dataset.obs:
            raise ConfigMismatch(f"dataset has no observations for sensor {name!r}")
    m = model.state_dim
    columns = (["traj", "t"] + [f"true_{j}" for j in range(m)]
               + [f"mean_{j}" for j in range(m)] + [f"var_{j}" for j in range(m)])
    lines = ["# " + " ".join(columns)]
    for i in range(dataset.size):
        if sensors:
            obs_i = {name: dataset.obs[name][i].astype(np.float64)
                     for name in sensors}
            bundles = observation_bundles(eval_model, obs_i)
        else:
            bundles = [EvidenceBundle(()) for _ in range(dataset.steps)]
        beliefs = filter_forward(eval_model.dynamics, bundles,
                                 dataset.u[i].astype(np.float64))
        for t, belief in enumerate(beliefs):
            truth = dataset.states[i, t].astype(np.float64)
            mean = belief.posterior.mean
            var = np.diag(belief.posterior.cov)
            values = ([str(i), str(t)] + [repr(float(v)) for v in truth]
                      + [repr(float(v)) for v in mean]
                      + [repr(float(v)) for v in var])
            lines.append(" ".join(values))
    with open(resolved["out"], "w", encoding="utf-8") as handle:
        handle.write("\n".join(lines) + "\n")
    print(f"wrote {resolved['out']}: {dataset.size * dataset.steps} rows")
    return 0


_COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval,
             "export": cmd_export}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 2
    try:
        resolved = _resolve(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except ConfigMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    _apply_threads(resolved["threads"])
    _print_config(args.command, resolved)
    try:
        return _COMMANDS[args.command](resolved)
    except (StoreError, ConfigMismatch, MissingGroundTruth, ShapeMismatch,
            DimensionMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (NonFiniteError, NotPositiveDefinite, NotStable) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except np.linalg.LinAlgError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return 4
    except VssfError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
