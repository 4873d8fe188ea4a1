"""Model aggregate: dynamics plus a named, ordered sensor suite.

Trainable parameters travel through the optimizer as a flat dict keyed by
dotted names ("dyn.a", "sensor.camera.enc.w0", ...). collect_params gathers
the trainable arrays and with_params rebuilds the model from updated values;
learned covariances travel as Cholesky factors so every parameter setting
stays PD. The params dict, not the model, is the source of truth during
training: the model is re-derived from it each step, which makes checkpoint
round trips bit-exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Mlp
from .errors import DimensionMismatch, UnknownSensor
from .filtering import EvidenceBundle
from .gaussian import chol_psd
from .lgssm import DynamicsParams
from .sensors import (
    LinearSensor,
    NonlinearSensor,
    SensorEvidence,
    encode_evidence_batch,
    linear_evidence,
)

# name reserved for the ground-truth readout added under supervision; it is
# fused during training and excluded from evaluation
SUPERVISED_SENSOR = "supervised"


@dataclass(frozen=True)
class Model:
    """Dynamics plus sensors; the complete generative/inference parameter set."""

    dynamics: DynamicsParams
    sensors: dict

    def __post_init__(self):
        sensors = dict(self.sensors)
        m = self.dynamics.state_dim
        for name, sensor in sensors.items():
            if not isinstance(name, str) or not name or "." in name:
                raise DimensionMismatch(f"invalid sensor name {name!r}")
            if isinstance(sensor, LinearSensor):
                if sensor.state_dim != m:
                    raise DimensionMismatch(
                        f"sensor {name!r} reads a {sensor.state_dim}-dim state, "
                        f"dynamics have {m}")
            elif isinstance(sensor, NonlinearSensor):
                if sensor.state_dim != m:
                    raise DimensionMismatch(
                        f"sensor {name!r} encodes to {sensor.state_dim} dims, "
                        f"dynamics have {m}")
            else:
                raise DimensionMismatch(f"sensor {name!r} has unsupported type")
        object.__setattr__(self, "sensors", sensors)

    @property
    def state_dim(self) -> int:
        return self.dynamics.state_dim

    @property
    def input_dim(self) -> int:
        return self.dynamics.input_dim


def collect_params(model: Model, learn_dynamics: bool = False) -> dict:
    """Flat dict of trainable arrays, copied out of the model."""
    params: dict[str, np.ndarray] = {}
    if learn_dynamics:
        params["dyn.a"] = np.array(model.dynamics.a)
        params["dyn.b"] = np.array(model.dynamics.b)
        params["dyn.w_chol"] = chol_psd(model.dynamics.sigma_w)
    for name, sensor in model.sensors.items():
        prefix = f"sensor.{name}"
        if isinstance(sensor, LinearSensor):
            if sensor.trainable:
                params[f"{prefix}.c"] = np.array(sensor.c)
                params[f"{prefix}.x_chol"] = chol_psd(sensor.sigma_x)
        else:
            for i, (w, b) in enumerate(zip(sensor.encoder.weights, sensor.encoder.biases)):
                params[f"{prefix}.enc.w{i}"] = np.array(w)
                params[f"{prefix}.enc.b{i}"] = np.array(b)
            params[f"{prefix}.L"] = np.array(sensor.evidence_factor)
            for i, (w, b) in enumerate(zip(sensor.decoder.weights, sensor.decoder.biases)):
                params[f"{prefix}.dec.w{i}"] = np.array(w)
                params[f"{prefix}.dec.b{i}"] = np.array(b)
    return params


def _rebuild_mlp(mlp: Mlp, picked: dict, tag: str) -> Mlp:
    weights, biases = [], []
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        weights.append(picked.pop(f"{tag}.w{i}", w))
        biases.append(picked.pop(f"{tag}.b{i}", b))
    return Mlp(weights=tuple(weights), biases=tuple(biases), activation=mlp.activation)


def with_params(model: Model, params: dict) -> Model:
    """Rebuild the model with the given parameter values substituted in.

    Keys absent from `params` keep their current values; keys that match no
    slot in the model raise. Cholesky-factor keys are lower-masked and
    squared back into covariances, so any real-valued update is legal.
    """
    remaining = dict(params)
    dynamics = model.dynamics
    dyn_keys = [k for k in remaining if k.startswith("dyn.")]
    if dyn_keys:
        a = remaining.pop("dyn.a", dynamics.a)
        b = remaining.pop("dyn.b", dynamics.b)
        if "dyn.w_chol" in remaining:
            factor = np.tril(np.asarray(remaining.pop("dyn.w_chol"), dtype=np.float64))
            sigma_w = factor @ factor.T
        else:
            sigma_w = dynamics.sigma_w
        # a learned sigma_w need not keep sigma_z stationary, so the flag drops
        dynamics = DynamicsParams(a=a, b=b, sigma_w=sigma_w, sigma_z=dynamics.sigma_z,
                                  stationary_consistent=False)
    sensors = {}
    for name, sensor in model.sensors.items():
        prefix = f"sensor.{name}."
        picked = {k[len(prefix):]: remaining.pop(k)
                  for k in list(remaining) if k.startswith(prefix)}
        if not picked:
            sensors[name] = sensor
            continue
        if isinstance(sensor, LinearSensor):
            c = picked.pop("c", sensor.c)
            if "x_chol" in picked:
                factor = np.tril(np.asarray(picked.pop("x_chol"), dtype=np.float64))
                sigma_x = factor @ factor.T
            else:
                sigma_x = sensor.sigma_x
            sensors[name] = LinearSensor(c=c, sigma_x=sigma_x, trainable=sensor.trainable)
        else:
            encoder = _rebuild_mlp(sensor.encoder, picked, "enc")
            decoder = _rebuild_mlp(sensor.decoder, picked, "dec")
            factor = picked.pop("L", sensor.evidence_factor)
            sensors[name] = NonlinearSensor(
                encoder=encoder, evidence_factor=factor, decoder=decoder,
                decoder_sigma_x=sensor.decoder_sigma_x, epsilon=sensor.epsilon)
        if picked:
            raise UnknownSensor(
                f"parameters {sorted(picked)} match no slot of sensor {name!r}")
    if remaining:
        raise UnknownSensor(f"parameters {sorted(remaining)} match no model slot")
    return Model(dynamics=dynamics, sensors=sensors)


def observation_bundles(model: Model, obs_seqs: dict) -> list[EvidenceBundle]:
    """Per-step evidence bundles from per-sensor observation sequences.

    obs_seqs maps sensor name -> (T, obs_dim) array; sensors absent from the
    dict contribute no evidence. Bundle order follows the model's sensor
    order regardless of dict order.
    """
    unknown = set(obs_seqs) - set(model.sensors)
    if unknown:
        raise UnknownSensor(f"observations for unknown sensors {sorted(unknown)}")
    arrays = {}
    steps = None
    for name, seq in obs_seqs.items():
        seq = np.asarray(seq, dtype=np.float64)
        sensor = model.sensors[name]
        if seq.ndim != 2 or seq.shape[1] != sensor.obs_dim:
            raise DimensionMismatch(
                f"observations for {name!r} must be (T, {sensor.obs_dim}), "
                f"got {seq.shape}")
        if steps is None:
            steps = seq.shape[0]
        elif seq.shape[0] != steps:
            raise DimensionMismatch("observation sequences differ in length")
        arrays[name] = seq
    if steps is None:
        return []
    per_sensor: dict[str, list[SensorEvidence]] = {}
    for name, sensor in model.sensors.items():
        if name not in arrays:
            continue
        seq = arrays[name]
        if isinstance(sensor, LinearSensor):
            per_sensor[name] = [linear_evidence(sensor, seq[t]) for t in range(steps)]
        else:
            lam, eta_rows = encode_evidence_batch(sensor, seq, model.dynamics.sigma_z)
            per_sensor[name] = [
                SensorEvidence(eta_e=eta_rows[t], lambda_e=lam) for t in range(steps)]
    return [
        EvidenceBundle([per_sensor[name][t] for name in model.sensors if name in per_sensor])
        for t in range(steps)
    ]


def structure_descriptor(model: Model) -> dict:
    """JSON-able summary of the model's shape, for checkpoint compatibility checks."""
    sensors = {}
    for name, sensor in model.sensors.items():
        if isinstance(sensor, LinearSensor):
            sensors[name] = {
                "kind": "linear",
                "obs_dim": sensor.obs_dim,
                "trainable": bool(sensor.trainable),
            }
        else:
            sensors[name] = {
                "kind": "nonlinear",
                "obs_dim": sensor.obs_dim,
                "encoder_sizes": [sensor.encoder.in_dim]
                + [w.shape[1] for w in sensor.encoder.weights],
                "decoder_sizes": [sensor.decoder.in_dim]
                + [w.shape[1] for w in sensor.decoder.weights],
                "activation": sensor.encoder.activation,
                "epsilon": sensor.epsilon,
            }
    return {
        "state_dim": model.state_dim,
        "input_dim": model.input_dim,
        "sensors": sensors,
    }
