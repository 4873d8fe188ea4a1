"""Bit-exact persistence for datasets and training checkpoints.

One container format serves both:

    magic "VSSF" | version u16 LE | header length u32 LE | header | payload

The header is canonical UTF-8 JSON (sorted keys, no whitespace) listing every
array's name, shape, dtype, and byte offset into the payload, plus the
kind-specific metadata. Offsets must exactly tile the payload, so truncation
or trailing bytes are detected before any object is built. Datasets hold
float32 arrays, checkpoints float64.

Checkpoints store three views side by side: the arrays that rebuild the
model, the exact training-parameter dict, and the Adam moments, so a resumed
run continues bit for bit. Sensor order is recorded explicitly because it
fixes the float summation order during fusion; canonical JSON alone would
alphabetize it.

Writes go to a temporary file in the destination directory, are fsynced, and
are moved into place with an atomic replace.
"""

import dataclasses
import json
import os
import struct
import tempfile

import numpy as np

from .autodiff import Mlp
from .environments import Dataset
from .errors import (
    BadMagic,
    ConfigMismatch,
    CorruptHeader,
    IoError,
    ShapeMismatch,
    UnsupportedVersion,
)
from .lgssm import DynamicsParams
from .model import Model, structure_descriptor
from .sensors import LinearSensor, NonlinearSensor
from .training import AdamState

MAGIC = b"VSSF"
FORMAT_VERSION = 1

_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


def _pack(header_meta: dict, arrays: list) -> bytes:
    """Assemble container bytes; arrays is an ordered list of (name, array)."""
    entries, chunks, offset = [], [], 0
    for name, arr in arrays:
        dtype = "<f8" if arr.dtype == np.float64 else "<f4"
        data = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape),
                        "dtype": dtype, "offset": offset})
        chunks.append(data)
        offset += len(data)
    header = dict(header_meta)
    header["arrays"] = entries
    try:
        blob = json.dumps(header, sort_keys=True, separators=(",", ":"),
                          allow_nan=False).encode("utf-8")
    except (TypeError, ValueError) as exc:
        raise ConfigMismatch(f"metadata is not plain JSON data: {exc}") from exc
    return b"".join([MAGIC, struct.pack("<H", FORMAT_VERSION),
                     struct.pack("<I", len(blob)), blob] + chunks)


def _atomic_write(path: str, data: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    try:
        fd, tmp = tempfile.mkstemp(dir=directory, prefix=".vssf-")
        try:
            os.write(fd, data)
            os.fsync(fd)
        finally:
            os.close(fd)
        os.replace(tmp, path)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _unpack(path: str):
    """Read and validate a container; returns (header, arrays dict)."""
    try:
        with open(path, "rb") as handle:
            data = handle.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if len(data) < 10:
        raise CorruptHeader(f"{path} is too short to be a container")
    if data[:4] != MAGIC:
        raise BadMagic(f"{path} does not start with {MAGIC!r}")
    (version,) = struct.unpack("<H", data[4:6])
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"{path} has format version {version}")
    (header_len,) = struct.unpack("<I", data[6:10])
    if 10 + header_len > len(data):
        raise CorruptHeader(f"{path}: header length exceeds the file")
    try:
        header = json.loads(data[10:10 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise CorruptHeader(f"{path}: header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict) or not isinstance(header.get("arrays"), list):
        raise CorruptHeader(f"{path}: header lacks an array listing")
    payload = data[10 + header_len:]
    arrays, expected_offset = {}, 0
    for entry in header["arrays"]:
        try:
            name, shape = entry["name"], tuple(entry["shape"])
            dtype, offset = _DTYPES[entry["dtype"]], int(entry["offset"])
        except (KeyError, TypeError) as exc:
            raise CorruptHeader(f"{path}: malformed array entry: {exc}") from exc
        if any(s < 0 for s in shape) or not isinstance(name, str):
            raise CorruptHeader(f"{path}: malformed array entry for {name!r}")
        if offset != expected_offset:
            raise CorruptHeader(
                f"{path}: array {name!r} at offset {offset}, expected "
                f"{expected_offset}; offsets must tile the payload")
        count = int(np.prod(shape, dtype=np.int64))
        nbytes = count * dtype.itemsize
        if offset + nbytes > len(payload):
            raise ShapeMismatch(
                f"{path}: payload truncated inside array {name!r}")
        arr = np.frombuffer(payload, dtype=dtype, count=count,
                            offset=offset).reshape(shape).copy()
        arrays[name] = arr
        expected_offset += nbytes
    if expected_offset != len(payload):
        raise CorruptHeader(
            f"{path}: payload has {len(payload) - expected_offset} trailing bytes")
    return header, arrays


# --- datasets ---

def write_dataset(dataset: Dataset, path: str) -> None:
    meta = {
        "kind": "dataset",
        "descriptor": dataset.descriptor,
        "seed": dataset.seed,
        "obs_order": list(dataset.obs),
    }
    arrays = [(f"obs.{name}", arr) for name, arr in dataset.obs.items()]
    arrays.append(("u", dataset.u))
    if dataset.states is not None:
        arrays.append(("states", dataset.states))
    arrays.sort(key=lambda item: item[0])
    _atomic_write(path, _pack(meta, arrays))


def read_dataset(path: str) -> Dataset:
    header, arrays = _unpack(path)
    if header.get("kind") != "dataset":
        raise CorruptHeader(f"{path} does not hold a dataset")
    try:
        descriptor = header["descriptor"]
        seed = int(header["seed"])
        obs_order = list(header["obs_order"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptHeader(f"{path}: missing dataset metadata: {exc}") from exc
    obs = {}
    for name in obs_order:
        key = f"obs.{name}"
        if key not in arrays:
            raise CorruptHeader(f"{path}: obs_order lists {name!r} but the "
                                "payload has no such array")
        obs[name] = arrays.pop(key)
    if "u" not in arrays:
        raise CorruptHeader(f"{path}: dataset has no input array")
    u = arrays.pop("u")
    states = arrays.pop("states", None)
    if arrays:
        raise CorruptHeader(f"{path}: unexpected arrays {sorted(arrays)}")
    try:
        return Dataset(obs=obs, u=u, states=states, descriptor=descriptor,
                       seed=seed)
    except Exception as exc:
        raise ShapeMismatch(f"{path}: stored arrays are inconsistent: {exc}") from exc


# --- checkpoints ---

@dataclasses.dataclass(frozen=True)
class Checkpoint:
    """Everything needed to continue or evaluate a training run."""

    model: Model
    params: dict
    adam_state: AdamState
    step: int
    config: dict


def _model_arrays(model: Model) -> list:
    items = [("model.dyn.a", model.dynamics.a),
             ("model.dyn.b", model.dynamics.b),
             ("model.dyn.sigma_w", model.dynamics.sigma_w),
             ("model.dyn.sigma_z", model.dynamics.sigma_z)]
    for name, sensor in model.sensors.items():
        prefix = f"model.sensor.{name}"
        if isinstance(sensor, LinearSensor):
            items.append((f"{prefix}.c", sensor.c))
            items.append((f"{prefix}.sigma_x", sensor.sigma_x))
        else:
            for i, (w, b) in enumerate(zip(sensor.encoder.weights,
                                           sensor.encoder.biases)):
                items.append((f"{prefix}.enc.w{i}", w))
                items.append((f"{prefix}.enc.b{i}", b))
            items.append((f"{prefix}.L", sensor.evidence_factor))
            for i, (w, b) in enumerate(zip(sensor.decoder.weights,
                                           sensor.decoder.biases)):
                items.append((f"{prefix}.dec.w{i}", w))
                items.append((f"{prefix}.dec.b{i}", b))
            items.append((f"{prefix}.decoder_sigma_x", sensor.decoder_sigma_x))
    return items


def _mlp_from_arrays(arrays, prefix, sizes, activation):
    weights, biases = [], []
    for i in range(len(sizes) - 1):
        try:
            weights.append(arrays[f"{prefix}.w{i}"])
            biases.append(arrays[f"{prefix}.b{i}"])
        except KeyError as exc:
            raise CorruptHeader(f"checkpoint lacks array {exc}") from exc
    return Mlp(weights=weights, biases=biases, activation=activation)


def _model_from_arrays(structure, sensor_order, stationary, arrays) -> Model:
    try:
        dynamics = DynamicsParams(
            a=arrays["model.dyn.a"], b=arrays["model.dyn.b"],
            sigma_w=arrays["model.dyn.sigma_w"],
            sigma_z=arrays["model.dyn.sigma_z"],
            stationary_consistent=stationary)
        sensors = {}
        for name in sensor_order:
            desc = structure["sensors"][name]
            prefix = f"model.sensor.{name}"
            if desc["kind"] == "linear":
                sensors[name] = LinearSensor(
                    c=arrays[f"{prefix}.c"], sigma_x=arrays[f"{prefix}.sigma_x"],
                    trainable=bool(desc["trainable"]))
            else:
                sensors[name] = NonlinearSensor(
                    encoder=_mlp_from_arrays(arrays, f"{prefix}.enc",
                                             desc["encoder_sizes"],
                                             desc["activation"]),
                    evidence_factor=arrays[f"{prefix}.L"],
                    decoder=_mlp_from_arrays(arrays, f"{prefix}.dec",
                                             desc["decoder_sizes"],
                                             desc["activation"]),
                    decoder_sigma_x=arrays[f"{prefix}.decoder_sigma_x"],
                    epsilon=float(desc["epsilon"]))
        return Model(dynamics=dynamics, sensors=sensors)
    except KeyError as exc:
        raise CorruptHeader(f"checkpoint lacks array or field {exc}") from exc


def write_checkpoint(checkpoint: Checkpoint, path: str) -> None:
    model = checkpoint.model
    state = checkpoint.adam_state
    if set(checkpoint.params) != set(state.m):
        raise ConfigMismatch("optimizer state does not cover the parameters")
    meta = {
        "kind": "checkpoint",
        "step": int(checkpoint.step),
        "adam_step": int(state.step),
        "config": checkpoint.config,
        "structure": structure_descriptor(model),
        "sensor_order": list(model.sensors),
        "stationary_consistent": bool(model.dynamics.stationary_consistent),
    }
    arrays = _model_arrays(model)
    for key in sorted(checkpoint.params):
        arrays.append((f"param.{key}", checkpoint.params[key]))
        arrays.append((f"adam.m.{key}", state.m[key]))
        arrays.append((f"adam.v.{key}", state.v[key]))
    arrays.sort(key=lambda item: item[0])
    _atomic_write(path, _pack(meta, arrays))


def read_checkpoint(path: str, expect_structure: dict = None) -> Checkpoint:
    header, arrays = _unpack(path)
    if header.get("kind") != "checkpoint":
        raise CorruptHeader(f"{path} does not hold a checkpoint")
    try:
        structure = header["structure"]
        sensor_order = list(header["sensor_order"])
        stationary = bool(header["stationary_consistent"])
        step = int(header["step"])
        adam_step = int(header["adam_step"])
        config = header["config"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptHeader(f"{path}: missing checkpoint metadata: {exc}") from exc
    if set(sensor_order) != set(structure.get("sensors", {})):
        raise CorruptHeader(f"{path}: sensor order disagrees with the structure")
    if expect_structure is not None and structure != expect_structure:
        raise ConfigMismatch(
            f"{path} was saved for a different model structure")
    model = _model_from_arrays(structure, sensor_order, stationary, arrays)
    params, m, v = {}, {}, {}
    for name, arr in arrays.items():
        if name.startswith("param."):
            params[name[len("param."):]] = arr
        elif name.startswith("adam.m."):
            m[name[len("adam.m."):]] = arr
        elif name.startswith("adam.v."):
            v[name[len("adam.v."):]] = arr
    if set(params) != set(m) or set(params) != set(v):
        raise CorruptHeader(f"{path}: optimizer arrays do not match parameters")
    return Checkpoint(model=model, params=params,
                      adam_state=AdamState(m=m, v=v, step=adam_step),
                      step=step, config=config)
