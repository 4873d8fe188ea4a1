"""Model aggregate: parameter collection, rebuild, and evidence plumbing."""

import json

import numpy as np
import pytest

from vssf.autodiff import mlp_init
from vssf.errors import DimensionMismatch, UnknownSensor
from vssf.lgssm import DynamicsParams
from vssf.model import (
    Model,
    collect_params,
    observation_bundles,
    structure_descriptor,
    with_params,
)
from vssf.sensors import (
    LinearSensor,
    NonlinearSensor,
    encode_evidence,
    linear_evidence,
)

from helpers import random_spd, random_stable_matrix


def small_model(rng: np.random.Generator, m: int = 2, p: int = 5) -> Model:
    dynamics = DynamicsParams(
        a=random_stable_matrix(rng, m), b=rng.standard_normal((m, 1)),
        sigma_w=random_spd(rng, m), sigma_z=random_spd(rng, m))
    pos = LinearSensor(c=rng.standard_normal((1, m)), sigma_x=np.array([[0.05]]),
                       trainable=True)
    cam = NonlinearSensor(
        encoder=mlp_init(rng, [p, 4, m]),
        evidence_factor=np.eye(m),
        decoder=mlp_init(rng, [m, 4, p]),
        decoder_sigma_x=0.01 * np.eye(p))
    return Model(dynamics=dynamics, sensors={"pos": pos, "cam": cam})


def test_collect_with_params_round_trip():
    rng = np.random.default_rng(0)
    model = small_model(rng)
    params = collect_params(model, learn_dynamics=True)
    assert set(params) == {
        "dyn.a", "dyn.b", "dyn.w_chol",
        "sensor.pos.c", "sensor.pos.x_chol",
        "sensor.cam.enc.w0", "sensor.cam.enc.b0",
        "sensor.cam.enc.w1", "sensor.cam.enc.b1",
        "sensor.cam.L",
        "sensor.cam.dec.w0", "sensor.cam.dec.b0",
        "sensor.cam.dec.w1", "sensor.cam.dec.b1",
    }
    rebuilt = with_params(model, params)
    np.testing.assert_allclose(rebuilt.dynamics.a, model.dynamics.a, atol=0)
    np.testing.assert_allclose(rebuilt.dynamics.sigma_w, model.dynamics.sigma_w,
                               atol=1e-12)
    np.testing.assert_allclose(rebuilt.sensors["pos"].sigma_x,
                               model.sensors["pos"].sigma_x, atol=1e-12)
    again = collect_params(rebuilt, learn_dynamics=True)
    for name in params:
        np.testing.assert_allclose(again[name], params[name], atol=1e-12)


def test_frozen_groups_are_not_collected():
    rng = np.random.default_rng(1)
    model = small_model(rng)
    params = collect_params(model, learn_dynamics=False)
    assert not any(k.startswith("dyn.") for k in params)
    frozen = LinearSensor(c=np.eye(2), sigma_x=0.05 * np.eye(2))
    model2 = Model(dynamics=model.dynamics, sensors={"sup": frozen})
    assert collect_params(model2) == {}


def test_with_params_substitutes_values():
    rng = np.random.default_rng(2)
    model = small_model(rng)
    params = collect_params(model)
    params["sensor.cam.enc.w0"] = params["sensor.cam.enc.w0"] + 1.0
    rebuilt = with_params(model, params)
    np.testing.assert_allclose(
        rebuilt.sensors["cam"].encoder.weights[0],
        model.sensors["cam"].encoder.weights[0] + 1.0)
    # untouched slots carry over
    np.testing.assert_array_equal(rebuilt.sensors["cam"].decoder_sigma_x,
                                  model.sensors["cam"].decoder_sigma_x)
    assert rebuilt.sensors["pos"].trainable


def test_with_params_squares_cholesky_factors():
    rng = np.random.default_rng(3)
    model = small_model(rng)
    factor = np.array([[2.0, 57.0], [1.0, 3.0]])  # upper junk must be masked
    rebuilt = with_params(model, {"dyn.a": model.dynamics.a, "dyn.b": model.dynamics.b,
                                  "dyn.w_chol": factor})
    lower = np.tril(factor)
    np.testing.assert_allclose(rebuilt.dynamics.sigma_w, lower @ lower.T, atol=1e-14)


def test_unknown_parameter_keys_raise():
    rng = np.random.default_rng(4)
    model = small_model(rng)
    with pytest.raises(UnknownSensor):
        with_params(model, {"sensor.nope.c": np.eye(2)})
    with pytest.raises(UnknownSensor):
        with_params(model, {"sensor.cam.bogus": np.eye(2)})


def test_model_validation():
    rng = np.random.default_rng(5)
    model = small_model(rng)
    bad = LinearSensor(c=np.zeros((1, 3)), sigma_x=np.eye(1))
    with pytest.raises(DimensionMismatch):
        Model(dynamics=model.dynamics, sensors={"bad": bad})
    with pytest.raises(DimensionMismatch):
        Model(dynamics=model.dynamics, sensors={"a.b": model.sensors["pos"]})
    with pytest.raises(DimensionMismatch):
        Model(dynamics=model.dynamics, sensors={"x": object()})


def test_observation_bundles_match_sensor_ops():
    rng = np.random.default_rng(6)
    model = small_model(rng)
    steps = 4
    obs = {"pos": rng.standard_normal((steps, 1)),
           "cam": rng.standard_normal((steps, 5))}
    bundles = observation_bundles(model, obs)
    assert len(bundles) == steps
    for t, bundle in enumerate(bundles):
        assert len(bundle) == 2
        ref_pos = linear_evidence(model.sensors["pos"], obs["pos"][t])
        ref_cam = encode_evidence(model.sensors["cam"], obs["cam"][t],
                                  model.dynamics.sigma_z)
        np.testing.assert_allclose(bundle.items[0].eta_e, ref_pos.eta_e, atol=1e-12)
        np.testing.assert_allclose(bundle.items[1].eta_e, ref_cam.eta_e, atol=1e-12)
        np.testing.assert_allclose(bundle.items[1].lambda_e, ref_cam.lambda_e,
                                   atol=1e-12)


def test_observation_bundles_subset_and_errors():
    rng = np.random.default_rng(7)
    model = small_model(rng)
    obs = {"cam": rng.standard_normal((3, 5))}
    bundles = observation_bundles(model, obs)
    assert all(len(b) == 1 for b in bundles)
    assert observation_bundles(model, {}) == []
    with pytest.raises(UnknownSensor):
        observation_bundles(model, {"lidar": np.zeros((3, 5))})
    with pytest.raises(DimensionMismatch):
        observation_bundles(model, {"cam": np.zeros((3, 4))})
    with pytest.raises(DimensionMismatch):
        observation_bundles(model, {"cam": np.zeros((3, 5)), "pos": np.zeros((2, 1))})


def test_structure_descriptor_is_json_stable():
    rng = np.random.default_rng(8)
    model = small_model(rng)
    desc = structure_descriptor(model)
    text = json.dumps(desc, sort_keys=True)
    assert json.loads(text) == desc
    assert desc["sensors"]["cam"]["encoder_sizes"] == [5, 4, 2]
    assert desc["sensors"]["pos"] == {"kind": "linear", "obs_dim": 1, "trainable": True}
    assert desc["state_dim"] == 2
