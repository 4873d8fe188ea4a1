"""Autodiff ops against central finite differences, plus graph mechanics."""

import numpy as np
import pytest

from vssf import autodiff as ad
from vssf import errors

from helpers import central_difference, random_spd

FD_TOL = 1e-5


def check_gradients(build, inputs, seed=0):
    """FD-check `build`, which maps a list of Nodes to an output Node.

    The output is contracted to a scalar with a fixed random projection so
    every output entry participates. Each input array is checked in turn.
    """
    rng = np.random.default_rng(seed)
    out_probe = build([ad.constant(x) for x in inputs])
    proj = rng.standard_normal(out_probe.value.shape)

    def scalar_from(arrays):
        out = build([ad.constant(x) for x in arrays])
        return float(np.sum(proj * out.value))

    leaves = [ad.leaf(x) for x in inputs]
    root = ad.reduce_sum(ad.mul(build(leaves), proj))
    ad.backward(root)

    for i, x in enumerate(inputs):
        def f(arr, i=i):
            arrays = list(inputs)
            arrays[i] = arr
            return scalar_from(arrays)

        fd = central_difference(f, x.copy(), step=1e-6)
        got = leaves[i].grad
        if got is None:
            got = np.zeros_like(x)
        denom = max(np.abs(fd).max(), np.abs(got).max(), 1e-6)
        assert np.abs(fd - got).max() / denom < FD_TOL, f"input {i}: fd={fd}, ad={got}"


def test_matmul_gradients():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    check_gradients(lambda xs: ad.matmul(xs[0], xs[1]), [a, b])


def test_add_sub_mul_broadcast_gradients():
    rng = np.random.default_rng(2)
    a = rng.standard_normal((5, 3))
    bias = rng.standard_normal(3)
    check_gradients(lambda xs: ad.add(xs[0], xs[1]), [a, bias])
    check_gradients(lambda xs: ad.sub(xs[0], xs[1]), [a, bias])
    check_gradients(lambda xs: ad.mul(xs[0], xs[1]), [a, bias])
    scalar = np.array(0.7)
    check_gradients(lambda xs: ad.mul(xs[0], xs[1]), [a, scalar])


def test_elementwise_gradients():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((4, 3))
    check_gradients(lambda xs: ad.gelu(xs[0]), [x])
    check_gradients(lambda xs: ad.tanh(xs[0]), [x])
    check_gradients(lambda xs: ad.exp(xs[0]), [x])
    positive = np.abs(x) + 0.5
    check_gradients(lambda xs: ad.log(xs[0]), [positive])


def test_cholesky_gradients():
    rng = np.random.default_rng(4)
    for k in range(10):
        spd = random_spd(rng, 3)
        check_gradients(lambda xs: ad.cholesky(xs[0]), [spd], seed=k)


def test_triangular_solve_gradients():
    rng = np.random.default_rng(5)
    for k in range(5):
        l = np.tril(rng.standard_normal((3, 3))) + 3.0 * np.eye(3)
        b = rng.standard_normal((3, 2))
        check_gradients(lambda xs: ad.triangular_solve(xs[0], xs[1], trans="N"), [l, b], seed=k)
        check_gradients(lambda xs: ad.triangular_solve(xs[0], xs[1], trans="T"), [l, b], seed=k)
        v = rng.standard_normal(3)
        check_gradients(lambda xs: ad.triangular_solve(xs[0], xs[1]), [l, v], seed=k)


def test_logdet_gradients():
    rng = np.random.default_rng(6)
    for k in range(10):
        spd = random_spd(rng, 4)
        check_gradients(lambda xs: ad.logdet_psd(xs[0]), [spd], seed=k)
        expected = np.linalg.slogdet(spd)[1]
        assert abs(ad.logdet_psd(ad.constant(spd)).value - expected) < 1e-10


def test_quadratic_form_gradients():
    rng = np.random.default_rng(7)
    a = rng.standard_normal((4, 4))
    x = rng.standard_normal(4)
    check_gradients(lambda xs: ad.quadratic_form(xs[0], xs[1]), [a, x])
    assert abs(ad.quadratic_form(ad.constant(a), ad.constant(x)).value - x @ a @ x) < 1e-12


def test_shape_utility_gradients():
    rng = np.random.default_rng(8)
    a = rng.standard_normal((3, 4))
    check_gradients(lambda xs: ad.transpose(xs[0]), [a])
    check_gradients(lambda xs: ad.reshape(xs[0], (4, 3)), [a])
    check_gradients(lambda xs: ad.tile_rows(xs[0], 3), [a])
    check_gradients(lambda xs: ad.reduce_sum(xs[0], axis=0), [a])
    check_gradients(lambda xs: ad.reduce_sum(xs[0], axis=1), [a])
    check_gradients(lambda xs: ad.reduce_sum(xs[0]), [a])
    sq = rng.standard_normal((4, 4))
    check_gradients(lambda xs: ad.diag_part(xs[0]), [sq])


def test_composite_gaussian_term_gradients():
    # the shape of term the ELBO graph is made of: logdet + solve + quadratic
    rng = np.random.default_rng(9)
    spd = random_spd(rng, 3)
    x = rng.standard_normal(3)

    def build(xs):
        factor = ad.cholesky(xs[0])
        resid = ad.triangular_solve(factor, xs[1], trans="N")
        quad = ad.reduce_sum(ad.mul(resid, resid))
        return ad.add(ad.logdet_psd(xs[0]), quad)

    check_gradients(build, [spd, x])


def test_diamond_graph_accumulates_once():
    # y = x*x + x*x: each path contributes, total gradient 4x
    x = ad.leaf(np.array([3.0]))
    y = ad.add(ad.mul(x, x), ad.mul(x, x))
    ad.backward(ad.reduce_sum(y))
    np.testing.assert_allclose(x.grad, [12.0])


def test_fanout_through_shared_subexpression():
    x = ad.leaf(np.array([2.0]))
    shared = ad.mul(x, x)          # x^2
    out = ad.mul(shared, shared)   # x^4, d/dx = 4 x^3 = 32
    ad.backward(ad.reduce_sum(out))
    np.testing.assert_allclose(x.grad, [32.0])


def test_backward_requires_scalar_root():
    x = ad.leaf(np.ones((2, 2)))
    with pytest.raises(errors.NotScalarRoot):
        ad.backward(ad.mul(x, 2.0))


def test_backward_twice_raises():
    x = ad.leaf(np.array([1.0]))
    root = ad.reduce_sum(ad.mul(x, x))
    ad.backward(root)
    with pytest.raises(errors.AlreadyConsumed):
        ad.backward(root)


def test_backward_deterministic():
    def run():
        rng = np.random.default_rng(123)
        w = ad.leaf(rng.standard_normal((4, 4)))
        x = ad.constant(rng.standard_normal((5, 4)))
        h = ad.gelu(ad.matmul(x, w))
        ad.backward(ad.reduce_sum(ad.mul(h, h)))
        return w.grad.copy()

    g1, g2 = run(), run()
    assert (g1 == g2).all()


def test_shape_errors():
    with pytest.raises(errors.ShapeMismatch):
        ad.matmul(ad.constant(np.ones((2, 3))), ad.constant(np.ones((2, 3))))
    with pytest.raises(errors.ShapeMismatch):
        ad.cholesky(ad.constant(np.ones((2, 3))))
    with pytest.raises(errors.ShapeMismatch):
        ad.quadratic_form(ad.constant(np.eye(2)), ad.constant(np.ones(3)))


def test_cholesky_rejects_non_pd():
    with pytest.raises(errors.NotPositiveDefinite):
        ad.cholesky(ad.constant(np.array([[1.0, 2.0], [2.0, 1.0]])))


def test_mlp_apply_matches_forward():
    rng = np.random.default_rng(10)
    mlp = ad.mlp_init(rng, [6, 8, 8, 2])
    x = rng.standard_normal((7, 6))
    graph_out = ad.mlp_apply(mlp, ad.constant(x)).value
    plain_out = ad.mlp_forward(mlp, x)
    assert (graph_out == plain_out).all()
    single = ad.mlp_forward(mlp, x[0])
    np.testing.assert_allclose(single, plain_out[0], atol=0)


def test_mlp_parameter_gradients():
    rng = np.random.default_rng(11)
    mlp = ad.mlp_init(rng, [4, 5, 3])
    x = rng.standard_normal((6, 4))
    proj = rng.standard_normal((6, 3))

    leaves = [(ad.leaf(w), ad.leaf(b)) for w, b in zip(mlp.weights, mlp.biases)]
    out = ad.mlp_apply(mlp, ad.constant(x), layer_leaves=leaves)
    ad.backward(ad.reduce_sum(ad.mul(out, proj)))

    flat = [arr for pair in zip(mlp.weights, mlp.biases) for arr in pair]
    for idx, arr in enumerate(flat):
        def f(perturbed, idx=idx):
            arrays = [a.copy() for a in flat]
            arrays[idx] = perturbed
            ws, bs = arrays[0::2], arrays[1::2]
            trial = ad.Mlp(weights=tuple(ws), biases=tuple(bs))
            return float(np.sum(proj * ad.mlp_forward(trial, x)))

        fd = central_difference(f, arr.copy(), step=1e-6)
        got = leaves[idx // 2][idx % 2].grad
        denom = max(np.abs(fd).max(), np.abs(got).max(), 1e-6)
        assert np.abs(fd - got).max() / denom < FD_TOL


def test_mlp_rejects_bad_input_width():
    rng = np.random.default_rng(12)
    mlp = ad.mlp_init(rng, [4, 5, 3])
    with pytest.raises(errors.ShapeMismatch):
        ad.mlp_forward(mlp, np.ones((2, 5)))
    with pytest.raises(errors.ShapeMismatch):
        ad.mlp_apply(mlp, ad.constant(np.ones((2, 5))))
