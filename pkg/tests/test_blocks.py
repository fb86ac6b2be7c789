"""Branch network derivative primitives against finite-difference oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from resflow.blocks import (
    BlockParams,
    LayerParams,
    bilinear_param_grad,
    bilinear_param_grad_per_sample,
    block_dense_jacobian,
    block_forward,
    block_forward_cache,
    block_jvp,
    block_param_grad_of_output,
    block_vjp,
    grads_vector,
    param_count,
    param_vector,
    set_param_vector,
)
from resflow.errors import GuardError, ShapeError
from resflow.norms import init_block_params

FD_STEP_FIRST = 1e-5
FD_STEP_SECOND = 1e-4


def make_block(seed=0, hidden=8, n_layers=3):
    return init_block_params(np.random.default_rng(seed), 2, hidden=hidden, n_layers=n_layers)


def linear_block(A, bias=None):
    A = np.asarray(A, dtype=np.float64)
    b = np.zeros(A.shape[0]) if bias is None else np.asarray(bias, dtype=np.float64)
    return BlockParams(layers=[LayerParams(weight=A, bias=b, raw_beta=None)])


def zero_block(hidden=8):
    params = make_block(seed=3, hidden=hidden)
    for lay in params.layers:
        lay.weight[...] = 0.0
        lay.bias[...] = 0.0
    return params


def fd_param_gradient(params, scalar_fn, h):
    vec = param_vector(params)
    out = np.zeros_like(vec)
    for i in range(vec.size):
        e = np.zeros_like(vec)
        e[i] = h
        p_plus, p_minus = params.copy(), params.copy()
        set_param_vector(p_plus, vec + e)
        set_param_vector(p_minus, vec - e)
        out[i] = (scalar_fn(p_plus) - scalar_fn(p_minus)) / (2.0 * h)
    return out


class TestForward:
    def test_zero_weights_give_zero_map(self):
        params = zero_block()
        x = np.array([1.3, -0.4])
        np.testing.assert_array_equal(block_forward(params, x), np.zeros(2))

    def test_single_linear_layer(self):
        A = np.array([[0.3, -0.1], [0.2, 0.4]])
        params = linear_block(A)
        x = np.array([1.0, -1.0])
        np.testing.assert_allclose(block_forward(params, x), A @ x, rtol=1e-14)

    def test_matches_straight_line_reimplementation(self):
        params = make_block(seed=11)
        x = np.array([1.0, -1.0])
        h = x
        for l, lay in enumerate(params.layers):
            z = lay.weight @ h + lay.bias
            if l < len(params.layers) - 1:
                beta = lay.beta
                h = z / (1.0 + np.exp(-beta * z)) / 1.1
            else:
                h = z
        np.testing.assert_allclose(block_forward(params, x), h, rtol=1e-12)

    def test_batched_matches_loop(self):
        params = make_block(seed=4)
        X = np.random.default_rng(5).standard_normal((7, 2))
        batched = block_forward(params, X)
        rows = np.stack([block_forward(params, x) for x in X])
        np.testing.assert_allclose(batched, rows, rtol=1e-14)

    def test_dimension_mismatch_raises(self):
        params = make_block()
        with pytest.raises(ShapeError):
            block_forward(params, np.zeros(3))

    def test_bad_layer_chaining_rejected(self):
        good = make_block()
        layers = [lay.copy() for lay in good.layers]
        layers[1].weight = layers[1].weight[:, :-1]
        with pytest.raises(ShapeError):
            BlockParams(layers=layers)


class TestJvpVjp:
    def test_zero_weights(self):
        params = zero_block()
        v = np.array([0.5, 2.0])
        np.testing.assert_array_equal(block_jvp(params, np.zeros(2), v), np.zeros(2))
        np.testing.assert_array_equal(block_vjp(params, np.zeros(2), v), np.zeros(2))

    def test_linear_block(self):
        A = np.array([[0.3, -0.1], [0.2, 0.4]])
        params = linear_block(A)
        x = np.array([0.2, 0.1])
        v = np.array([1.0, 2.0])
        np.testing.assert_allclose(block_jvp(params, x, v), A @ v, rtol=1e-14)
        np.testing.assert_allclose(block_vjp(params, x, v), A.T @ v, rtol=1e-14)

    def test_jvp_matches_central_differences(self):
        params = make_block(seed=21)
        rng = np.random.default_rng(22)
        for _ in range(5):
            x = rng.standard_normal(2)
            v = rng.standard_normal(2)
            h = FD_STEP_FIRST
            fd = (block_forward(params, x + h * v) - block_forward(params, x - h * v)) / (2 * h)
            np.testing.assert_allclose(block_jvp(params, x, v), fd, rtol=1e-6)

    def test_vjp_matches_dense_jacobian(self):
        params = make_block(seed=23)
        rng = np.random.default_rng(24)
        x = rng.standard_normal(2)
        u = rng.standard_normal(2)
        jac = block_dense_jacobian(params, x)
        np.testing.assert_allclose(block_vjp(params, x, u), u @ jac, rtol=1e-10)

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_transpose_consistency(self, seed):
        rng = np.random.default_rng(seed)
        params = make_block(seed=seed % 1000, hidden=6)
        x, u, v = rng.standard_normal((3, 2))
        lhs = float(u @ block_jvp(params, x, v))
        rhs = float(block_vjp(params, x, u) @ v)
        assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-13)


class TestDenseJacobian:
    def test_zero_and_linear(self):
        np.testing.assert_array_equal(
            block_dense_jacobian(zero_block(), np.zeros(2)), np.zeros((2, 2))
        )
        A = np.array([[0.1, 0.2], [-0.3, 0.4]])
        np.testing.assert_allclose(
            block_dense_jacobian(linear_block(A), np.ones(2)), A, rtol=1e-14
        )

    def test_matches_finite_differences(self):
        params = make_block(seed=31)
        x = np.array([0.3, -0.6])
        jac = block_dense_jacobian(params, x)
        h = FD_STEP_FIRST
        fd = np.stack(
            [(block_forward(params, x + h * e) - block_forward(params, x - h * e)) / (2 * h)
             for e in np.eye(2)],
            axis=1,
        )
        np.testing.assert_allclose(jac, fd, atol=1e-6)

    def test_dimension_guard(self):
        rng = np.random.default_rng(0)
        big = linear_block(rng.standard_normal((17, 17)) * 0.01)
        with pytest.raises(GuardError):
            block_dense_jacobian(big, np.zeros(17))


class TestBilinearParamGrad:
    def test_zero_probe_gives_zero(self):
        params = make_block(seed=41)
        x = np.array([0.2, 0.8])
        g = grads_vector(bilinear_param_grad(params, x, np.zeros(2), np.ones(2)))
        np.testing.assert_array_equal(g, np.zeros_like(g))
        g = grads_vector(bilinear_param_grad(params, x, np.ones(2), np.zeros(2)))
        np.testing.assert_array_equal(g, np.zeros_like(g))

    def test_linear_block_outer_product(self):
        A = np.array([[0.2, 0.0], [0.1, -0.3]])
        params = linear_block(A)
        u = np.array([1.0, 2.0])
        v = np.array([-0.5, 3.0])
        g = bilinear_param_grad(params, np.zeros(2), u, v)
        np.testing.assert_allclose(g.layers[0].weight, np.outer(u, v), rtol=1e-14)

    @pytest.mark.parametrize("n_layers,hidden", [(1, 2), (2, 6), (3, 8), (4, 5)])
    def test_matches_finite_differences(self, n_layers, hidden):
        params = (
            linear_block(np.random.default_rng(1).standard_normal((2, 2)) * 0.4)
            if n_layers == 1
            else make_block(seed=42 + n_layers, hidden=hidden, n_layers=n_layers)
        )
        rng = np.random.default_rng(43)
        x, u, v = rng.standard_normal((3, 2))

        def bilinear(p):
            return float(u @ block_jvp(p, x, v))

        analytic = grads_vector(bilinear_param_grad(params, x, u, v))
        fd = fd_param_gradient(params, bilinear, FD_STEP_SECOND)
        np.testing.assert_allclose(analytic, fd, rtol=1e-4, atol=1e-9)

    def test_input_grad_matches_finite_differences(self):
        params = make_block(seed=44)
        rng = np.random.default_rng(45)
        x, u, v = rng.standard_normal((3, 2))
        _, ig = bilinear_param_grad(params, x, u, v, want_input_grad=True)
        h = FD_STEP_SECOND
        fd = np.array(
            [
                (float(u @ block_jvp(params, x + h * e, v)) - float(u @ block_jvp(params, x - h * e, v)))
                / (2 * h)
                for e in np.eye(2)
            ]
        )
        np.testing.assert_allclose(ig[0], fd, rtol=1e-5, atol=1e-9)

    def test_per_sample_agrees_with_summed(self):
        params = make_block(seed=46, hidden=5)
        rng = np.random.default_rng(47)
        x = rng.standard_normal(2)
        U = rng.standard_normal((6, 2))
        V = rng.standard_normal((6, 2))
        per = bilinear_param_grad_per_sample(params, x, U, V)
        assert per.shape == (6, param_count(params))
        total = grads_vector(bilinear_param_grad(params, x, U, V))
        np.testing.assert_allclose(per.sum(axis=0), total, rtol=1e-10, atol=1e-12)


class TestOutputParamGrad:
    def test_zero_cotangent(self):
        params = make_block(seed=51)
        g = grads_vector(block_param_grad_of_output(params, np.zeros(2), np.zeros(2)))
        np.testing.assert_array_equal(g, np.zeros_like(g))

    def test_final_bias_gradient_is_cotangent(self):
        params = make_block(seed=52)
        u = np.array([0.3, -0.9])
        g = block_param_grad_of_output(params, np.zeros(2), u)
        np.testing.assert_allclose(g.layers[-1].bias, u, rtol=1e-14)

    def test_matches_finite_differences(self):
        params = make_block(seed=53, hidden=6)
        rng = np.random.default_rng(54)
        x, u = rng.standard_normal((2, 2))

        def functional(p):
            return float(u @ block_forward(p, x))

        analytic = grads_vector(block_param_grad_of_output(params, x, u))
        fd = fd_param_gradient(params, functional, FD_STEP_FIRST)
        np.testing.assert_allclose(analytic, fd, rtol=1e-5, atol=1e-10)

    def test_return_vjp_matches_block_vjp(self):
        params = make_block(seed=55)
        rng = np.random.default_rng(56)
        x, u = rng.standard_normal((2, 2))
        _, vjp = block_param_grad_of_output(params, x, u, return_vjp=True)
        np.testing.assert_allclose(vjp, block_vjp(params, x, u), rtol=1e-12)


class TestParamVector:
    def test_round_trip(self):
        params = make_block(seed=61)
        vec = param_vector(params)
        clone = params.copy()
        set_param_vector(clone, vec * 0.0)
        set_param_vector(clone, vec)
        np.testing.assert_array_equal(param_vector(clone), vec)
        assert vec.size == param_count(params)

    def test_cache_reuse_consistency(self):
        params = make_block(seed=62)
        X = np.random.default_rng(63).standard_normal((5, 2))
        g, cache = block_forward_cache(params, X)
        np.testing.assert_allclose(g, block_forward(params, X), rtol=1e-14)
        v = np.random.default_rng(64).standard_normal((5, 2))
        np.testing.assert_allclose(
            block_jvp(params, X, v, cache=cache), block_jvp(params, X, v), rtol=1e-14
        )
