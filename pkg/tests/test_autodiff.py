"""Reverse-mode gradients against closed forms and the central-difference
oracle. The oracle itself is exercised on functions whose gradients are
known exactly, so the two routes are independently validated before being
compared to each other."""

import numpy as np
import pytest

from invdec.rng import stream
from invdec.tensor import (
    GradTape,
    Parameter,
    Tensor,
    add,
    backward,
    dropout,
    finite_diff_grad,
    gelu,
    layer_norm,
    matmul,
    max_relative_error,
    mean_all,
    mean_axis,
    mse,
    mul,
    neg,
    repeat_axis,
    reshape,
    sigmoid,
    softmax_rows,
    sub,
    sum_all,
    swapaxes,
    zero_grads,
)

TOL = 1e-4  # shared with the acceptance gate
H = 1e-5


def _fd_check(build_loss, params, tol=TOL, h=H):
    """backward() against finite differences for every parameter."""
    with GradTape() as tape:
        loss = build_loss()
    zero_grads(params)
    backward(loss, tape)
    for p in params:
        numeric = finite_diff_grad(lambda: build_loss().item(), p, h)
        err = max_relative_error(p.grad, numeric)
        assert err < tol, f"{p.name}: rel err {err:.3e}"


class TestClosedForms:
    def test_linear_map_gradient_is_input_outer_product(self):
        rng = stream(0, "test/closed")
        w = Parameter(rng.normal(size=(4, 3)), "W")
        x = Tensor(rng.normal(size=(3, 2)))
        with GradTape() as tape:
            loss = sum_all(matmul(w, x))
        backward(loss, tape)
        # d sum(Wx) / dW = ones(4,2) @ x^T: every row is x.sum(axis=1)
        expected = np.tile(x.data.sum(axis=1), (4, 1))
        np.testing.assert_allclose(w.grad, expected, rtol=0, atol=1e-13)

    def test_quadratic(self):
        p = Parameter(np.array([1.0, -2.0, 0.5]), "p")
        with GradTape() as tape:
            loss = sum_all(add(mul(p, p), p))
        backward(loss, tape)
        np.testing.assert_allclose(p.grad, 2.0 * p.data + 1.0, rtol=0, atol=1e-14)

    def test_parameter_reused_on_two_paths_sums_contributions(self):
        rng = stream(1, "test/closed")
        p = Parameter(rng.normal(size=(3, 3)), "p")
        a = Tensor(rng.normal(size=(3, 3)))
        b = Tensor(rng.normal(size=(3, 3)))

        def build():
            return sum_all(add(matmul(p, a), matmul(b, p)))

        with GradTape() as tape:
            loss = build()
        backward(loss, tape)
        # closed form: ones @ a^T + b^T @ ones
        ones = np.ones((3, 3))
        expected = ones @ a.data.T + b.data.T @ ones
        np.testing.assert_allclose(p.grad, expected, rtol=0, atol=1e-13)
        zero_grads([p])
        numeric = finite_diff_grad(lambda: build().item(), p, H)
        assert max_relative_error(expected, numeric) < TOL


class TestBackwardSemantics:
    def test_rejects_non_scalar_loss(self):
        p = Parameter(np.ones(3), "p")
        with GradTape() as tape:
            out = mul(p, p)
        with pytest.raises(ValueError, match="scalar"):
            backward(out, tape)

    def test_grads_accumulate_until_zeroed(self):
        p = Parameter(np.array([2.0]), "p")
        for _ in range(2):
            with GradTape() as tape:
                loss = sum_all(mul(p, p))
            backward(loss, tape)
        np.testing.assert_allclose(p.grad, 2.0 * (2.0 * p.data), rtol=0, atol=1e-14)
        zero_grads([p])
        assert np.all(p.grad == 0.0)

    def test_records_off_the_loss_path_are_skipped(self):
        p = Parameter(np.ones(2), "p")
        q = Parameter(np.ones(2), "q")
        with GradTape() as tape:
            mul(q, q)  # recorded but never reaches the loss
            loss = sum_all(mul(p, p))
        zero_grads([p, q])
        backward(loss, tape)
        assert np.all(q.grad == 0.0)
        np.testing.assert_allclose(p.grad, 2.0 * p.data, rtol=0, atol=1e-14)

    def test_nested_tapes(self):
        p = Parameter(np.array([3.0]), "p")
        with GradTape() as outer:
            sum_all(mul(p, p))
            with GradTape() as inner:
                loss_inner = sum_all(mul(p, p))
            backward(loss_inner, inner)
        assert len(outer) == 2
        np.testing.assert_allclose(p.grad, [6.0], rtol=0, atol=1e-14)


class TestOracleItself:
    def test_finite_diff_on_known_quadratic(self):
        p = Parameter(np.array([[1.0, -3.0], [0.25, 2.0]]), "p")
        numeric = finite_diff_grad(lambda: float((p.data**2).sum()), p, H)
        np.testing.assert_allclose(numeric, 2.0 * p.data, rtol=0, atol=1e-6)

    def test_restores_parameter_bit_exactly(self):
        vals = np.array([0.1, 1e-12, -7.5])
        p = Parameter(vals.copy(), "p")
        finite_diff_grad(lambda: float((p.data**3).sum()), p, H)
        assert np.array_equal(p.data, vals)

    def test_metric_flags_a_wrong_gradient(self):
        good = np.array([1.0, 2.0, 0.0])
        noisy = good + np.array([1e-12, -1e-12, 5e-12])
        assert max_relative_error(good, noisy) == 0.0
        assert max_relative_error(good, good * 2.0) > 0.4


class TestPrimitiveGradients:
    def test_matmul_batched(self):
        rng = stream(2, "test/fd")
        w = Parameter(rng.normal(size=(4, 3)), "w")
        x = Tensor(rng.normal(size=(2, 5, 4)))
        t = Tensor(rng.normal(size=(2, 5, 3)))
        _fd_check(lambda: mse(matmul(x, w), t), [w])

    def test_add_sub_mul_broadcast(self):
        rng = stream(3, "test/fd")
        a = Parameter(rng.normal(size=(1, 4)), "a")
        b = Parameter(rng.normal(size=(3, 1)), "b")
        t = Tensor(rng.normal(size=(3, 4)))
        _fd_check(lambda: mse(add(a, b), t), [a, b])
        _fd_check(lambda: mse(sub(mul(a, b), a), t), [a, b])

    def test_neg_reshape_swap_repeat(self):
        rng = stream(4, "test/fd")
        p = Parameter(rng.normal(size=(2, 6)), "p")
        t = Tensor(rng.normal(size=(4, 2, 3)))

        def build():
            z = reshape(neg(p), (2, 2, 3))
            z = swapaxes(z, 0, 1)
            z = repeat_axis(z, 0, 4)
            return mse(mean_axis(z, 1), t)

        _fd_check(build, [p])

    def test_reductions(self):
        rng = stream(5, "test/fd")
        p = Parameter(rng.normal(size=(3, 4)), "p")
        _fd_check(lambda: mean_all(mul(p, p)), [p])
        _fd_check(lambda: sum_all(mul(p, sigmoid(p))), [p])

    def test_softmax_mse_matches_fd(self):
        rng = stream(6, "test/fd")
        w = Parameter(rng.normal(size=(4, 5)), "w")
        target = Tensor(rng.uniform(size=(4, 5)))
        _fd_check(lambda: mse(softmax_rows(w), target), [w])

    def test_layer_norm_all_three_inputs(self):
        rng = stream(7, "test/fd")
        x = Parameter(rng.normal(size=(3, 6)), "x")
        gain = Parameter(rng.normal(size=6), "gain")
        bias = Parameter(rng.normal(size=6), "bias")
        t = Tensor(rng.normal(size=(3, 6)))
        _fd_check(lambda: mse(layer_norm(x, gain, bias), t), [x, gain, bias])

    def test_gelu(self):
        rng = stream(8, "test/fd")
        p = Parameter(rng.normal(size=(4, 4)), "p")
        t = Tensor(rng.normal(size=(4, 4)))
        _fd_check(lambda: mse(gelu(p), t), [p])

    def test_dropout_with_refrozen_mask(self):
        rng = stream(9, "test/fd")
        p = Parameter(rng.normal(size=(5, 5)), "p")
        t = Tensor(rng.normal(size=(5, 5)))

        def build():
            # recreate the stream so every probe sees the identical mask
            return mse(dropout(p, 0.4, training=True, rng=stream(42, "mask")), t)

        _fd_check(build, [p])


class TestToyNetwork:
    def test_two_layer_network_matches_fd(self):
        rng = stream(10, "test/toy")
        w1 = Parameter(rng.normal(scale=0.5, size=(6, 8)), "w1")
        b1 = Parameter(np.zeros(8), "b1")
        w2 = Parameter(rng.normal(scale=0.5, size=(8, 3)), "w2")
        b2 = Parameter(np.zeros(3), "b2")
        x = Tensor(rng.normal(size=(10, 6)))
        t = Tensor(rng.normal(size=(10, 3)))

        def build():
            h = gelu(add(matmul(x, w1), b1))
            return mse(add(matmul(h, w2), b2), t)

        _fd_check(build, [w1, b1, w2, b2])
