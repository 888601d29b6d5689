"""Autodiff core: operator gradients, layers, dropout, Adam, grad checking."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from virtualsensor.errors import SchemaError
from virtualsensor.nncore import (
    AdamState,
    DenseLayer,
    Var,
    adam_step,
    collect_grads,
    dense,
    dense_forward,
    dropout,
    glorot_uniform,
    grad_check,
    mse_loss,
    relu,
    sigmoid,
    wrap_params,
)


# ---------------------------------------------------------------- Var basics


def test_var_add_mul_grads():
    x = Var(np.array([[2.0, 3.0]]))
    y = Var(np.array([[4.0, 5.0]]))
    out = (x * y + x).sum()
    out.backward()
    assert np.allclose(x.grad, [[5.0, 6.0]])  # y + 1
    assert np.allclose(y.grad, [[2.0, 3.0]])  # x


def test_var_matmul_grads():
    a = Var(np.array([[1.0, 2.0], [3.0, 4.0]]))
    b = Var(np.array([[5.0], [6.0]]))
    out = (a @ b).sum()
    out.backward()
    assert np.allclose(a.grad, [[5.0, 6.0], [5.0, 6.0]])
    assert np.allclose(b.grad, [[4.0], [6.0]])


def test_var_broadcast_add_unbroadcasts_grad():
    x = Var(np.zeros((3, 2)))
    b = Var(np.zeros((1, 2)))
    out = (x + b).sum()
    out.backward()
    assert b.grad.shape == (1, 2)
    assert np.allclose(b.grad, [[3.0, 3.0]])


def test_var_division_grads():
    x = Var(np.array([6.0]))
    y = Var(np.array([3.0]))
    out = (x / y).sum()
    out.backward()
    assert x.grad[0] == pytest.approx(1.0 / 3.0)
    assert y.grad[0] == pytest.approx(-6.0 / 9.0)


def test_var_relu_kink():
    x = Var(np.array([-2.0, 0.0, 3.0]))
    out = x.relu().sum()
    out.backward()
    assert np.allclose(x.grad, [0.0, 0.0, 1.0])


def test_var_sigmoid_value_and_grad():
    x = Var(np.array([0.0]))
    out = x.sigmoid().sum()
    out.backward()
    assert out.value == pytest.approx(0.5)
    assert x.grad[0] == pytest.approx(0.25)


def test_var_max_axis_routes_gradient_to_argmax():
    x = Var(np.array([[1.0, 5.0, 2.0], [7.0, 0.0, 3.0]]))
    out = x.max(axis=0).sum()
    out.backward()
    assert np.allclose(x.grad, [[0.0, 1.0, 0.0], [1.0, 0.0, 1.0]])


def test_var_mean_grad():
    x = Var(np.arange(6.0).reshape(2, 3))
    x.mean().backward()
    assert np.allclose(x.grad, np.full((2, 3), 1.0 / 6.0))


def test_var_reshape_and_slice_grads():
    x = Var(np.arange(8.0).reshape(2, 4))
    out = x.reshape(4, 2).slice_axis(0, 1, 3).sum()
    out.backward()
    want = np.zeros(8)
    want[2:6] = 1.0
    assert np.allclose(x.grad, want.reshape(2, 4))


def test_var_pad_axis_grad():
    x = Var(np.ones((2, 2)))
    out = x.pad_axis(1, 1, 2)
    assert out.shape == (2, 5)
    out.sum().backward()
    assert np.allclose(x.grad, np.ones((2, 2)))


def test_var_reused_node_accumulates():
    x = Var(np.array([3.0]))
    out = (x * x + x).sum()  # derivative 2x + 1
    out.backward()
    assert x.grad[0] == pytest.approx(7.0)


def test_backward_requires_scalar():
    x = Var(np.ones((2, 2)))
    with pytest.raises(SchemaError):
        (x * 2).backward()


@given(st.floats(min_value=-5, max_value=5), st.floats(min_value=-5, max_value=5))
@settings(max_examples=60, deadline=None)
def test_exp_grad_matches_value(a, b):
    x = Var(np.array([a, b]))
    out = x.exp().sum()
    out.backward()
    assert np.allclose(x.grad, np.exp([a, b]), rtol=1e-12)


# ---------------------------------------------------------------- layers


def test_dense_forward_example():
    layer = DenseLayer(W=np.array([[1.0, 0.0], [0.0, 2.0]]), b=np.array([[1.0, -1.0]]))
    out = dense_forward(layer, np.array([[3.0, 4.0]]))
    assert np.allclose(out.value, [[4.0, 7.0]])


def test_dense_shape_mismatch():
    layer = DenseLayer(W=np.zeros((3, 2)), b=np.zeros((1, 2)))
    with pytest.raises(SchemaError):
        dense_forward(layer, np.zeros((1, 4)))
    with pytest.raises(SchemaError):
        dense(Var(np.zeros((1, 4))), Var(np.zeros((3, 2))), Var(np.zeros((1, 2))))


def test_glorot_uniform_bounds():
    rng = np.random.default_rng(0)
    w = glorot_uniform(rng, 100, 50)
    limit = math.sqrt(6.0 / 150.0)
    assert w.shape == (100, 50)
    assert np.all(np.abs(w) <= limit)
    assert abs(w.mean()) < 0.01


# ---------------------------------------------------------------- dropout


def test_dropout_eval_is_identity():
    x = np.random.default_rng(0).normal(size=(10, 4))
    out = dropout(x, 0.5, "eval")
    assert np.array_equal(out.value, x)


def test_dropout_zero_rate_is_identity():
    x = np.ones((5, 5))
    out = dropout(x, 0.0, "train", np.random.default_rng(0))
    assert np.array_equal(out.value, x)


def test_dropout_train_scales_survivors():
    x = np.ones((4, 4))
    out = dropout(x, 0.5, "train", np.random.default_rng(1))
    vals = np.unique(out.value)
    assert set(vals) <= {0.0, 2.0}  # inverted dropout: survivors scaled by 2


def test_dropout_monte_carlo_mean_preserved():
    # E[dropout(x)] == x: the survivor scaling keeps activations unbiased.
    rng = np.random.default_rng(123)
    x = np.ones(100_000)
    out = dropout(x, 0.5, "train", rng)
    assert 0.98 <= out.value.mean() <= 1.02


def test_dropout_frozen_mask():
    x = Var(np.ones((2, 2)))
    mask = np.array([[1.0, 0.0], [0.0, 1.0]])
    out = dropout(x, 0.5, "train", mask=mask)
    assert np.allclose(out.value, [[2.0, 0.0], [0.0, 2.0]])
    out.sum().backward()
    assert np.allclose(x.grad, [[2.0, 0.0], [0.0, 2.0]])


def test_dropout_validation():
    with pytest.raises(SchemaError):
        dropout(np.ones(3), 1.0, "train", np.random.default_rng(0))
    with pytest.raises(SchemaError):
        dropout(np.ones(3), 0.5, "predict", np.random.default_rng(0))
    with pytest.raises(SchemaError):
        dropout(np.ones(3), 0.5, "train")  # no rng, no mask


# ---------------------------------------------------------------- loss


def test_mse_loss_example():
    # mean of squared errors: ((1)^2 + (3)^2) / 2 = 5
    loss = mse_loss(np.array([[2.0], [7.0]]), np.array([[1.0], [4.0]]))
    assert loss.value == pytest.approx(5.0)


def test_mse_loss_zero_at_match():
    x = np.array([[1.5, -2.0]])
    assert mse_loss(x, x.copy()).value == pytest.approx(0.0)


def test_mse_loss_shape_check():
    with pytest.raises(SchemaError):
        mse_loss(np.zeros((2, 1)), np.zeros((3, 1)))


def test_mse_loss_grad():
    pred = Var(np.array([[3.0], [5.0]]))
    actual = np.array([[1.0], [1.0]])
    mse_loss(pred, actual).backward()
    # d/dpred mean((p-a)^2) = 2(p-a)/n
    assert np.allclose(pred.grad, [[2.0], [4.0]])


# ---------------------------------------------------------------- Adam


def test_adam_first_step_moves_by_lr():
    # With bias correction, the first step is exactly -lr * sign(g).
    params = {"w": np.array([[1.0, -2.0]])}
    grads = {"w": np.array([[0.3, -0.7]])}
    state = AdamState(lr=0.1)
    params, state = adam_step(params, grads, state)
    assert np.allclose(params["w"], [[0.9, -1.9]], atol=1e-7)
    assert state.step == 1


def test_adam_zero_lr_is_noop():
    params = {"w": np.array([[5.0]])}
    state = AdamState(lr=0.0)
    params, _ = adam_step(params, {"w": np.array([[123.0]])}, state)
    assert params["w"][0, 0] == 5.0


def test_adam_rejects_nonfinite_grad():
    params = {"w": np.zeros((1, 1)), "b": np.zeros((1, 1))}
    grads = {"w": np.zeros((1, 1)), "b": np.array([[np.nan]])}
    with pytest.raises(SchemaError, match="'b'"):
        adam_step(params, grads, AdamState())


def test_adam_converges_on_quadratic():
    params = {"w": np.array([[10.0]])}
    state = AdamState(lr=0.5)
    for _ in range(200):
        grads = {"w": 2.0 * params["w"]}
        params, state = adam_step(params, grads, state)
    assert abs(params["w"][0, 0]) < 1e-2


def test_adam_state_persistence_matters():
    # Continuing one optimizer differs from restarting each step (momentum).
    def run(restart):
        params = {"w": np.array([[4.0]])}
        state = AdamState(lr=0.1)
        for _ in range(10):
            if restart:
                state = AdamState(lr=0.1)
            params, state = adam_step(params, {"w": 2.0 * params["w"]}, state)
        return params["w"][0, 0]

    assert run(False) != pytest.approx(run(True), abs=1e-9)


# ---------------------------------------------------------------- grad check


def test_grad_check_clean_function():
    rng = np.random.default_rng(0)
    params = {
        "w1": rng.normal(size=(4, 3)),
        "b1": rng.normal(size=(1, 3)),
        "w2": rng.normal(size=(3, 1)),
    }
    x = rng.normal(size=(6, 4))
    y = rng.normal(size=(6, 1))

    def f(p):
        h = relu(Var(x) @ p["w1"] + p["b1"])
        return mse_loss(h @ p["w2"], y)

    assert grad_check(f, params) < 1e-6


def test_grad_check_catches_wrong_gradient():
    params = {"w": np.array([[2.0]])}

    class LyingVar(Var):
        pass

    def f(p):
        # deliberately corrupted op: value of w^2 but gradient of w
        w = p["w"]
        out = Var(w.value * w.value, parents=(w,), backward=None)

        def back(grad):
            w._accumulate(grad)  # should be 2w * grad

        out._backward = back
        return out.sum()

    assert grad_check(f, params) > 0.1


def test_wrap_and_collect_roundtrip():
    params = {"a": np.ones((2, 2)), "b": np.zeros((1, 3))}
    leaves = wrap_params(params)
    (leaves["a"].sum() + leaves["b"].sum()).backward()
    grads = collect_grads(leaves)
    assert np.allclose(grads["a"], 1.0)
    assert np.allclose(grads["b"], 1.0)


def test_collect_grads_fills_untouched_with_zeros():
    leaves = wrap_params({"a": np.ones((2,)), "unused": np.ones((3,))})
    leaves["a"].sum().backward()
    grads = collect_grads(leaves)
    assert np.allclose(grads["unused"], 0.0)
