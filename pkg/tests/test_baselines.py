"""Baseline models: MLP, 1-D CNN, and least-squares gradient boosting."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from virtualsensor.baselines import (
    CnnConfig,
    GbtConfig,
    MlpConfig,
    best_split,
    cnn_forward_batch,
    gbt_fit,
    gbt_predict,
    init_cnn_params,
    init_mlp_params,
    mlp_forward_batch,
)
from virtualsensor.errors import SchemaError
from virtualsensor.nncore import grad_check, mse_loss, wrap_params


# ---------------------------------------------------------------- MLP


def test_mlp_param_shapes():
    cfg = MlpConfig(hidden=(64, 64, 32))
    p = init_mlp_params(cfg, 19, np.random.default_rng(0))
    assert p["fc1.w"].shape == (19, 64)
    assert p["fc2.w"].shape == (64, 64)
    assert p["fc3.w"].shape == (64, 32)
    assert p["fc4.w"].shape == (32, 1)
    assert all(v.ndim == 2 for v in p.values())


def test_mlp_eval_deterministic():
    cfg = MlpConfig()
    p = init_mlp_params(cfg, 19, np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(4, 19))
    a = mlp_forward_batch(wrap_params(p), cfg, x).value
    b = mlp_forward_batch(wrap_params(p), cfg, x).value
    assert np.array_equal(a, b)
    assert a.shape == (4,)


def test_mlp_dropout_only_in_train_mode():
    cfg = MlpConfig()
    p = init_mlp_params(cfg, 10, np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(8, 10))
    ev = mlp_forward_batch(wrap_params(p), cfg, x, mode="eval").value
    tr = mlp_forward_batch(wrap_params(p), cfg, x, mode="train",
                           rng=np.random.default_rng(2)).value
    assert not np.allclose(ev, tr)


def test_mlp_gradients():
    cfg = MlpConfig(hidden=(5, 5, 4))
    rng = np.random.default_rng(0)
    p = init_mlp_params(cfg, 6, rng)
    p = {k: v + 0.05 * rng.normal(size=v.shape) for k, v in p.items()}
    x = rng.normal(size=(7, 6))
    y = rng.normal(size=7)
    mask = (rng.random((7, 5)) >= 0.5).astype(float)

    def f(pv):
        return mse_loss(mlp_forward_batch(pv, cfg, x, dropout_mask=mask), y)

    assert grad_check(f, p) < 1e-4


# ---------------------------------------------------------------- CNN


def test_cnn_param_shapes():
    cfg = CnnConfig(channels=8, kernel=3, dense_hidden=32)
    p = init_cnn_params(cfg, 19, np.random.default_rng(0))
    assert p["conv1.w"].shape == (3, 8)  # kernel taps stacked over 1 input channel
    assert p["conv2.w"].shape == (24, 8)
    assert p["fc1.w"].shape == (19 * 8, 32)
    assert p["fc2.w"].shape == (32, 1)


def test_cnn_kernel_wider_than_input_rejected():
    with pytest.raises(SchemaError):
        init_cnn_params(CnnConfig(kernel=25), 19, np.random.default_rng(0))


def test_cnn_eval_deterministic():
    cfg = CnnConfig()
    p = init_cnn_params(cfg, 19, np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(5, 19))
    a = cnn_forward_batch(wrap_params(p), cfg, x).value
    b = cnn_forward_batch(wrap_params(p), cfg, x).value
    assert np.array_equal(a, b)
    assert a.shape == (5,)


def test_cnn_convolution_is_translation_local():
    # Zero conv weights except the center tap identity: the network's first
    # conv layer then passes features straight through.
    cfg = CnnConfig(channels=1, kernel=3, dense_hidden=2)
    p = init_cnn_params(cfg, 4, np.random.default_rng(0))
    p["conv1.w"] = np.array([[0.0], [1.0], [0.0]])  # taps: left, center, right
    p["conv1.b"] = np.zeros((1, 1))
    p["conv2.w"] = np.array([[0.0], [1.0], [0.0]])
    p["conv2.b"] = np.zeros((1, 1))
    p["fc1.w"] = np.eye(4)[:, :2]
    p["fc1.b"] = np.zeros((1, 2))
    p["fc2.w"] = np.array([[1.0], [0.0]])
    p["fc2.b"] = np.zeros((1, 1))
    x = np.array([[3.0, -1.0, 2.0, 0.5]])
    out = cnn_forward_batch(wrap_params(p), cfg, x).value
    # relu(conv) twice keeps positives; fc1 picks column 0 -> relu(3.0)
    assert out[0] == pytest.approx(3.0)


def test_cnn_gradients():
    cfg = CnnConfig(channels=3, kernel=3, dense_hidden=4)
    rng = np.random.default_rng(0)
    p = init_cnn_params(cfg, 6, rng)
    p = {k: v + 0.05 * rng.normal(size=v.shape) for k, v in p.items()}
    x = rng.normal(size=(4, 6))
    y = rng.normal(size=4)
    mask = (rng.random((4, 6, 3)) >= 0.5).astype(float)

    def f(pv):
        return mse_loss(cnn_forward_batch(pv, cfg, x, dropout_mask=mask), y)

    assert grad_check(f, p) < 1e-4


# ---------------------------------------------------------------- GBT splits


def test_best_split_depth1_oracle():
    # Exhaustive oracle on a tiny dataset: compare against brute force over
    # every midpoint candidate in every feature.
    rng = np.random.default_rng(5)
    x = rng.normal(size=(20, 3))
    y = rng.normal(size=20)

    def brute_force():
        n = len(y)
        best = None
        for j in range(3):
            for thr in np.unique(x[:, j]):
                mask = x[:, j] < thr
                nl, nr = mask.sum(), n - mask.sum()
                if nl == 0 or nr == 0:
                    continue
                sse_split = ((y[mask] - y[mask].mean()) ** 2).sum() + (
                    (y[~mask] - y[~mask].mean()) ** 2
                ).sum()
                gain = ((y - y.mean()) ** 2).sum() - sse_split
                if best is None or gain > best[0]:
                    best = (gain, j, thr)
        return best

    got = best_split(x, y)
    want = brute_force()
    assert got is not None
    assert got[0] == pytest.approx(want[0], rel=1e-9)
    assert got[1] == want[1]
    # thresholds differ in convention (midpoint vs exact value) but must
    # induce the same partition
    assert np.array_equal(x[:, got[1]] < got[2], x[:, want[1]] < want[2])


def test_best_split_constant_target_returns_none():
    x = np.random.default_rng(0).normal(size=(10, 2))
    assert best_split(x, np.full(10, 3.0)) is None


def test_best_split_constant_feature_returns_none():
    x = np.ones((10, 1))
    y = np.arange(10.0)
    assert best_split(x, y) is None


def test_best_split_respects_min_leaf():
    x = np.arange(10.0).reshape(-1, 1)
    y = np.array([0.0] * 9 + [100.0])  # best unconstrained split isolates one row
    got = best_split(x, y, min_leaf=3)
    assert got is not None
    mask = x[:, got[1]] < got[2]
    assert mask.sum() >= 3 and (~mask).sum() >= 3


def test_best_split_perfect_step():
    x = np.array([[0.0], [1.0], [2.0], [3.0]])
    y = np.array([1.0, 1.0, 5.0, 5.0])
    gain, j, thr = best_split(x, y)
    assert j == 0
    assert thr == pytest.approx(1.5)
    assert gain == pytest.approx(16.0)  # SSE drops from 16 to 0


# ---------------------------------------------------------------- GBT boosting


def test_gbt_training_mse_non_increasing():
    for seed in range(3):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(80, 5))
        y = x[:, 0] * 2 + np.sin(x[:, 1]) + 0.1 * rng.normal(size=80)
        model = gbt_fit(x, y, GbtConfig(n_trees=100))
        mse = np.array(model.train_mse)
        assert len(mse) == 100
        assert np.all(np.diff(mse) <= 1e-12)


def test_gbt_overfits_small_data():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(30, 3))
    y = rng.normal(size=30)
    model = gbt_fit(x, y, GbtConfig(n_trees=100, max_depth=4, learning_rate=0.3))
    assert model.train_mse[-1] < 0.05 * y.var()


def test_gbt_constant_target():
    x = np.random.default_rng(0).normal(size=(10, 2))
    model = gbt_fit(x, np.full(10, 7.0))
    assert model.init_value == pytest.approx(7.0)
    assert np.allclose(gbt_predict(model, x), 7.0)


def test_gbt_predict_matches_training_trajectory():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(40, 4))
    y = rng.normal(size=40)
    model = gbt_fit(x, y, GbtConfig(n_trees=20))
    pred = gbt_predict(model, x)
    assert np.mean((y - pred) ** 2) == pytest.approx(model.train_mse[-1], rel=1e-9)


def test_gbt_needs_two_rows():
    with pytest.raises(SchemaError):
        gbt_fit(np.zeros((1, 2)), np.zeros(1))


def test_gbt_predict_single_row():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(20, 3))
    y = rng.normal(size=20)
    model = gbt_fit(x, y, GbtConfig(n_trees=5))
    one = gbt_predict(model, x[0])
    assert one.shape == (1,)
    assert one[0] == pytest.approx(gbt_predict(model, x)[0])


@given(st.integers(min_value=0, max_value=1000))
@settings(max_examples=20, deadline=None)
def test_gbt_monotone_mse_property(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(25, 3))
    y = rng.normal(size=25)
    model = gbt_fit(x, y, GbtConfig(n_trees=15))
    assert np.all(np.diff(model.train_mse) <= 1e-12)
