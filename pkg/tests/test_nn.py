import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecgmi.errors import DegenerateBatch, MissingCache, NonFiniteGradient, ShapeMismatch, UnsupportedLeadCount
from ecgmi.nn import (AdamState, adam_step, batchnorm_backward, batchnorm_forward, build_model,
                      commit_running_stats, conv1d_backward, conv1d_forward, dense_backward, dense_forward,
                      model_backward, model_forward, relu, smoothed_cross_entropy)
from helpers import central_difference, model_gradcheck, naive_conv1d, rel_error, scalar_adam


# ---------------------------------------------------------------- conv


def test_conv_identity_kernel_picks_every_second_sample():
    x = np.array([[[1.0, 2.0, 3.0, 4.0]]])
    w = np.array([[[0.0, 1.0, 0.0]]])
    y, _ = conv1d_forward(x, w, np.zeros(1))
    # centre tap sits on input 2j
    np.testing.assert_array_equal(y, [[[1.0, 3.0]]])


def test_conv_zero_weights_gives_bias(rng):
    x = rng.standard_normal((2, 3, 9))
    y, _ = conv1d_forward(x, np.zeros((4, 3, 3)), np.arange(4.0))
    assert y.shape == (2, 4, 5)
    np.testing.assert_array_equal(y, np.broadcast_to(np.arange(4.0)[None, :, None], y.shape))


@pytest.mark.parametrize("length", [1, 2, 7, 8, 33])
def test_conv_matches_naive_loops(rng, length):
    x = rng.standard_normal((2, 3, length))
    w = rng.standard_normal((4, 3, 3))
    b = rng.standard_normal(4)
    y, _ = conv1d_forward(x, w, b)
    np.testing.assert_allclose(y, naive_conv1d(x, w, b), atol=1e-6)


def test_conv_shape_mismatch(rng):
    with pytest.raises(ShapeMismatch):
        conv1d_forward(rng.standard_normal((1, 2, 8)), rng.standard_normal((4, 3, 3)), np.zeros(4))


@pytest.mark.parametrize("length", [8, 9])
def test_conv_backward_finite_differences(rng, length):
    x = rng.standard_normal((2, 3, length))
    w = rng.standard_normal((4, 3, 3))
    b = rng.standard_normal(4)
    up = rng.standard_normal((2, 4, -(-length // 2)))

    def f():
        return float((conv1d_forward(x, w, b)[0] * up).sum())

    _, cache = conv1d_forward(x, w, b)
    dx, dw, db = conv1d_backward(up, cache)
    for arr, g in ((x, dx), (w, dw), (b, db)):
        num = [central_difference(f, arr, i) for i in np.ndindex(arr.shape)]
        assert rel_error(g.ravel(), num) < 1e-9


def test_conv_bias_grad_is_channel_sum(rng):
    x = rng.standard_normal((3, 2, 10))
    _, cache = conv1d_forward(x, rng.standard_normal((5, 2, 3)), np.zeros(5))
    up = rng.standard_normal((3, 5, 5))
    _, _, db = conv1d_backward(up, cache)
    np.testing.assert_allclose(db, up.sum(axis=(0, 2)), rtol=1e-12)


# ---------------------------------------------------------------- relu


def test_relu_definition():
    y, mask = relu(np.array([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(y, [0, 0, 2])
    np.testing.assert_array_equal(mask, [0, 0, 1])


def test_relu_all_negative():
    y, mask = relu(-np.arange(1.0, 6.0))
    assert not y.any() and not mask.any()


def test_relu_gradient_vs_fd(rng):
    x = rng.standard_normal(200)
    x = x[np.abs(x) > 1e-2]
    _, mask = relu(x)
    num = [central_difference(lambda: float(relu(x)[0].sum()), x, (i,), h=1e-3) for i in range(len(x))]
    assert rel_error(mask, num) < 1e-5


# ---------------------------------------------------------------- batchnorm


def _bn_args(c, dtype=np.float64):
    return np.ones(c, dtype), np.zeros(c, dtype), np.zeros(c, dtype), np.ones(c, dtype)


def test_batchnorm_train_standardizes(rng):
    x = 3 + 2 * rng.standard_normal((4, 5, 50))
    y, _, _, _ = batchnorm_forward(x, *_bn_args(5), train=True)
    np.testing.assert_allclose(y.mean(axis=(0, 2)), 0, atol=1e-4)
    np.testing.assert_allclose(y.var(axis=(0, 2)), 1, atol=1e-4)


def test_batchnorm_eval_identity_stats(rng):
    x = rng.standard_normal((2, 3, 7))
    gamma, beta = rng.standard_normal(3), rng.standard_normal(3)
    y, cache, _, _ = batchnorm_forward(x, gamma, beta, np.zeros(3), np.ones(3), train=False)
    np.testing.assert_allclose(y, gamma[None, :, None] * x / np.sqrt(1 + 1e-5) + beta[None, :, None])
    assert cache is None
    with pytest.raises(MissingCache):
        batchnorm_backward(y, cache)


def test_batchnorm_running_update(rng):
    x = rng.standard_normal((2, 3, 7))
    rm, rv = np.full(3, 0.5), np.full(3, 2.0)
    _, _, nm, nv = batchnorm_forward(x, np.ones(3), np.zeros(3), rm, rv, train=True, momentum=0.1)
    np.testing.assert_allclose(nm, 0.9 * 0.5 + 0.1 * x.mean(axis=(0, 2)))
    np.testing.assert_allclose(nv, 0.9 * 2.0 + 0.1 * x.var(axis=(0, 2)))
    np.testing.assert_array_equal(rm, 0.5)  # not mutated


def test_batchnorm_degenerate():
    with pytest.raises(DegenerateBatch):
        batchnorm_forward(np.ones((1, 2, 1)), *_bn_args(2), train=True)


def test_batchnorm_backward_fd(rng):
    x = rng.standard_normal((2, 3, 5))
    gamma = rng.uniform(0.5, 1.5, 3)
    beta = rng.standard_normal(3)
    up = rng.standard_normal((2, 3, 5))

    def f():
        return float((batchnorm_forward(x, gamma, beta, np.zeros(3), np.ones(3), True)[0] * up).sum())

    y, cache, _, _ = batchnorm_forward(x, gamma, beta, np.zeros(3), np.ones(3), True)
    dx, dgamma, dbeta = batchnorm_backward(up, cache)
    for arr, g in ((x, dx), (gamma, dgamma), (beta, dbeta)):
        num = [central_difference(f, arr, i) for i in np.ndindex(arr.shape)]
        assert rel_error(g.ravel(), num) < 1e-4


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.2, 3.0), st.floats(-2, 2))
def test_batchnorm_output_moments_property(seed, gamma, beta):
    r = np.random.default_rng(seed)
    x = r.standard_normal((3, 4, 40)) * r.uniform(0.5, 5) + r.uniform(-3, 3)
    y, *_ = batchnorm_forward(x, np.full(4, gamma), np.full(4, beta), np.zeros(4), np.ones(4), True)
    np.testing.assert_allclose(y.mean(axis=(0, 2)), beta, atol=1e-4)
    np.testing.assert_allclose(y.var(axis=(0, 2)), gamma ** 2, atol=1e-3)


# ---------------------------------------------------------------- dense


def test_dense_zero():
    y, _ = dense_forward(np.ones((3, 4)), np.zeros((4, 2)), np.zeros(2))
    assert not y.any()


def test_dense_one_hot_selects_row(rng):
    w, b = rng.standard_normal((4, 2)), rng.standard_normal(2)
    y, _ = dense_forward(np.eye(4)[[2]], w, b)
    np.testing.assert_allclose(y[0], w[2] + b)


def test_dense_matches_naive(rng):
    x, w, b = rng.standard_normal((3, 5)), rng.standard_normal((5, 2)), rng.standard_normal(2)
    naive = [[b[j] + sum(x[i, k] * w[k, j] for k in range(5)) for j in range(2)] for i in range(3)]
    np.testing.assert_allclose(dense_forward(x, w, b)[0], naive, atol=1e-6)
    with pytest.raises(ShapeMismatch):
        dense_forward(x, w[:4], b)


def test_dense_backward_fd(rng):
    x, w, b = rng.standard_normal((3, 5)), rng.standard_normal((5, 2)), rng.standard_normal(2)
    up = rng.standard_normal((3, 2))
    dx, dw, db = dense_backward(up, (x, w))
    f = lambda: float((dense_forward(x, w, b)[0] * up).sum())  # noqa: E731
    for arr, g in ((x, dx), (w, dw), (b, db)):
        assert rel_error(g.ravel(), [central_difference(f, arr, i) for i in np.ndindex(arr.shape)]) < 1e-9


# ---------------------------------------------------------------- loss


@pytest.mark.parametrize("eps", [0.0, 0.1, 0.3])
@pytest.mark.parametrize("label", [0, 1])
def test_loss_uniform_logits(eps, label):
    loss, _ = smoothed_cross_entropy(np.zeros((1, 2)), [label], eps)
    assert loss == pytest.approx(math.log(2), abs=1e-12)


def test_loss_confident_logits():
    loss, _ = smoothed_cross_entropy(np.array([[10.0, -10.0]]), [0], 0.0)
    # -log sigmoid(20) = log1p(exp(-20))
    assert loss == pytest.approx(2.0611536181902037e-09, rel=1e-9)


def test_loss_stable_for_huge_logits():
    loss, grad = smoothed_cross_entropy(np.array([[1e4, -1e4]]), [1], 0.1)
    assert np.isfinite(loss) and np.all(np.isfinite(grad))


def test_loss_gradient_fd(rng):
    logits = rng.standard_normal((4, 2)) * 3
    labels = np.array([0, 1, 1, 0])
    _, grad = smoothed_cross_entropy(logits, labels, 0.1)
    num = [central_difference(lambda: smoothed_cross_entropy(logits, labels, 0.1)[0], logits, i, h=1e-5)
           for i in np.ndindex(logits.shape)]
    assert rel_error(grad.ravel(), num) < 1e-6


@settings(max_examples=50, deadline=None)
@given(st.floats(-20, 20), st.floats(-20, 20), st.integers(0, 1), st.floats(0, 0.49))
def test_loss_lower_bound_is_target_entropy(a, b, label, eps):
    loss, _ = smoothed_cross_entropy(np.array([[a, b]]), [label], eps)
    ent = -sum(p * math.log(p) for p in (eps, 1 - eps) if p > 0)
    assert loss >= ent - 1e-12


def test_loss_hits_bound_at_target():
    eps = 0.1
    logits = np.array([[math.log(1 - eps), math.log(eps)]])
    loss, grad = smoothed_cross_entropy(logits, [0], eps)
    assert loss == pytest.approx(-(0.9 * math.log(0.9) + 0.1 * math.log(0.1)), abs=1e-12)
    np.testing.assert_allclose(grad, 0, atol=1e-15)


def test_loss_rejects_bad_eps():
    with pytest.raises(ValueError):
        smoothed_cross_entropy(np.zeros((1, 2)), [0], 0.5)


# ---------------------------------------------------------------- adam


def test_adam_first_step_hand_value():
    params, state = {"t": np.array([1.0])}, AdamState.zeros_like({"t": np.array([1.0])})
    new, state = adam_step(params, {"t": np.array([0.5])}, state)
    assert new["t"][0] == pytest.approx(1.0 - 1e-4 * 0.5 / (0.5 + 1e-8), abs=1e-15)
    assert new["t"][0] == pytest.approx(0.9999, abs=1e-11)
    assert state.step_count == 1
    assert params["t"][0] == 1.0


def test_adam_zero_gradient_is_fixed_point(rng):
    p = {"a": rng.standard_normal((3, 2))}
    state = AdamState.zeros_like(p)
    cur = p
    for _ in range(5):
        cur, state = adam_step(cur, {"a": np.zeros((3, 2))}, state)
    np.testing.assert_array_equal(cur["a"], p["a"])
    assert state.step_count == 5


def test_adam_matches_scalar_reference():
    p = {"t": np.array([0.3])}
    state = AdamState.zeros_like(p)
    for g in (0.7, 0.7):
        p, state = adam_step(p, {"t": np.array([g])}, state)
    assert abs(p["t"][0] - scalar_adam(0.3, [0.7, 0.7])) < 1e-12
    assert np.all(state.second_moment["t"] >= 0)


def test_adam_non_finite():
    p = {"t": np.array([0.3])}
    with pytest.raises(NonFiniteGradient):
        adam_step(p, {"t": np.array([np.nan])}, AdamState.zeros_like(p))


# ---------------------------------------------------------------- model


def test_build_model_shapes(rng):
    for leads in (1, 2, 3):
        p = build_model(leads, rng)
        assert p.conv_layers[0].weights.shape == (32, leads, 3)
        assert all(layer.weights.shape == (32, 32, 3) for layer in p.conv_layers[1:])
        assert len(p.conv_layers) == 8
        assert p.dense_weights.shape == (1280, 2)
        for k, v in {**p.learnables(), **p.buffers()}.items():
            assert v.shape == p.expected_shapes()[k]
    with pytest.raises(UnsupportedLeadCount):
        build_model(4, rng)


def test_build_model_init_statistics(rng):
    p = build_model(2, rng)
    w = p.conv_layers[1].weights
    bound = np.sqrt(2 / 96)
    assert np.abs(w).max() <= bound
    assert abs(w.mean()) < 0.02
    layer = p.conv_layers[3]
    assert not layer.bias.any() and not layer.bn_beta.any() and not layer.bn_running_mean.any()
    assert (layer.bn_gamma == 1).all() and (layer.bn_running_var == 1).all()


def test_build_model_deterministic():
    a = build_model(2, np.random.default_rng(5))
    b = build_model(2, np.random.default_rng(5))
    for k, v in a.learnables().items():
        assert v.tobytes() == b.learnables()[k].tobytes()


def test_shape_chain():
    arch = build_model(2, np.random.default_rng(0)).arch
    assert arch.lengths() == [10000, 5000, 2500, 1250, 625, 313, 157, 79, 40]
    assert arch.flatten_dim == 1280


def test_model_forward_batch_of_ten(rng):
    p = build_model(2, rng)
    logits, cache = model_forward(rng.standard_normal((10, 2, 10000)).astype(np.float32), p, "train")
    assert logits.shape == (10, 2) and logits.dtype == np.float32
    assert [c[0][0].shape[0] // 10 for c in cache.layer_caches] == [5000, 2500, 1250, 625, 313, 157, 79, 40]


def test_model_zero_window_is_finite(rng):
    p = build_model(2, rng)
    for mode in ("eval",):
        logits, _ = model_forward(np.zeros((1, 2, 10000), np.float32), p, mode)
        assert np.all(np.isfinite(logits))


def test_model_rejects_wrong_shape(rng):
    p = build_model(2, rng)
    with pytest.raises(ShapeMismatch):
        model_forward(np.zeros((1, 3, 10000), np.float32), p)
    with pytest.raises(ShapeMismatch):
        model_forward(np.zeros((1, 2, 9999), np.float32), p)


def test_eval_mode_is_pure(rng):
    p = build_model(2, rng)
    before = {k: v.copy() for k, v in p.buffers().items()}
    x = rng.standard_normal((3, 2, 10000)).astype(np.float32)
    a, _ = model_forward(x, p, "eval")
    b, _ = model_forward(x, p, "eval")
    assert a.tobytes() == b.tobytes()
    for k, v in p.buffers().items():
        assert v.tobytes() == before[k].tobytes()


def test_train_mode_running_stats_committed_explicitly(rng):
    p = build_model(1, rng)
    x = rng.standard_normal((2, 1, 10000)).astype(np.float32)
    _, cache = model_forward(x, p, "train")
    assert (p.conv_layers[0].bn_running_var == 1).all()
    commit_running_stats(p, cache)
    assert not (p.conv_layers[0].bn_running_var == 1).all()


def test_backward_needs_train_cache(rng):
    p = build_model(1, rng)
    _, cache = model_forward(np.zeros((2, 1, 10000), np.float32), p, "eval")
    with pytest.raises(MissingCache):
        model_backward(cache, np.zeros((2, 2), np.float32))
    with pytest.raises(MissingCache):
        model_backward(None, np.zeros((2, 2), np.float32))


def test_backward_linearity(rng):
    p = build_model(2, rng, dtype=np.float64)
    x = rng.standard_normal((2, 2, 10000))
    _, cache = model_forward(x, p, "train")
    up = rng.standard_normal((2, 2))
    g1 = model_backward(cache, up)
    g2 = model_backward(cache, 2 * up)
    g0 = model_backward(cache, np.zeros((2, 2)))
    for k in g1:
        np.testing.assert_allclose(g2[k], 2 * g1[k], rtol=1e-12, atol=1e-300)
        assert not g0[k].any()
    assert set(g1) == set(p.learnables())


def test_last_conv_bias_grad_is_channel_sum_of_upstream(rng):
    from ecgmi.nn import activation_backward, dense_backward as db_, batchnorm_backward as bnb
    p = build_model(2, rng, dtype=np.float64)
    x = rng.standard_normal((2, 2, 10000))
    logits, cache = model_forward(x, p, "train")
    _, up = smoothed_cross_entropy(logits, [0, 1], 0.1)
    grads = model_backward(cache, up)
    dh, _, _ = db_(up, cache.dense_cache)
    conv_c, act_c, bn_c = cache.layer_caches[-1]
    dh, _, _ = bnb(dh.reshape(cache.flat_shape), bn_c)
    dpre = activation_backward(dh, act_c)  # [batch x length x channel]
    np.testing.assert_allclose(grads["conv7.bias"], dpre.sum(axis=(0, 1)), rtol=1e-10)


def test_toy_model_gradcheck_double(rng):
    # short input, two conv layers: few enough units that gates rarely sit near zero
    p = build_model(2, rng, dtype=np.float64, num_layers=2, input_len=64)
    x = rng.standard_normal((2, 2, 64))
    errs = model_gradcheck(p, x, np.array([0, 1]), 0.1, 50, rng)
    assert max(errs.values()) < 1e-5, errs


def test_toy_model_gradcheck_single(rng):
    p = build_model(2, rng, dtype=np.float32, num_layers=2, input_len=64)
    x = rng.standard_normal((2, 2, 64)).astype(np.float32)
    errs = model_gradcheck(p, x, np.array([0, 1]), 0.1, 50, rng)
    assert max(errs.values()) < 1e-3, errs


def test_full_model_gradcheck_single(rng):
    p = build_model(2, rng, dtype=np.float32)
    x = rng.standard_normal((2, 2, 10000)).astype(np.float32)
    errs = model_gradcheck(p, x, np.array([0, 1]), 0.1, 50, rng,
                           tensors=["conv0.weights", "conv3.bn_gamma", "conv7.weights", "dense.weights"])
    assert max(errs.values()) < 1e-3, errs
