import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from digitlab import kernels
from digitlab.errors import ContractError, DimensionError
from digitlab.layers import (
    BatchNorm2d,
    Conv2d,
    Dense,
    Dropout,
    batchnorm2d,
    binary_cross_entropy,
    categorical_cross_entropy,
    conv2d,
    conv2d_naive_oracle,
    conv_output_size,
    dropout,
    leaky_relu,
    maxpool2d,
    pool_output_size,
    sigmoid,
    sigmoid_binary_cross_entropy,
    softmax,
    softmax_cross_entropy,
    upsample2x,
)
from digitlab.tensor import Rng, Tensor


def test_conv_hand_example():
    # 3x3 ramp, 2x2 ones kernel, valid: each output sums a 2x2 window
    x = Tensor(np.arange(9.0).reshape(1, 1, 3, 3))
    w = Tensor(np.ones((1, 1, 2, 2)))
    out = conv2d(x, w, None, 1, "valid").data
    np.testing.assert_allclose(out[0, 0], [[8, 12], [20, 24]])


def test_conv_same_padding_puts_extra_pixel_bottom_right():
    # even kernel: total pad 1 goes entirely after the input
    x = Tensor(np.arange(9.0).reshape(1, 1, 3, 3))
    w = Tensor(np.ones((1, 1, 2, 2)))
    out = conv2d(x, w, None, 1, "same").data[0, 0]
    np.testing.assert_allclose(out, [[8, 12, 7], [20, 24, 13], [13, 15, 8]])


@pytest.mark.parametrize("size,k,s,pad,expect", [
    (32, 5, 1, "same", 32), (1, 5, 1, "same", 1), (7, 3, 2, "same", 4),
    (7, 3, 2, "valid", 3), (5, 5, 1, "valid", 1),
])
def test_conv_output_size(size, k, s, pad, expect):
    assert conv_output_size(size, k, s, pad) == expect


def test_valid_conv_rejects_small_input():
    with pytest.raises(DimensionError):
        conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))), padding="valid")


def test_conv_channel_mismatch():
    with pytest.raises(DimensionError):
        conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(1, 5),
       st.integers(1, 3), st.sampled_from(["same", "valid"]), st.integers(0, 2 ** 20))
def test_conv_matches_oracle_property(n, c, o, k, s, pad, seed):
    rng = np.random.default_rng(seed)
    h, w = rng.integers(k, 9, 2)
    x = rng.normal(size=(n, c, h, w))
    wt = rng.normal(size=(o, c, k, k))
    b = rng.normal(size=o)
    got = conv2d(Tensor(x), Tensor(wt), Tensor(b), s, pad).data
    np.testing.assert_allclose(got, conv2d_naive_oracle(x, wt, b, s, pad), atol=1e-10)


def test_tap_pruning_on_tiny_maps_is_exact():
    # 5x5 kernels on 1x1 and 2x2 maps only see the centre taps
    rng = np.random.default_rng(1)
    for side in (1, 2):
        x = rng.normal(size=(2, 3, side, side)).astype(np.float32)
        w = rng.normal(size=(4, 3, 5, 5)).astype(np.float32)
        np.testing.assert_allclose(conv2d(Tensor(x), Tensor(w)).data,
                                   conv2d_naive_oracle(x, w), atol=1e-5)


def test_maxpool_ceil_mode_partial_windows():
    x = Tensor(np.arange(9.0).reshape(1, 1, 3, 3))
    out = maxpool2d(x, 2, 2).data[0, 0]
    np.testing.assert_allclose(out, [[4, 5], [7, 8]])
    assert maxpool2d(Tensor(np.ones((1, 1, 1, 1))), 2, 2).shape == (1, 1, 1, 1)


def test_maxpool_tie_routes_gradient_to_first_element():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    maxpool2d(x, 2, 2).sum().backward()
    np.testing.assert_allclose(x.grad[0, 0], [[1, 0], [0, 0]])


@pytest.mark.parametrize("size,expect", [(32, 16), (3, 2), (1, 1), (2, 1)])
def test_pool_output_size(size, expect):
    assert pool_output_size(size, 2, 2, True) == expect


def test_upsample_nearest():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]), requires_grad=True)
    y = upsample2x(x)
    np.testing.assert_allclose(y.data[0, 0], [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])
    y.sum().backward()
    np.testing.assert_allclose(x.grad, np.full((1, 1, 2, 2), 4.0))


def test_batchnorm_train_normalizes_and_updates_running_stats():
    rng = np.random.default_rng(0)
    x = rng.normal(3.0, 2.0, size=(8, 2, 4, 4))
    rm, rv = np.zeros(2), np.ones(2)
    y = batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=True).data
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-10)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-4)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)))


def test_batchnorm_eval_uses_running_stats_and_freeze_flag():
    rm, rv = np.array([1.0]), np.array([4.0])
    x = Tensor(np.full((2, 1, 1, 1), 3.0))
    y = batchnorm2d(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), rm, rv, training=False).data
    np.testing.assert_allclose(y, (3 - 1) / math.sqrt(4 + 1e-5))
    batchnorm2d(Tensor(np.random.default_rng(0).normal(size=(4, 1, 2, 2))), Tensor(np.ones(1)),
                Tensor(np.zeros(1)), rm, rv, training=True, update_stats=False)
    np.testing.assert_array_equal(rm, [1.0])
    np.testing.assert_array_equal(rv, [4.0])


def test_dense_values():
    x = Tensor(np.array([[1.0, 2.0]]))
    w = Tensor(np.array([[1.0, 0.0, -1.0], [2.0, 1.0, 0.5]]))
    b = Tensor(np.array([0.5, 0.0, 0.0]))
    layer = Dense(2, 3, Rng(0))
    layer.params["weight"], layer.params["bias"] = w, b
    np.testing.assert_allclose(layer.forward(x).data, [[5.5, 2.0, 0.0]])


def test_dropout_inverted_scaling_and_eval_identity():
    x = Tensor(np.ones((200, 200), dtype=np.float32))
    y = dropout(x, 0.5, True, Rng(0)).data
    assert set(np.unique(y)) <= {0.0, 2.0}
    assert abs(y.mean() - 1.0) < 0.02
    assert dropout(x, 0.5, False) is x
    with pytest.raises(ContractError):
        dropout(x, 1.0, True, Rng(0))
    with pytest.raises(ContractError):
        Dropout(0.5).forward(x, training=True)


def test_leaky_relu_and_sigmoid_values():
    np.testing.assert_allclose(leaky_relu(Tensor(np.array([-1.0, 2.0]))).data, [-0.2, 2.0])
    np.testing.assert_allclose(sigmoid(Tensor(np.array([0.0, 100.0, -100.0]))).data, [0.5, 1.0, 0.0], atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(2, 12), st.floats(-50, 50), st.integers(0, 2 ** 20))
def test_softmax_rows_sum_to_one(n, k, shift, seed):
    z = np.random.default_rng(seed).normal(size=(n, k)) * 10 + shift
    p = softmax(Tensor(z)).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1, atol=1e-12)


def test_uniform_prediction_losses_are_closed_form():
    p = Tensor(np.full((4, 10), 0.1))
    t = np.eye(10)[[0, 3, 5, 9]]
    assert abs(categorical_cross_entropy(p, t).item() - math.log(10)) < 1e-6
    v = Tensor(np.full((4, 1), 0.5))
    assert abs(binary_cross_entropy(v, np.array([[1.0], [0.0], [1.0], [0.0]])).item() - math.log(2)) < 1e-6


def test_loss_contracts():
    with pytest.raises(ContractError):
        categorical_cross_entropy(Tensor(np.full((1, 2), 0.5)), np.array([[1.0, 1.0]]))
    with pytest.raises(ContractError):
        categorical_cross_entropy(Tensor(np.array([[0.9, 0.9]])), np.array([[1.0, 0.0]]))
    with pytest.raises(ContractError):
        binary_cross_entropy(Tensor(np.array([0.5])), np.array([0.5]))
    with pytest.raises(DimensionError):
        softmax_cross_entropy(Tensor(np.zeros((2, 3))), np.eye(4)[:2])


def test_clamp_bounds_loss():
    p = Tensor(np.array([[1.0, 0.0]]))
    assert abs(categorical_cross_entropy(p, np.array([[0.0, 1.0]])).item() + math.log(1e-7)) < 1e-6


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(2, 11), st.floats(0.1, 30), st.integers(0, 2 ** 20))
def test_fused_softmax_ce_equals_composition(n, k, scale, seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(n, k)) * scale
    t = np.eye(k)[rng.integers(0, k, n)]
    a = Tensor(z.copy(), requires_grad=True)
    b = Tensor(z.copy(), requires_grad=True)
    la, lb = softmax_cross_entropy(a, t), categorical_cross_entropy(softmax(b), t)
    la.backward()
    lb.backward()
    assert abs(la.item() - lb.item()) < 1e-9 * max(1, abs(lb.item()))
    np.testing.assert_allclose(a.grad, b.grad, atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.floats(0.1, 40), st.integers(0, 2 ** 20))
def test_fused_sigmoid_bce_equals_composition(n, scale, seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(n, 1)) * scale
    t = rng.integers(0, 2, (n, 1)).astype(float)
    a = Tensor(z.copy(), requires_grad=True)
    b = Tensor(z.copy(), requires_grad=True)
    la, lb = sigmoid_binary_cross_entropy(a, t), binary_cross_entropy(sigmoid(b), t)
    la.backward()
    lb.backward()
    assert abs(la.item() - lb.item()) < 1e-9 * max(1, abs(lb.item()))
    np.testing.assert_allclose(a.grad, b.grad, atol=1e-9)


def test_layer_shape_rules_and_init_scale():
    conv = Conv2d(3, 8, 5, Rng(0))
    assert conv.output_shape((2, 3, 7, 7)) == (2, 8, 7, 7)
    limit = math.sqrt(6 / (3 * 25))
    w = conv.params["weight"].data
    assert np.abs(w).max() <= limit and np.abs(w).max() > 0.9 * limit
    np.testing.assert_array_equal(conv.params["bias"].data, 0)
    bn = BatchNorm2d(4)
    with pytest.raises(DimensionError):
        bn.output_shape((2, 3, 4, 4))


# -- kernel backends -------------------------------------------------------

BACKENDS = kernels.available_backends()


def test_backend_selection(monkeypatch):
    # compiled kernels win when built, unless DIGITLAB_KERNELS=python forces the fallback
    import importlib
    assert "python" in BACKENDS
    monkeypatch.setenv("DIGITLAB_KERNELS", "python")
    assert importlib.reload(kernels).BACKEND == "python"
    monkeypatch.delenv("DIGITLAB_KERNELS")
    expect = "cython" if "cython" in BACKENDS else "python"
    assert importlib.reload(kernels).BACKEND == expect


@pytest.mark.skipif("cython" not in BACKENDS, reason="compiled kernels not built")
@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 4), st.integers(1, 3),
       st.sampled_from([np.float32, np.float64]), st.integers(0, 2 ** 20))
def test_backends_agree(n, c, k, s, dtype, seed):
    rng = np.random.default_rng(seed)
    h, w = rng.integers(k, 9, 2)
    xp = rng.normal(size=(n, c, h, w)).astype(dtype)
    oh, ow = (h - k) // s + 1, (w - k) // s + 1
    py, cy = BACKENDS["python"], BACKENDS["cython"]
    cols = py.im2col(xp, k, k, s, oh, ow)
    np.testing.assert_array_equal(cols, cy.im2col(xp, k, k, s, oh, ow))
    np.testing.assert_allclose(py.col2im(cols, xp.shape, k, k, s, oh, ow),
                               cy.col2im(cols, xp.shape, k, k, s, oh, ow), rtol=1e-6)
    ph, pw = -(-h // 2), -(-w // 2)
    out_p, arg_p = py.maxpool_forward(xp, 2, 2, ph, pw)
    out_c, arg_c = cy.maxpool_forward(xp, 2, 2, ph, pw)
    np.testing.assert_array_equal(out_p, out_c)
    np.testing.assert_array_equal(arg_p, arg_c)
    np.testing.assert_array_equal(py.maxpool_backward(out_p, arg_p, xp.shape),
                                  cy.maxpool_backward(out_c, arg_c, xp.shape))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 3), st.integers(0, 2 ** 20))
def test_col2im_is_adjoint_of_im2col(c, k, s, seed):
    # <im2col(x), y> == <x, col2im(y)> for every backend
    rng = np.random.default_rng(seed)
    h = int(rng.integers(k, 8))
    x = rng.normal(size=(2, c, h, h))
    o = (h - k) // s + 1
    for mod in BACKENDS.values():
        y = rng.normal(size=(c * k * k, 2 * o * o))
        lhs = np.sum(mod.im2col(x, k, k, s, o, o) * y)
        rhs = np.sum(x * mod.col2im(y, x.shape, k, k, s, o, o))
        assert abs(lhs - rhs) < 1e-9 * max(1, abs(lhs))
