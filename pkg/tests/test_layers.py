import numpy as np
import numpy.testing as npt
import pytest

from markupocr import tensor as T
from markupocr.layers import (
    BatchNorm, Conv2dSpec, ConvLayer, Embedding, LSTMCell, Linear,
    conv2d, conv_out_dims, linear, lstm_step, maxpool,
)
from markupocr.tensor import ShapeError, Tape, Tensor, backward, finite_diff_check


# ---------------------------------------------------------------------------
# conv2d


def test_identity_kernel_is_identity():
    x = Tensor(np.arange(9.0).reshape(1, 3, 3))
    w = Tensor(np.ones((1, 1, 1, 1)))
    y = conv2d(x, w)
    npt.assert_array_equal(y.data, x.data)


def test_ones_kernel_counts_neighbourhood():
    x = Tensor(np.ones((1, 4, 4)))
    w = Tensor(np.ones((1, 1, 3, 3)))
    y = conv2d(x, w, padding=(1, 1))
    assert y.data.shape == (1, 4, 4)
    assert y.data[0, 1, 1] == 9.0
    assert y.data[0, 0, 0] == 4.0  # corner sees a 2x2 patch


def test_conv_is_cross_correlation():
    # an asymmetric kernel distinguishes correlation from convolution
    x = Tensor(np.array([[[0.0, 1.0, 0.0]]]))  # 1x1x3
    w = Tensor(np.array([1.0, 2.0, 3.0]).reshape(1, 1, 1, 3))
    y = conv2d(x, w, padding=(0, 1))
    # at the centre the kernel aligns unflipped: 1*0 + 2*1 + 3*0
    npt.assert_allclose(y.data[0, 0], [3.0, 2.0, 1.0])


def test_conv_degenerate_output_errors():
    x = Tensor(np.ones((1, 2, 2)))
    w = Tensor(np.ones((1, 1, 3, 3)))
    with pytest.raises(ShapeError):
        conv2d(x, w)


def test_conv_channel_mismatch_errors():
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


def test_conv_out_dims_formula():
    assert conv_out_dims(32, 128, (3, 3), (1, 1), (1, 1)) == (32, 128)
    assert conv_out_dims(8, 8, (2, 2), (2, 2), (0, 0)) == (4, 4)
    assert conv_out_dims(7, 7, (3, 3), (2, 2), (0, 0)) == (3, 3)


@pytest.mark.parametrize("seed", range(5))
def test_conv_gradients(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(2, 3, 5, 6)))
    w = Tensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=4), requires_grad=True)
    r = rng.normal(size=(2, 4, 3, 3))  # random probe keeps the loss generic

    def loss_w(t):
        return T.tsum(T.mul(conv2d(x, t, b, stride=(2, 2), padding=(1, 1)), r))

    assert finite_diff_check(loss_w, w) < 1e-4

    xt = Tensor(rng.normal(size=(2, 3, 5, 6)), requires_grad=True)

    def loss_x(t):
        return T.tsum(T.mul(conv2d(t, w, b, stride=(2, 2), padding=(1, 1)), r))

    assert finite_diff_check(loss_x, xt) < 1e-4

    def loss_b(t):
        return T.tsum(T.mul(conv2d(x, w, t, stride=(2, 2), padding=(1, 1)), r))

    assert finite_diff_check(loss_b, b) < 1e-4


# ---------------------------------------------------------------------------
# maxpool


def test_maxpool_basic():
    y = maxpool(Tensor([[[1.0, 2.0], [3.0, 4.0]]]), (2, 2))
    npt.assert_array_equal(y.data, [[[4.0]]])


def test_maxpool_4x16_to_1x4():
    x = Tensor(np.arange(64.0).reshape(1, 4, 16))
    y = maxpool(x, (4, 4), (4, 4))
    assert y.data.shape == (1, 1, 4)


def test_maxpool_tie_goes_to_first_cell():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    with Tape():
        y = maxpool(x, (2, 2))
        backward(T.tsum(y))
    expected = np.zeros((1, 1, 2, 2))
    expected[0, 0, 0, 0] = 1.0
    npt.assert_array_equal(x.grad, expected)


def test_maxpool_window_too_large_errors():
    with pytest.raises(ShapeError):
        maxpool(Tensor(np.ones((1, 2, 2))), (3, 3))


@pytest.mark.parametrize("seed", range(5))
def test_maxpool_gradients(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(2, 2, 6, 8)), requires_grad=True)
    r = rng.normal(size=(2, 2, 3, 4))

    def loss(t):
        return T.tsum(T.mul(maxpool(t, (2, 2)), r))

    assert finite_diff_check(loss, x) < 1e-4


# ---------------------------------------------------------------------------
# batch norm


def test_batchnorm_zero_variance_channel_outputs_beta():
    bn = BatchNorm(1)
    bn.beta.data[:] = 0.7
    x = Tensor(np.full((4, 1, 2, 2), 3.0))
    y = bn(x, "train")
    npt.assert_allclose(y.data, 0.7, atol=1e-9)


def test_batchnorm_identity_on_standardized_input():
    rng = np.random.default_rng(0)
    raw = rng.normal(size=(8, 3, 4, 4))
    raw = (raw - raw.mean(axis=(0, 2, 3), keepdims=True)) \
        / raw.std(axis=(0, 2, 3), keepdims=True)
    bn = BatchNorm(3)
    y = bn(Tensor(raw), "train")
    npt.assert_allclose(y.data, raw, atol=1e-4)  # eps shifts the scale by ~5e-6


def test_batchnorm_train_standardizes():
    rng = np.random.default_rng(1)
    bn = BatchNorm(4)
    y = bn(Tensor(rng.normal(2.0, 3.0, size=(2, 4, 5, 5))), "train")
    npt.assert_allclose(y.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-6)
    npt.assert_allclose(y.data.var(axis=(0, 2, 3)), 1.0, atol=1e-4)


def test_batchnorm_eval_before_train_errors():
    bn = BatchNorm(2)
    with pytest.raises(RuntimeError):
        bn(Tensor(np.ones((1, 2, 2, 2))), "eval")


def test_batchnorm_running_stats_converge():
    rng = np.random.default_rng(2)
    bn = BatchNorm(1)
    for _ in range(300):
        bn(Tensor(rng.normal(5.0, 2.0, size=(16, 1, 4, 4))), "train")
    assert abs(bn.running_mean[0] - 5.0) < 0.3
    assert abs(bn.running_var[0] - 4.0) < 0.6


@pytest.mark.parametrize("seed", range(5))
def test_batchnorm_gradients(seed):
    rng = np.random.default_rng(seed)
    bn = BatchNorm(3)
    bn.gamma.data[:] = rng.normal(1.0, 0.2, size=3)
    bn.beta.data[:] = rng.normal(size=3)
    x = Tensor(rng.normal(size=(4, 3, 2, 3)), requires_grad=True)
    r = rng.normal(size=(4, 3, 2, 3))

    def loss_x(t):
        return T.tsum(T.mul(bn(t, "train"), r))

    assert finite_diff_check(loss_x, x) < 1e-4

    def loss_gamma(t):
        return T.tsum(T.mul(bn(x, "train"), r))

    assert finite_diff_check(loss_gamma, bn.gamma) < 1e-4

    # eval mode: running stats are frozen constants by now
    def loss_eval(t):
        return T.tsum(T.mul(bn(t, "eval"), r))

    assert finite_diff_check(loss_eval, x) < 1e-4


# ---------------------------------------------------------------------------
# linear / embedding


def test_linear_identity():
    x = Tensor(np.arange(6.0).reshape(2, 3))
    y = linear(x, Tensor(np.eye(3)), Tensor(np.zeros(3)))
    npt.assert_array_equal(y.data, x.data)


def test_linear_gradients_tight():
    rng = np.random.default_rng(0)
    w = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    x = Tensor(rng.normal(size=(4, 3)))
    b = Tensor(rng.normal(size=5))
    r = rng.normal(size=(4, 5))

    def loss(t):
        return T.tsum(T.mul(linear(x, t, b), r))

    assert finite_diff_check(loss, w) < 1e-8


def test_embedding_identity_table():
    rng = np.random.default_rng(0)
    emb = Embedding(4, 4, rng)
    emb.table.data[:] = np.eye(4)
    y = emb([2, 0])
    npt.assert_array_equal(y.data, [[0, 0, 1, 0], [1, 0, 0, 0]])


def test_embedding_out_of_range():
    emb = Embedding(4, 3, np.random.default_rng(0))
    with pytest.raises(IndexError):
        emb([4])


def test_embedding_duplicate_ids_accumulate_grads():
    emb = Embedding(3, 2, np.random.default_rng(0))
    with Tape():
        y = emb([1, 1, 2])
        backward(T.tsum(y))
    npt.assert_array_equal(emb.table.grad,
                           [[0.0, 0.0], [2.0, 2.0], [1.0, 1.0]])


# ---------------------------------------------------------------------------
# lstm


def test_lstm_all_zero_is_zero():
    cell = LSTMCell(3, 4, np.random.default_rng(0))
    cell.wx.data[:] = 0.0
    cell.wh.data[:] = 0.0
    cell.b.data[:] = 0.0
    h, c = cell.step(Tensor(np.zeros((2, 3))),
                     Tensor(np.zeros((2, 4))), Tensor(np.zeros((2, 4))))
    npt.assert_array_equal(h.data, 0.0)
    npt.assert_array_equal(c.data, 0.0)


def test_lstm_gate_saturation_keeps_cell():
    cell = LSTMCell(3, 4, np.random.default_rng(0))
    cell.b.data[:] = 0.0
    cell.b.data[4:8] = 50.0    # forget gate pinned open
    cell.b.data[0:4] = -50.0   # input gate pinned shut
    c_prev = Tensor(np.array([[0.3, -0.2, 0.8, 0.0]]))
    _, c = cell.step(Tensor(np.zeros((1, 3))), Tensor(np.zeros((1, 4))), c_prev)
    npt.assert_allclose(c.data, c_prev.data, atol=1e-12)


def test_lstm_dim_mismatch_errors():
    cell = LSTMCell(3, 4, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        cell.step(Tensor(np.zeros((1, 5))),
                  Tensor(np.zeros((1, 4))), Tensor(np.zeros((1, 4))))
    with pytest.raises(ShapeError):
        cell.step(Tensor(np.zeros((1, 3))),
                  Tensor(np.zeros((1, 5))), Tensor(np.zeros((1, 5))))


def test_lstm_step_wrapper_argument_order():
    cell = LSTMCell(2, 2, np.random.default_rng(3))
    x = Tensor(np.ones((1, 2)))
    h0 = Tensor(np.zeros((1, 2)))
    c0 = Tensor(np.zeros((1, 2)))
    h1, c1 = lstm_step(cell, h0, c0, x)
    h2, c2 = cell.step(x, h0, c0)
    npt.assert_array_equal(h1.data, h2.data)
    npt.assert_array_equal(c1.data, c2.data)


@pytest.mark.parametrize("seed", range(5))
def test_lstm_gradients_all_weights(seed):
    rng = np.random.default_rng(seed)
    cell = LSTMCell(4, 4, rng)
    x = Tensor(rng.normal(size=(3, 4)))
    h0 = Tensor(rng.normal(size=(3, 4)))
    c0 = Tensor(rng.normal(size=(3, 4)))
    rh = rng.normal(size=(3, 4))
    rc = rng.normal(size=(3, 4))

    def loss(t):
        h, c = cell.step(x, h0, c0)
        return T.add(T.tsum(T.mul(h, rh)), T.tsum(T.mul(c, rc)))

    for theta in (cell.wx, cell.wh, cell.b):
        assert finite_diff_check(loss, theta) < 1e-4


# ---------------------------------------------------------------------------
# the composed conv layer


def test_conv_layer_bn_relu_composition():
    rng = np.random.default_rng(0)
    layer = ConvLayer(2, Conv2dSpec(3, (3, 3), (1, 1), (1, 1), batchnorm=True), rng)
    y = layer(Tensor(rng.normal(size=(4, 2, 6, 6))), mode="train")
    assert y.data.shape == (4, 3, 6, 6)
    assert (y.data >= 0.0).all()
    assert layer.bias is None
    assert set(layer.params()) == {"weight", "bn.gamma", "bn.beta"}


def test_conv_layer_without_bn_has_bias():
    rng = np.random.default_rng(0)
    layer = ConvLayer(1, Conv2dSpec(2, (3, 3), (1, 1), (1, 1)), rng)
    assert set(layer.params()) == {"weight", "bias"}
