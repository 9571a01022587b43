import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lipar.autodiff import (
    AdamState,
    BatchNormStats,
    GraphError,
    Tensor,
    adam_step,
    adaptive_avg_pool2d,
    backward,
    batch_norm2d,
    conv2d,
    conv_param_count,
    depthwise_conv2d,
    dropout,
    kernels,
    linear,
    lstm_forward,
    receptive_field,
    relu,
    softmax_cross_entropy,
)
from lipar.autodiff import functional as F


def T(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


# -- conv2d ------------------------------------------------------------------

def test_conv_sum_of_ones():
    out = conv2d(T(np.ones((1, 1, 3, 3))), T(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 9.0


def test_conv_identity_kernel_same_padding():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 1, 5, 6))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    out = conv2d(T(x), T(w), stride=1, pad=1)
    np.testing.assert_array_equal(out.data, x)


def test_conv_output_extent_formula():
    x = T(np.zeros((1, 2, 9, 9)))
    out = conv2d(x, T(np.zeros((4, 2, 3, 3))), stride=2, pad=1)
    assert out.shape == (1, 4, 5, 5)


def _loop_grouped(x, w, b, stride, pad, groups):
    """Oracle: run each group as an independent g=1 convolution and concatenate."""
    ci, co = x.shape[1], w.shape[0]
    cig, cog = ci // groups, co // groups
    parts = []
    for g in range(groups):
        xs = T(x[:, g * cig:(g + 1) * cig])
        ws = T(w[g * cog:(g + 1) * cog])
        bs = None if b is None else T(b[g * cog:(g + 1) * cog])
        parts.append(conv2d(xs, ws, bs, stride=stride, pad=pad, groups=1).data)
    return np.concatenate(parts, axis=1)


def test_grouped_conv_matches_loop_of_single_group_convs():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((2, 4, 5, 5))
    w = rng.standard_normal((4, 1, 3, 3))
    got = conv2d(T(x), T(w), groups=4, pad=1).data
    np.testing.assert_allclose(got, _loop_grouped(x, w, None, 1, 1, 4), atol=1e-12)


@pytest.mark.parametrize("msg,kwargs", [
    ("input channels", dict(x=(1, 3, 5, 5), w=(4, 1, 3, 3), groups=2)),
    ("output channels", dict(x=(1, 4, 5, 5), w=(3, 2, 3, 3), groups=2)),
    ("weight in-channels", dict(x=(1, 4, 5, 5), w=(4, 4, 3, 3), groups=2)),
    ("padded height", dict(x=(1, 1, 2, 5), w=(1, 1, 3, 3), groups=1)),
])
def test_conv_shape_errors_name_dimension(msg, kwargs):
    with pytest.raises(ValueError, match=msg):
        conv2d(T(np.zeros(kwargs["x"])), T(np.zeros(kwargs["w"])), groups=kwargs["groups"])


def test_depthwise_identity_and_param_count():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((3, 4, 6, 6))
    w = np.zeros((4, 1, 3, 3))
    w[:, 0, 1, 1] = 1.0
    np.testing.assert_array_equal(depthwise_conv2d(T(x), T(w), pad=1).data, x)
    assert conv_param_count(3, 4, 4, 4) == 36 == w.size


def test_depthwise_bit_identical_to_grouped_conv():
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((2, 6, 9, 9)).astype(np.float32))
    w = Tensor(rng.standard_normal((6, 1, 3, 3)).astype(np.float32))
    a = depthwise_conv2d(x, w, stride=2, pad=1).data
    b = conv2d(x, w, stride=2, pad=1, groups=6).data
    assert a.dtype == np.float32
    assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("name", kernels.available_backends())
def test_backends_agree_on_conv_forward_and_backward(name):
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 4, 7, 7))
    w_dw = rng.standard_normal((4, 1, 3, 3))
    w_full = rng.standard_normal((6, 4, 3, 3))
    results = {}
    for backend in ("python", name):
        with kernels.using_backend(backend):
            xt, a, b = T(x, True), T(w_dw, True), T(w_full, True)
            y = conv2d(conv2d(xt, a, stride=2, pad=1, groups=4), b, pad=1)
            backward(F.sum(F.mul(y, T(np.ones(y.shape)))))
            results[backend] = (y.data, xt.grad, a.grad, b.grad)
    for ref, got in zip(results["python"], results[name]):
        np.testing.assert_allclose(got, ref, rtol=1e-10, atol=1e-10)


# -- batch norm --------------------------------------------------------------

def test_batch_norm_train_standardizes():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((4, 3, 5, 5)) * 3 + 2
    out = batch_norm2d(T(x), T(np.ones(3)), T(np.zeros(3)), BatchNormStats(3, dtype=np.float64), True).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-10)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-5)


def test_batch_norm_zero_gamma_gives_beta():
    x = np.random.default_rng(6).standard_normal((2, 2, 3, 3))
    beta = np.array([0.25, -1.5])
    out = batch_norm2d(T(x), T(np.zeros(2)), T(beta), BatchNormStats(2, dtype=np.float64), True).data
    np.testing.assert_allclose(out, np.broadcast_to(beta[None, :, None, None], x.shape))


def test_batch_norm_eval_hand_formula():
    # 2x1x2x2 input, running mean 1.0, running var 4.0, eps 1e-5
    x = np.array([[[[1.0, 3.0], [5.0, -1.0]]], [[[0.0, 2.0], [1.0, 1.0]]]])
    stats = BatchNormStats(1, dtype=np.float64)
    stats.mean[:] = 1.0
    stats.var[:] = 4.0
    out = batch_norm2d(T(x), T([2.0]), T([0.5]), stats, False).data
    denom = math.sqrt(4.0 + 1e-5)
    expected = [[[[0.5, 2 * 2 / denom + 0.5], [2 * 4 / denom + 0.5, 2 * -2 / denom + 0.5]]],
                [[[2 * -1 / denom + 0.5, 2 * 1 / denom + 0.5], [0.5, 0.5]]]]
    np.testing.assert_allclose(out, expected, rtol=1e-12)


def test_batch_norm_running_stats_momentum():
    x = np.arange(8, dtype=np.float64).reshape(2, 1, 2, 2)
    stats = BatchNormStats(1, momentum=0.1, dtype=np.float64)
    batch_norm2d(T(x), T([1.0]), T([0.0]), stats, True)
    assert stats.mean[0] == pytest.approx(0.1 * 3.5)
    assert stats.var[0] == pytest.approx(0.9 + 0.1 * np.var(x, ddof=1))


def test_batch_norm_single_value_rejected():
    with pytest.raises(ValueError, match="single value"):
        batch_norm2d(T(np.ones((1, 2, 1, 1))), T(np.ones(2)), T(np.zeros(2)), BatchNormStats(2), True)


# -- small ops ---------------------------------------------------------------

def test_relu_values():
    np.testing.assert_array_equal(relu(T([-1.0, 2.0])).data, [0.0, 2.0])


def test_adaptive_pool_equal_blocks():
    x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
    out = adaptive_avg_pool2d(T(x), (2, 2)).data[0, 0]
    np.testing.assert_allclose(out, [[2.5, 4.5], [10.5, 12.5]])


def test_adaptive_pool_floor_boundaries():
    assert F.pool_bounds(9, 2) == [(0, 4), (4, 9)]
    assert F.pool_bounds(3, 2) == [(0, 1), (1, 3)]


def test_dropout_p_zero_identity_both_modes():
    x = T(np.arange(6.0))
    rng = np.random.default_rng(0)
    assert dropout(x, 0.0, True, rng) is x
    assert dropout(x, 0.0, False) is x


def test_dropout_scales_survivors():
    x = T(np.ones(10000))
    out = dropout(x, 0.5, True, np.random.default_rng(1)).data
    assert set(np.unique(out)) == {0.0, 2.0}
    assert 0.45 < (out == 0).mean() < 0.55


def test_linear_values():
    out = linear(T([[1.0, 2.0]]), T([[1.0, 0.0], [0.5, -1.0]]), T([0.1, 0.2])).data
    np.testing.assert_allclose(out, [[1.1, -1.3]])


# -- LSTM --------------------------------------------------------------------

def test_lstm_zero_parameters_fixed_point():
    x = np.random.default_rng(0).standard_normal((5, 3, 9))
    params = [(T(np.zeros((8, 2 + 9))), T(np.zeros(8))), (T(np.zeros((8, 4))), T(np.zeros(8)))]
    out, h_last = lstm_forward(T(x), params)
    assert out.shape == (5, 3, 2)
    assert h_last.shape == (2, 3, 2)
    assert not out.data.any() and not h_last.data.any()


def test_lstm_single_step_hand_evaluation():
    # one hidden unit, one input feature, only the candidate bias is large
    b = np.array([0.0, 0.0, 50.0, 0.0])
    out, _ = lstm_forward(T(np.array([[[0.7]]])), [(T(np.zeros((4, 2))), T(b))])
    c1 = 0.5 * math.tanh(50.0)
    assert c1 == pytest.approx(0.5)
    assert out.data.item() == pytest.approx(0.5 * math.tanh(c1), abs=1e-12)
    assert out.data.item() == pytest.approx(0.2311, abs=1e-4)


def test_lstm_rejects_bad_shapes():
    with pytest.raises(ValueError):
        lstm_forward(T(np.zeros((2, 1, 3))), [])
    with pytest.raises(ValueError, match="weight columns"):
        lstm_forward(T(np.zeros((2, 1, 3))), [(T(np.zeros((8, 4))), T(np.zeros(8)))])


# -- loss --------------------------------------------------------------------

def test_cross_entropy_uniform():
    loss = softmax_cross_entropy(T(np.zeros((4, 5))), [0, 1, 2, 3])
    assert loss.data.item() == pytest.approx(math.log(5))


def test_cross_entropy_saturated():
    logits = np.zeros((2, 5))
    logits[0, 3] = logits[1, 0] = 1e6
    assert softmax_cross_entropy(T(logits), [3, 0]).data.item() == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_random_direct_formula():
    rng = np.random.default_rng(11)
    z = rng.standard_normal((3, 5))
    y = [4, 0, 2]
    expected = -sum(math.log(math.exp(z[i, y[i]]) / sum(math.exp(v) for v in z[i])) for i in range(3)) / 3
    assert softmax_cross_entropy(T(z), y).data.item() == pytest.approx(expected, rel=1e-12)


def test_cross_entropy_label_range():
    with pytest.raises(ValueError, match="labels"):
        softmax_cross_entropy(T(np.zeros((1, 5))), [5])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(-1e3, 1e3))
def test_cross_entropy_shift_invariant(seed, shift):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((4, 5))
    y = rng.integers(0, 5, 4)
    a = softmax_cross_entropy(T(z), y).data.item()
    b = softmax_cross_entropy(T(z + shift), y).data.item()
    assert abs(a - b) < 1e-6


# -- backward / optimizer ----------------------------------------------------

def test_backward_sum_gives_ones():
    w = T(np.arange(6.0).reshape(2, 3), True)
    backward(F.sum(w))
    np.testing.assert_array_equal(w.grad, np.ones((2, 3)))


def test_backward_twice_on_same_graph_is_an_error():
    w = T(np.ones(3), True)
    loss = F.sum(F.mul(w, w))
    backward(loss)
    with pytest.raises(GraphError, match="consumed"):
        backward(loss)


def test_backward_non_scalar_is_an_error():
    w = T(np.ones(3), True)
    with pytest.raises(GraphError, match="scalar"):
        backward(F.mul(w, w))


def test_backward_shared_node_accumulates_once_per_path():
    w = T([2.0], True)
    y = F.mul(w, w)  # dy/dw = 2w
    backward(F.sum(F.add(y, y)))
    assert w.grad[0] == pytest.approx(8.0)


def test_backward_deterministic():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((3, 2, 9, 9)).astype(np.float32)
    wv = rng.standard_normal((4, 2, 3, 3)).astype(np.float32)
    grads = []
    for _ in range(2):
        w = Tensor(wv, requires_grad=True)
        y = relu(conv2d(Tensor(x), w, stride=2, pad=1))
        backward(softmax_cross_entropy(y.reshape(3, -1)[:, :5], [0, 1, 2]))
        grads.append(w.grad.tobytes())
    assert grads[0] == grads[1]


def test_adam_first_step_hand_evaluation():
    p = Tensor(np.array([1.0, -2.0, 0.0]), requires_grad=True, dtype=np.float64)
    p.grad = np.array([0.5, -3.0, 0.0])
    state = AdamState(lr=1e-3)
    adam_step(state, {"p": p})
    # bias-corrected moments at t=1 equal g and g^2
    expected = np.array([1.0, -2.0, 0.0]) - 1e-3 * np.array([0.5 / (0.5 + 1e-8), -3.0 / (3.0 + 1e-8), 0.0])
    np.testing.assert_allclose(p.data, expected, rtol=1e-12)
    assert state.step == 1
    assert not p.grad.any()


# -- analytic ----------------------------------------------------------------

@pytest.mark.parametrize("schedule,expected", [
    ([(3, 1), (3, 1)], 5),
    ([(3, 1), (3, 1), (3, 1)], 7),
    ([(1, 1)], 1),
    ([(3, 2), (3, 2)], 7),
])
def test_receptive_field(schedule, expected):
    assert receptive_field(schedule) == expected


@pytest.mark.parametrize("n", range(1, 11))
def test_receptive_field_stacked_3x3(n):
    assert receptive_field([(3, 1)] * n) == 2 * n + 1


def test_receptive_field_empty():
    with pytest.raises(ValueError):
        receptive_field([])


@pytest.mark.parametrize("args,expected", [((3, 4, 8, 1), 288), ((3, 4, 8, 4), 72), ((3, 4, 4, 4), 36)])
def test_conv_param_count(args, expected):
    assert conv_param_count(*args) == expected


@pytest.mark.parametrize("c", [1, 2, 3, 8, 32, 96])
def test_conv_param_count_depthwise_reduction(c):
    assert conv_param_count(3, c, c, c) * c == conv_param_count(3, c, c, 1)


def test_conv_param_count_divisibility():
    with pytest.raises(ValueError):
        conv_param_count(3, 4, 6, 4)
