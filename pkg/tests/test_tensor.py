import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from conftest import check_grads, param
from r2rproto import functional as F
from r2rproto.errors import ContractError, DimensionError, NumericError
from r2rproto.tensor import Tape, Tensor, backward, matmul, no_grad, reduce_sum, sigmoid, softmax


# --- matmul ---------------------------------------------------------------

def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(matmul(Tensor(np.eye(2)), a).data, a.data)


def test_matmul_hand_arithmetic():
    out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[0.0], [1.0]]))
    assert np.array_equal(out.data, [[2.0], [4.0]])


def test_matmul_matches_loop(rng):
    a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
    np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, oracles.matmul(a, b), rtol=0, atol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 2\)"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


# --- convolution ----------------------------------------------------------

def test_dsconv_identity_kernel(rng):
    x = rng.normal(size=(3, 6, 6))
    dw = np.zeros((3, 3, 3))
    dw[:, 1, 1] = 1.0
    out = F.depthwise_separable_conv2d(Tensor(x), Tensor(dw), Tensor(np.eye(3)), stride=1)
    np.testing.assert_array_equal(out.data, x)


def test_dsconv_zero_kernels(rng):
    x = rng.normal(size=(3, 6, 6))
    out = F.depthwise_separable_conv2d(Tensor(x), Tensor(np.zeros((3, 3, 3))), Tensor(np.zeros((4, 3))))
    assert not out.data.any()


@pytest.mark.parametrize("stride", [1, 2])
def test_dsconv_matches_loop(rng, stride):
    x, dw, pw = rng.normal(size=(3, 8, 8)), rng.normal(size=(3, 3, 3)), rng.normal(size=(5, 3))
    got = F.depthwise_separable_conv2d(Tensor(x), Tensor(dw), Tensor(pw), stride=stride).data
    np.testing.assert_allclose(got, oracles.depthwise_separable_conv(x, dw, pw, stride), rtol=0, atol=1e-12)


@pytest.mark.parametrize("stride,k", [(1, 3), (2, 3), (4, 7)])
def test_conv2d_matches_loop(rng, stride, k):
    x, w, b = rng.normal(size=(2, 8, 8)), rng.normal(size=(4, 2, k, k)), rng.normal(size=4)
    got = F.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride).data
    np.testing.assert_allclose(got, oracles.conv2d(x, w, b, stride), rtol=0, atol=1e-12)


def test_conv_batched_equals_per_sample(rng):
    x, w = rng.normal(size=(3, 2, 7, 7)), rng.normal(size=(4, 2, 3, 3))
    batched = F.conv2d(Tensor(x), Tensor(w), stride=2).data
    for i in range(3):
        np.testing.assert_allclose(batched[i], F.conv2d(Tensor(x[i]), Tensor(w), stride=2).data, atol=1e-12)


def test_conv_nonpositive_extent():
    with pytest.raises(DimensionError, match="non-positive"):
        F.depthwise_conv2d(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 5, 5))), stride=1, padding=0)


# --- softmax --------------------------------------------------------------

@pytest.mark.parametrize(
    "x,expected",
    [([0.0, 0.0], [0.5, 0.5]), ([math.log(3.0), 0.0], [0.75, 0.25]), ([1000.0, 0.0], [1.0, 0.0])],
)
def test_softmax_examples(x, expected):
    np.testing.assert_allclose(softmax(Tensor(x)).data, expected, atol=1e-15)


def test_softmax_nan_raises():
    with pytest.raises(NumericError):
        softmax(Tensor([0.0, np.nan]))


def test_softmax_matches_mpmath(rng):
    x = rng.normal(scale=5, size=(4, 6))
    got = softmax(Tensor(x), axis=1).data
    for i in range(4):
        np.testing.assert_allclose(got[i], oracles.softmax_mp(x[i]), rtol=0, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)),
              elements=st.floats(-1e3, 1e3, allow_nan=False)),
       st.integers(0, 1))
def test_softmax_sums_to_one(x, axis):
    out = softmax(Tensor(x), axis=axis).data
    assert np.all((out >= 0) & (out <= 1))
    np.testing.assert_allclose(out.sum(axis=axis), 1.0, atol=1e-6)


# --- reductions -----------------------------------------------------------

def test_reduce_sum_all():
    assert reduce_sum(Tensor([[1.0, 2.0], [3.0, 4.0]]), (0, 1)).data == 10.0


def test_reduce_sum_empty_axis():
    assert reduce_sum(Tensor(np.zeros((0, 3))), (0,)).data.tolist() == [0.0, 0.0, 0.0]


def test_reduce_sum_matches_loop(rng):
    x = rng.normal(size=(4, 5, 6))
    np.testing.assert_allclose(reduce_sum(Tensor(x), (1, 2)).data, oracles.reduce_sum_12(x), rtol=0, atol=1e-12)


def test_reduce_sum_invalid_axis():
    with pytest.raises(DimensionError):
        reduce_sum(Tensor(np.ones((2, 2))), (2,))
    with pytest.raises(DimensionError):
        reduce_sum(Tensor(np.ones((2, 2))), (0, 0))


# --- binary cross-entropy -------------------------------------------------

def test_bce_zero_logit():
    assert F.bce_with_logits(Tensor([0.0]), [1.0]).data == pytest.approx(math.log(2), abs=1e-15)


def test_bce_saturation():
    loss = F.bce_with_logits(Tensor([50.0]), [1.0]).data
    assert np.isfinite(loss) and loss < 1e-20


def test_bce_matches_mpmath(rng):
    logits = rng.normal(scale=4, size=14)
    t = (rng.random(14) < 0.5).astype(float)
    assert F.bce_with_logits(Tensor(logits), t).data == pytest.approx(oracles.bce_mp(logits, t), abs=1e-10)


def test_bce_errors():
    with pytest.raises(DimensionError):
        F.bce_with_logits(Tensor([0.0, 1.0]), [1.0])
    with pytest.raises(ContractError):
        F.bce_with_logits(Tensor([0.0]), [0.5])


# --- minor ops vs oracles -------------------------------------------------

def test_gelu_sigmoid_match_mpmath(rng):
    x = rng.normal(scale=3, size=12)
    np.testing.assert_allclose(F.gelu(Tensor(x)).data, oracles.gelu_mp(x), rtol=0, atol=1e-10)
    np.testing.assert_allclose(sigmoid(Tensor(x)).data, oracles.sigmoid_mp(x), rtol=0, atol=1e-10)


def test_layer_norm_matches_loop(rng):
    x, g, b = rng.normal(size=(5, 3, 4)), rng.normal(size=5), rng.normal(size=5)
    np.testing.assert_allclose(F.layer_norm(Tensor(x), Tensor(g), Tensor(b)).data,
                               oracles.layer_norm_channels(x, g, b), rtol=0, atol=1e-10)


def test_elementwise_and_shape_ops(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4,))
    np.testing.assert_allclose((Tensor(a) + Tensor(b)).data, a + b, atol=1e-10)
    np.testing.assert_allclose((Tensor(a) * Tensor(b)).data, a * b, atol=1e-10)
    np.testing.assert_allclose((Tensor(a) * 2.5).data, a * 2.5, atol=1e-10)
    np.testing.assert_array_equal(Tensor(a).reshape(4, 3).data, a.reshape(4, 3))
    np.testing.assert_array_equal(Tensor(a).transpose(1, 0).data, a.T)


# --- backward -------------------------------------------------------------

def test_backward_sum_gives_ones():
    w = param([1.0, -2.0, 3.0])
    backward(w.sum())
    np.testing.assert_array_equal(w.grad, [1.0, 1.0, 1.0])


def test_backward_half_squared_norm():
    w = param([1.0, -2.0, 3.0])
    backward((w * w).sum() * 0.5)
    np.testing.assert_array_equal(w.grad, w.data)


def test_backward_accumulates():
    w = param([1.0, 2.0])
    backward(w.sum())
    backward(w.sum())
    np.testing.assert_array_equal(w.grad, [2.0, 2.0])


def test_backward_rejects_non_scalar():
    with pytest.raises(ContractError):
        backward(param([1.0, 2.0]) * 2.0)


def test_no_grad_records_nothing():
    w = param([1.0])
    with no_grad():
        y = w * 2.0
    assert not y.requires_grad and y.is_leaf


def test_tape_is_deterministic(rng):
    w = param(rng.normal(size=(3, 3)))
    loss = softmax(matmul(w, w), axis=1).sum() * 2.0
    assert [t.shape for t in Tape(loss).entries] == [t.shape for t in Tape(loss).entries]
    backward(loss)
    g1 = w.grad.copy()
    w.grad = None
    backward(loss)
    assert np.array_equal(g1, w.grad)


# --- finite-difference checks, 10 seeds per op ----------------------------

SEEDS = range(10)


def _fd_cases(seed):
    r = np.random.default_rng(seed)
    weights = lambda *s: Tensor(r.normal(size=s))  # noqa: E731
    a, b = param(r.normal(size=(3, 4))), param(r.normal(size=(4, 2)))
    x = param(r.normal(size=(2, 7, 7)))
    dw, pw = param(r.normal(size=(2, 3, 3))), param(r.normal(size=(3, 2)))
    cw, cb = param(r.normal(size=(3, 2, 3, 3))), param(r.normal(size=3))
    xl = param(r.normal(size=(4, 3, 3)))
    g, be = param(r.normal(size=4) + 1), param(r.normal(size=4))
    u = param(r.normal(scale=2, size=(3, 5)))
    ug = param(r.normal(size=(3, 5)))  # GELU tails vanish below finite-difference resolution
    t = (r.random(5) < 0.5).astype(float)
    wm, wc, wu, wl = weights(3, 2), weights(3, 4, 4), weights(3, 5), weights(4, 3, 3)
    return {
        "matmul": (lambda: (matmul(a, b) * wm).sum(), [a, b]),
        "dsconv": (lambda: (F.depthwise_separable_conv2d(x, dw, pw, stride=2) * wc).sum(), [x, dw, pw]),
        "conv2d": (lambda: (F.conv2d(x, cw, cb, stride=2) * wc).sum(), [x, cw, cb]),
        "softmax": (lambda: (softmax(u, axis=1) * wu).sum(), [u]),
        "reduce_sum": (lambda: (reduce_sum(u * u, (1,)) * Tensor([1.0, -2.0, 0.5])).sum(), [u]),
        "bce": (lambda: F.bce_with_logits(u.sum(axes=(0,)), t), [u]),
        "gelu": (lambda: (F.gelu(ug) * wu).sum(), [ug]),
        "sigmoid": (lambda: (sigmoid(u) * wu).sum(), [u]),
        "layer_norm": (lambda: (F.layer_norm(xl, g, be, axis=0) * wl).sum(), [xl, g, be]),
        "div": (lambda: (u / (u * u + 1.0) * wu).sum(), [u]),
    }


@pytest.mark.parametrize("op", ["matmul", "dsconv", "conv2d", "softmax", "reduce_sum", "bce", "gelu",
                                "sigmoid", "layer_norm", "div"])
def test_op_gradients_match_finite_differences(op):
    for seed in SEEDS:
        fn, params = _fd_cases(seed)[op]
        check_grads(fn, params)


def test_forward_bitwise_deterministic(rng):
    x, w = rng.normal(size=(2, 3, 8, 8)), rng.normal(size=(4, 3, 3, 3))
    a = F.gelu(F.conv2d(Tensor(x), Tensor(w), stride=2)).data
    b = F.gelu(F.conv2d(Tensor(x), Tensor(w), stride=2)).data
    assert a.tobytes() == b.tobytes()
