import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mtlseg import tensor as T
from mtlseg.tensor import Tensor

from gradcheck import op_cases
from oracles import direct_conv2d, scatter_transposed_conv, window_max


def _rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)))


def _check_grad(loss_fn, params, tol=1e-4):
    for p in params:
        p.grad = None
    T.backward(loss_fn())
    analytic = [p.grad.copy() for p in params]
    numeric = T.finite_diff_grad(lambda: loss_fn().item(), params, 1e-5)
    for a, n in zip(analytic, numeric):
        assert _rel_err(a, n) < tol


# --------------------------------------------------------------- conv2d


def test_conv_identity_kernel():
    x = np.arange(9.0).reshape(1, 3, 3)
    out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, x)


def test_conv_zero_input_gives_bias():
    rng = np.random.default_rng(0)
    out = T.conv2d(Tensor(np.zeros((2, 5, 5))), Tensor(rng.normal(size=(3, 2, 3, 3))),
                   Tensor(np.array([0.5, -1.0, 2.0])), padding=1)
    for o, b in enumerate([0.5, -1.0, 2.0]):
        assert np.all(out.data[o] == b)


@pytest.mark.parametrize("seed", range(3))
def test_conv_matches_direct_oracle(seed):
    rng = np.random.default_rng(seed)
    x, w, b = rng.normal(size=(2, 8, 8)), rng.normal(size=(4, 2, 3, 3)), rng.normal(size=4)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), padding=1)
    np.testing.assert_allclose(out.data, direct_conv2d(x, w, b, 1), rtol=0, atol=1e-12)


def test_conv_batched_and_unpadded_match_oracle():
    rng = np.random.default_rng(5)
    x, w = rng.normal(size=(3, 2, 7, 6)), rng.normal(size=(3, 2, 3, 3))
    out = T.conv2d(Tensor(x), Tensor(w), None, padding=0)
    for n in range(3):
        np.testing.assert_allclose(out.data[n], direct_conv2d(x[n], w, None, 0), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_conv_is_linear_in_input(seed, a, b):
    rng = np.random.default_rng(seed)
    x, y, w = rng.normal(size=(2, 6, 6)), rng.normal(size=(2, 6, 6)), rng.normal(size=(3, 2, 3, 3))
    conv = lambda v: T.conv2d(Tensor(v), Tensor(w), None, padding=1).data
    np.testing.assert_allclose(conv(a * x + b * y), a * conv(x) + b * conv(y), atol=1e-12)


def test_conv_shape_errors_name_dimension():
    x = Tensor(np.zeros((2, 5, 5)))
    with pytest.raises(ValueError, match="channel"):
        T.conv2d(x, Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ValueError, match="odd"):
        T.conv2d(x, Tensor(np.zeros((1, 2, 2, 2))))
    with pytest.raises(ValueError):
        T.conv2d(Tensor(np.zeros((2, 1, 1))), Tensor(np.zeros((1, 2, 3, 3))))
    with pytest.raises(ValueError):
        T.conv2d(x, Tensor(np.zeros((1, 2, 3, 3))), padding=-1)


# ------------------------------------------------------------- pooling


def test_pool_small_example():
    out, _ = T.max_pool2d(Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]])), 2)
    assert out.data.tolist() == [[[4.0]]]


def test_pool_constant_routes_to_first_index():
    x = Tensor(np.full((1, 4, 4), 2.0), requires_grad=True)
    out, _ = T.max_pool2d(x, 2)
    assert np.all(out.data == 2.0)
    T.backward(T.reduce_sum(out))
    expect = np.zeros((1, 4, 4))
    expect[0, ::2, ::2] = 1.0
    np.testing.assert_array_equal(x.grad, expect)


def test_pool_matches_window_scan():
    x = np.random.default_rng(1).normal(size=(3, 16, 16))
    out, _ = T.max_pool2d(Tensor(x), 2)
    np.testing.assert_array_equal(out.data, window_max(x, 2))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([1, 2, 4]))
def test_pool_of_permutation_matches_oracle(seed, k):
    x = np.random.default_rng(seed).permutation(2 * 8 * 8).reshape(2, 8, 8).astype(float)
    out, _ = T.max_pool2d(Tensor(x), k)
    ref = window_max(x, k)
    np.testing.assert_array_equal(out.data, ref)
    up = np.repeat(np.repeat(out.data, k, 1), k, 2)
    assert np.all(up >= x)


def test_pool_rejects_non_divisible():
    with pytest.raises(ValueError):
        T.max_pool2d(Tensor(np.zeros((1, 5, 4))), 2)


# --------------------------------------------------- transposed conv / concat


def test_transposed_single_pixel():
    out = T.transposed_conv2d(Tensor(np.full((1, 1, 1), 3.0)), Tensor(np.ones((1, 2, 2, 2))), None)
    np.testing.assert_array_equal(out.data, np.full((2, 2, 2), 3.0))


def test_transposed_zero_input():
    w = np.random.default_rng(0).normal(size=(2, 3, 2, 2))
    out = T.transposed_conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(w), None)
    assert out.shape == (3, 8, 8) and not out.data.any()


def test_transposed_matches_scatter_oracle():
    rng = np.random.default_rng(2)
    x, w, b = rng.normal(size=(3, 5, 4)), rng.normal(size=(3, 2, 2, 2)), rng.normal(size=2)
    out = T.transposed_conv2d(Tensor(x), Tensor(w), Tensor(b))
    np.testing.assert_allclose(out.data, scatter_transposed_conv(x, w, b), rtol=0, atol=1e-13)


def test_concat_shapes_and_gradient():
    a = Tensor(np.ones((2, 4, 4)), requires_grad=True)
    b = Tensor(np.zeros((3, 4, 4)), requires_grad=True)
    c = T.concat_channels(a, b)
    assert c.shape == (5, 4, 4)
    np.testing.assert_array_equal(c.data[:2], a.data)
    T.backward(T.reduce_sum(c))
    assert np.all(a.grad == 1) and np.all(b.grad == 1)


def test_concat_with_empty_is_identity():
    x = np.random.default_rng(0).normal(size=(2, 3, 3))
    out = T.concat_channels(Tensor(x), Tensor(np.zeros((0, 3, 3))))
    np.testing.assert_array_equal(out.data, x)


def test_concat_spatial_mismatch():
    with pytest.raises(ValueError):
        T.concat_channels(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 4, 5))))


# ------------------------------------------------------ elementwise and misc


def test_small_elementwise_values():
    assert T.sigmoid(Tensor(0.0)).item() == 0.5
    assert T.relu(Tensor(np.array([-1.0, 2.0]))).data.tolist() == [0.0, 2.0]
    x = np.array([1.0, -2.0, 3.0])
    np.testing.assert_array_equal(T.linear(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3))).data, x)


def test_linear_shape_error():
    with pytest.raises(ValueError):
        T.linear(Tensor(np.zeros(4)), Tensor(np.zeros((2, 3))))


def test_backward_square_and_sigmoid():
    x = Tensor(3.0, requires_grad=True)
    T.backward(x * x)
    assert x.grad == pytest.approx(6.0)
    v = Tensor(np.zeros(4), requires_grad=True)
    T.backward(T.reduce_sum(T.sigmoid(v)))
    np.testing.assert_allclose(v.grad, 0.25)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        T.backward(x * 2.0)


def test_backward_populates_every_leaf():
    a = Tensor(np.ones(2), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    T.backward(T.reduce_sum(a * b + a))
    np.testing.assert_array_equal(a.grad, [2.0, 2.0])
    np.testing.assert_array_equal(b.grad, [1.0, 1.0])


def test_non_finite_forward_is_reported():
    with pytest.raises(ValueError):
        T.log(Tensor(np.array([0.0, 1.0])))
    with pytest.raises(FloatingPointError):
        T.exp(Tensor(np.array([1000.0])))


def test_finite_difference_oracle_basics():
    x = Tensor(2.0, requires_grad=True)
    (g,) = T.finite_diff_grad(lambda: x.item() ** 3, [x], 1e-5)
    assert abs(float(g) - 12.0) < 1e-8
    y = Tensor(np.ones(3), requires_grad=True)
    (g,) = T.finite_diff_grad(lambda: 4.0, [y])
    assert not np.any(g)


# --------------------------------------------------------- gradient fidelity


@pytest.mark.parametrize("seed", range(20))
def test_op_gradients(seed):
    for _, fn, params in op_cases(seed):
        _check_grad(fn, params)


def test_three_layer_net_self_consistency():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(4, 6))
    Ws = [Tensor(rng.normal(size=s) * 0.5, requires_grad=True) for s in [(5, 6), (4, 5), (1, 4)]]
    bs = [Tensor(rng.normal(size=s[0]) * 0.1, requires_grad=True) for s in [(5,), (4,), (1,)]]

    def f():
        h = T.sigmoid(T.linear(Tensor(x), Ws[0], bs[0]))
        h = T.softplus(T.linear(h, Ws[1], bs[1]))
        return T.reduce_mean(T.linear(h, Ws[2], bs[2]))

    _check_grad(f, Ws + bs)


# ------------------------------------------------------------ serialization


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=0, max_size=4), st.integers(0, 2**31 - 1))
def test_tensor_roundtrip(shape, seed):
    arr = np.random.default_rng(seed).normal(size=shape)
    buf = io.BytesIO()
    T.write_tensor(buf, arr)
    buf.seek(0)
    header = buf.readline()
    assert header.startswith(b"TNSR v1 %d" % len(shape))
    buf.seek(0)
    back = T.read_tensor(buf)
    assert back.shape == arr.shape
    np.testing.assert_array_equal(back, arr)


def test_tensor_file_roundtrip(tmp_path):
    arr = np.arange(6.0).reshape(2, 3)
    T.save_tensor(tmp_path / "a.tnsr", arr)
    raw = (tmp_path / "a.tnsr").read_bytes()
    assert raw.startswith(b"TNSR v1 2 2 3\n")
    assert raw[len(b"TNSR v1 2 2 3\n"):] == arr.astype("<f8").tobytes()
    np.testing.assert_array_equal(T.load_tensor(tmp_path / "a.tnsr"), arr)


def test_read_tensor_rejects_garbage():
    with pytest.raises(ValueError):
        T.read_tensor(io.BytesIO(b"NOPE\n"))
