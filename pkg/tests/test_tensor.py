import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spatwheal import tensor as T
from spatwheal.tensor import Tensor

import gradcases
from oracles import naive_conv2d, scalar_adam_trace, window_scan_maxpool


# --- conv2d -----------------------------------------------------------------

def test_conv_zero_input_gives_bias(rng):
    w = Tensor(rng.standard_normal((4, 2, 3, 3)))
    b = Tensor(np.array([0.5, -1.0, 2.0, 3.0]))
    out = T.conv2d(Tensor(np.zeros((1, 2, 5, 6))), w, b)
    assert out.shape == (1, 4, 5, 6)
    for c in range(4):
        assert np.all(out.data[0, c] == b.data[c])


def test_conv_identity_kernel(rng):
    x = rng.standard_normal((2, 3, 6, 5))
    w = np.zeros((3, 3, 3, 3))
    for c in range(3):
        w[c, c, 1, 1] = 1.0
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, x)


def test_conv_identity_shift_kernel_uses_zero_padding():
    x = np.arange(16.0).reshape(1, 1, 4, 4) + 1
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 2] = 1.0          # picks the right-hand neighbour
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(1))).data[0, 0]
    np.testing.assert_array_equal(out[:, :3], x[0, 0, :, 1:])
    np.testing.assert_array_equal(out[:, 3], 0.0)


def test_conv_matches_naive_loops(rng):
    x = rng.standard_normal((1, 2, 4, 4))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    got = T.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    ref = naive_conv2d(x, w, b)
    assert np.max(np.abs(got - ref) / (np.abs(ref) + 1e-12)) <= 1e-6


def test_conv_channel_mismatch():
    with pytest.raises(T.ShapeError):
        T.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 4, 3, 3))), Tensor(np.zeros(2)))


# --- group norm ---------------------------------------------------------------

def test_group_norm_constant_input():
    x = Tensor(np.full((1, 4, 3, 3), 7.0))
    out = T.group_norm(x, 2, Tensor(np.ones(4)), Tensor(np.zeros(4)))
    np.testing.assert_array_equal(out.data, 0.0)


def test_group_norm_two_values():
    x = Tensor(np.array([1.0, 2.0]).reshape(1, 1, 1, 2))
    out = T.group_norm(x, 1, Tensor(np.ones(1)), Tensor(np.zeros(1)), eps=1e-5).data.ravel()
    expected = 0.5 / math.sqrt(0.25 + 1e-5)
    np.testing.assert_allclose(out, [-expected, expected], rtol=1e-12)
    assert abs(expected - 0.99998) < 1e-6


def test_group_norm_affine_law(rng):
    x = Tensor(rng.standard_normal((2, 4, 3, 3)))
    base = T.group_norm(x, 2, Tensor(np.ones(4)), Tensor(np.zeros(4))).data
    aff = T.group_norm(x, 2, Tensor(np.full(4, 2.0)), Tensor(np.ones(4))).data
    np.testing.assert_allclose(aff, 2 * base + 1, rtol=1e-12)


def test_group_norm_statistics(rng):
    x = rng.standard_normal((3, 8, 5, 5)) * 4 + 3
    out = T.group_norm(Tensor(x), 4, Tensor(np.ones(8)), Tensor(np.zeros(8))).data
    g = out.reshape(3, 4, -1)
    assert np.abs(g.mean(-1)).max() <= 1e-5
    assert np.abs(g.var(-1) - 1).max() <= 1e-3


def test_group_norm_bad_groups():
    with pytest.raises(T.ShapeError):
        T.group_norm(Tensor(np.zeros((1, 6, 2, 2))), 4, Tensor(np.ones(6)), Tensor(np.zeros(6)))


# --- activations --------------------------------------------------------------

def test_relu_values():
    np.testing.assert_array_equal(T.relu(Tensor(np.array([-3.0, 3.0]))).data, [0.0, 3.0])


def test_sigmoid_values(rng):
    assert T.sigmoid(Tensor(np.array([0.0]))).data[0] == 0.5
    x = rng.standard_normal(50) * 5
    s = T.sigmoid(Tensor(x)).data + T.sigmoid(Tensor(-x)).data
    np.testing.assert_allclose(s, 1.0, atol=1e-12)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_sigmoid_open_interval(dtype):
    out = T.sigmoid(Tensor(np.array([-1e4, -50.0, 0.0, 50.0, 1e4], dtype=dtype))).data
    assert np.all(out > 0) and np.all(out < 1)


# --- pooling / resampling -------------------------------------------------------

def test_maxpool_basics(rng):
    np.testing.assert_array_equal(T.maxpool2(Tensor(np.full((1, 2, 4, 4), 3.0))).data, 3.0)
    win = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
    assert T.maxpool2(Tensor(win)).data.item() == 4.0
    x = rng.standard_normal((1, 1, 6, 6))
    np.testing.assert_array_equal(T.maxpool2(Tensor(x)).data, window_scan_maxpool(x))


def test_maxpool_odd_dims():
    with pytest.raises(T.ShapeError):
        T.maxpool2(Tensor(np.zeros((1, 1, 5, 4))))


def test_upsample_constant_and_single_pixel():
    np.testing.assert_allclose(T.upsample_bilinear2(Tensor(np.full((1, 2, 3, 5), 0.7))).data, 0.7, atol=1e-15)
    out = T.upsample_bilinear2(Tensor(np.full((1, 1, 1, 1), 4.2))).data
    np.testing.assert_allclose(out, np.full((1, 1, 2, 2), 4.2))


def test_upsample_2x2_half_pixel_oracle():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
    # half-pixel centres: 1-d weights of the second sample are 0, .25, .75, 1
    # so out[i, j] = 1 + a[j] + 2 a[i]
    a = [0.0, 0.25, 0.75, 1.0]
    expected = np.array([[1 + a[j] + 2 * a[i] for j in range(4)] for i in range(4)])
    got = T.upsample_bilinear2(Tensor(x)).data[0, 0]
    np.testing.assert_allclose(got, expected, atol=1e-6)


def test_resize_downscale_by_two_is_block_average(rng):
    x = rng.random((3, 8, 6))
    got = T.resize_array(x, 4, 3)
    ref = x.reshape(3, 4, 2, 3, 2).mean(axis=(2, 4))
    np.testing.assert_allclose(got, ref, atol=1e-12)


# --- concat / loss ---------------------------------------------------------------

def test_concat_channels(rng):
    xs = [Tensor(rng.standard_normal((2, 3, 4, 4))) for _ in range(32)]
    out = T.concat_channels(xs)
    assert out.shape == (2, 96, 4, 4)
    for i, t in enumerate(xs):
        np.testing.assert_array_equal(out.data[:, 3 * i:3 * i + 3], t.data)
    np.testing.assert_array_equal(T.concat_channels(xs[:1]).data, xs[0].data)


def test_concat_spatial_mismatch():
    with pytest.raises(T.ShapeError):
        T.concat_channels([Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 4, 2)))])


def test_bce_uniform_prediction():
    t = (np.arange(12) % 2).reshape(1, 1, 3, 4)
    loss = T.bce_loss(Tensor(np.full((1, 1, 3, 4), 0.5)), t)
    assert loss.item() == pytest.approx(math.log(2), abs=1e-12)


def test_bce_perfect_prediction():
    t = (np.arange(12) % 2).reshape(1, 1, 3, 4).astype(float)
    assert T.bce_loss(Tensor(t.copy()), t).item() <= 1e-6


def test_bce_matches_formula(rng):
    p = rng.uniform(0.01, 0.99, (2, 1, 5, 5))
    t = (rng.random((2, 1, 5, 5)) > 0.5).astype(float)
    ref = 0.0
    for pi, ti in zip(p.ravel(), t.ravel()):
        ref -= ti * math.log(pi) + (1 - ti) * math.log(1 - pi)
    ref /= p.size
    assert T.bce_loss(Tensor(p), t).item() == pytest.approx(ref, abs=1e-8)


def test_bce_shape_mismatch():
    with pytest.raises(T.ShapeError):
        T.bce_loss(Tensor(np.full((1, 1, 2, 2), 0.5)), np.zeros((1, 1, 2, 3)))


# --- autodiff ---------------------------------------------------------------------

def test_sum_gradient_is_ones(rng):
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    T.tensor_sum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


@pytest.mark.parametrize("name", sorted(gradcases.CASES))
@pytest.mark.parametrize("seed", range(10))
def test_gradients_match_finite_differences(name, seed):
    assert gradcases.check(name, seed) <= gradcases.TOL


def test_backward_twice_is_an_error(rng):
    x = Tensor(rng.standard_normal(4), requires_grad=True)
    loss = T.tensor_sum(T.relu(x))
    loss.backward()
    with pytest.raises(RuntimeError):
        loss.backward()


def test_backward_needs_scalar(rng):
    x = Tensor(rng.standard_normal(4), requires_grad=True)
    with pytest.raises(ValueError):
        T.relu(x).backward()


def test_shared_subgraph_accumulates(rng):
    x = Tensor(rng.standard_normal((1, 1, 2, 2)), requires_grad=True)
    y = T.concat_channels([x, x])
    T.tensor_sum(y).backward()
    np.testing.assert_array_equal(x.grad, 2.0)


def test_no_grad_records_nothing(rng):
    x = Tensor(rng.standard_normal(3), requires_grad=True)
    with T.no_grad():
        y = T.relu(x)
    assert not y.requires_grad


@settings(max_examples=25, deadline=None)
@given(b=st.integers(1, 2), c=st.integers(1, 4), h=st.integers(1, 4), w=st.integers(1, 4))
def test_shape_algebra(b, c, h, w):
    x = Tensor(np.random.default_rng(0).standard_normal((b, c, 2 * h, 2 * w)))
    wt = Tensor(np.zeros((3, c, 3, 3)))
    assert T.conv2d(x, wt, Tensor(np.zeros(3))).shape == (b, 3, 2 * h, 2 * w)
    assert T.group_norm(x, 1, Tensor(np.ones(c)), Tensor(np.zeros(c))).shape == x.shape
    assert T.relu(x).shape == T.sigmoid(x).shape == x.shape
    assert T.maxpool2(x).shape == (b, c, h, w)
    assert T.upsample_bilinear2(x).shape == (b, c, 4 * h, 4 * w)
    assert T.concat_channels([x, x]).shape == (b, 2 * c, 2 * h, 2 * w)


def test_forward_is_deterministic(rng):
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)

    def run():
        h = T.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(4, np.float32)))
        h = T.group_norm(h, 2, Tensor(np.ones(4, np.float32)), Tensor(np.zeros(4, np.float32)))
        return T.sigmoid(T.upsample_bilinear2(T.maxpool2(T.relu(h)))).data

    a, b = run(), run()
    assert a.dtype == np.float32
    assert a.tobytes() == b.tobytes()


# --- Adam -----------------------------------------------------------------------------

def test_adam_first_step_is_lr_times_sign():
    p = Tensor(np.array([1.0, 1.0, 1.0]), requires_grad=True)
    g = np.array([0.3, -2.0, 1e-3])
    st_ = T.AdamState.for_params([p], lr=0.01)
    T.adam_step([p], [g], st_)
    change = p.data - 1.0
    slack = 0.01 * 1e-8 / np.abs(g)
    assert np.all(np.abs(change + 0.01 * np.sign(g)) <= slack + 1e-15)
    assert st_.t == 1


def test_adam_zero_gradient_keeps_params():
    p = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    st_ = T.AdamState.for_params([p])
    for _ in range(20):
        T.adam_step([p], [np.zeros(2)], st_)
    np.testing.assert_array_equal(p.data, [1.5, -2.0])
    assert st_.t == 20


def test_adam_matches_scalar_reference():
    ref = scalar_adam_trace(1.0, lambda x: 2 * x, lr=0.1, steps=10)
    p = Tensor(np.array([1.0]), requires_grad=True)
    st_ = T.AdamState.for_params([p], lr=0.1)
    for k in range(10):
        p.grad = None
        T.tensor_sum(T.concat_channels([Tensor(p.data.reshape(1, 1, 1, 1))]))  # no-op graph
        T.adam_step([p], [2 * p.data], st_)
        assert abs(p.data[0] - ref[k]) <= 1e-10


def test_adam_shape_mismatch():
    p = Tensor(np.zeros(3), requires_grad=True)
    st_ = T.AdamState.for_params([p])
    with pytest.raises(T.ShapeError):
        T.adam_step([p], [np.zeros(4)], st_)


# --- checkpoint -------------------------------------------------------------------------

def test_checkpoint_round_trip_is_bit_exact(rng):
    params = {"enc0.conv1.weight": Tensor(rng.standard_normal((4, 3, 3, 3)).astype(np.float32)),
              "head.bias": Tensor(np.array([0.25], np.float32)),
              "unicodé.name": Tensor(rng.standard_normal((2, 5)).astype(np.float32))}
    buf = io.BytesIO()
    T.save_params(params, buf)
    raw = buf.getvalue()
    assert raw.startswith(b"SPATW")
    back = T.load_params(io.BytesIO(raw))
    assert list(back) == list(params)
    for k in params:
        assert back[k].data.tobytes() == params[k].data.tobytes()
        assert back[k].shape == params[k].shape
    buf2 = io.BytesIO()
    T.save_params(back, buf2)
    assert buf2.getvalue() == raw


def test_checkpoint_rejects_garbage():
    with pytest.raises(ValueError):
        T.load_params(io.BytesIO(b"NOPE" + bytes(20)))
    with pytest.raises(ValueError):
        T.load_params(io.BytesIO(b"SPATW" + (1).to_bytes(4, "little") + (1).to_bytes(4, "little")))
