import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from histosr import tensor as T
from histosr.errors import ConfigError, NumericalError, ShapeError


def brute_conv(x, w, b):
    """Direct zero-padded 'same' convolution with explicit loops."""
    n, h, wd, c = x.shape
    kh, kw, _, co = w.shape
    pt, pl = (kh - 1) // 2, (kw - 1) // 2
    out = np.zeros((n, h, wd, co))
    for i in range(n):
        for y in range(h):
            for xx in range(wd):
                for o in range(co):
                    s = b[o]
                    for dy in range(kh):
                        for dx in range(kw):
                            yy, xs = y + dy - pt, xx + dx - pl
                            if 0 <= yy < h and 0 <= xs < wd:
                                s += np.dot(x[i, yy, xs, :], w[dy, dx, :, o])
                    out[i, y, xx, o] = s
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- conv ---------------------------------------------------------------------------


def test_conv_paper_shape():
    x = np.zeros((1, 512, 512, 3), np.float32)
    k = T.ConvKernel(np.zeros((3, 3, 3, 16), np.float32), np.zeros(16, np.float32))
    assert T.conv2d_forward(x, k).shape == (1, 512, 512, 16)


def test_conv_identity_scalar():
    k = T.ConvKernel(np.ones((1, 1, 1, 1)), np.zeros(1))
    assert T.conv2d_forward(np.full((1, 1, 1, 1), 3.25), k)[0, 0, 0, 0] == 3.25


def test_conv_all_ones_window_sums():
    k = T.ConvKernel(np.ones((3, 3, 1, 1)), np.zeros(1))
    out = T.conv2d_forward(np.ones((1, 3, 3, 1)), k)[0, :, :, 0]
    assert out[1, 1] == 9
    assert out[0, 0] == out[0, 2] == out[2, 0] == out[2, 2] == 4
    assert out[0, 1] == 6


@pytest.mark.parametrize("kshape", [(3, 3, 2, 3), (2, 2, 4, 2), (1, 1, 3, 5)])
def test_conv_matches_brute_force(rng, kshape):
    x = rng.standard_normal((2, 5, 6, kshape[2]))
    w = rng.standard_normal(kshape)
    b = rng.standard_normal(kshape[3])
    np.testing.assert_allclose(T.conv2d_forward(x, T.ConvKernel(w, b)), brute_conv(x, w, b), atol=1e-12)


def test_conv_center_tap_is_identity(rng):
    x = rng.standard_normal((1, 4, 5, 3)).astype(np.float32)
    w = np.zeros((3, 3, 3, 3), np.float32)
    for c in range(3):
        w[1, 1, c, c] = 1
    out = T.conv2d_forward(x, T.ConvKernel(w, np.zeros(3, np.float32)))
    np.testing.assert_array_equal(out, x)


def test_conv_channel_mismatch_names_shapes():
    k = T.ConvKernel(np.zeros((3, 3, 4, 2)), np.zeros(2))
    with pytest.raises(ShapeError, match=r"\(1, 4, 4, 3\).*\(3, 3, 4, 2\)"):
        T.conv2d_forward(np.zeros((1, 4, 4, 3)), k)


def test_conv_backward_zero_cotangent(rng):
    x = rng.standard_normal((1, 4, 4, 2))
    k = T.ConvKernel(rng.standard_normal((3, 3, 2, 3)), rng.standard_normal(3))
    dx, dw, db = T.conv2d_backward(x, k, np.zeros((1, 4, 4, 3)))
    assert not dx.any() and not dw.any() and not db.any()


def test_conv_backward_scalar_chain_rule():
    w, v, g = 1.5, -2.0, 0.75
    k = T.ConvKernel(np.full((1, 1, 1, 1), w), np.zeros(1))
    dx, dw, db = T.conv2d_backward(np.full((1, 1, 1, 1), v), k, np.full((1, 1, 1, 1), g))
    assert dx.item() == w * g
    assert dw.item() == v * g
    assert db.item() == g


def test_conv_backward_bias_is_cotangent_sum(rng):
    x = rng.standard_normal((2, 3, 3, 1))
    k = T.ConvKernel(rng.standard_normal((3, 3, 1, 2)), np.zeros(2))
    g = rng.standard_normal((2, 3, 3, 2))
    _, _, db = T.conv2d_backward(x, k, g)
    np.testing.assert_allclose(db, g.sum(axis=(0, 1, 2)))


def test_conv_backward_shape_error(rng):
    k = T.ConvKernel(np.zeros((3, 3, 2, 3)), np.zeros(3))
    with pytest.raises(ShapeError):
        T.conv2d_backward(np.zeros((1, 4, 4, 2)), k, np.zeros((1, 4, 4, 2)))


@pytest.mark.parametrize("kshape", [(3, 3, 2, 3), (2, 2, 2, 3), (1, 1, 2, 3)])
def test_conv_gradient_check(rng, kshape):
    x = rng.standard_normal((1, 6, 6, 2))
    w = rng.standard_normal(kshape)
    b = rng.standard_normal(kshape[3])

    def fwd(x, w, b):
        return T.conv2d_forward(x, T.ConvKernel(w, b))

    def bwd(inputs, g):
        x, w, b = inputs
        return T.conv2d_backward(x, T.ConvKernel(w, b), g)

    assert T.gradient_check(fwd, bwd, [x, w, b], rng, step=1e-3) < 1e-4


def test_conv_is_pure(rng):
    x = rng.standard_normal((1, 8, 8, 3)).astype(np.float32)
    k = T.he_normal_init((3, 3, 3, 4), np.random.default_rng(0))
    a = T.conv2d_forward(x, k)
    b = T.conv2d_forward(x, k)
    assert a.tobytes() == b.tobytes()


# -- pooling -------------------------------------------------------------------------


def test_maxpool_window():
    x = np.array([[1, 2], [3, 4]], float).reshape(1, 2, 2, 1)
    out, idx = T.maxpool2x2_forward(x)
    assert out.item() == 4 and idx.item() == 3


def test_maxpool_paper_shape():
    out, idx = T.maxpool2x2_forward(np.zeros((1, 512, 512, 16), np.float32))
    assert out.shape == idx.shape == (1, 256, 256, 16)


def test_maxpool_tie_picks_top_left():
    out, idx = T.maxpool2x2_forward(np.full((1, 4, 6, 2), 7.0))
    assert np.all(out == 7.0)
    assert not idx.any()


def test_maxpool_odd_dims():
    with pytest.raises(ShapeError):
        T.maxpool2x2_forward(np.zeros((1, 3, 4, 1)))


def test_maxpool_backward_routing(rng):
    x = rng.permutation(64).astype(float).reshape(1, 8, 8, 1)
    _, idx = T.maxpool2x2_forward(x)
    d = T.maxpool2x2_backward(idx, np.ones((1, 4, 4, 1)))
    windows = d.reshape(1, 4, 2, 4, 2, 1).sum(axis=(2, 4))
    assert np.all(windows == 1)
    # the single 1 in each window sits on the window maximum
    assert np.all((d == 1) == (x == T.upsample2x2_forward(T.maxpool2x2_forward(x)[0])))


def test_maxpool_backward_zero():
    _, idx = T.maxpool2x2_forward(np.zeros((1, 4, 4, 3)))
    assert not T.maxpool2x2_backward(idx, np.zeros((1, 2, 2, 3))).any()


def test_maxpool_backward_shape_error():
    _, idx = T.maxpool2x2_forward(np.zeros((1, 4, 4, 3)))
    with pytest.raises(ShapeError):
        T.maxpool2x2_backward(idx, np.zeros((1, 2, 2, 2)))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 3), h=st.integers(1, 4), w=st.integers(1, 4))
def test_maxpool_backward_conserves_mass(seed, n, h, w):
    r = np.random.default_rng(seed)
    x = r.standard_normal((n, 2 * h, 2 * w, 3)).astype(np.float32)
    g = r.standard_normal((n, h, w, 3)).astype(np.float32)
    _, idx = T.maxpool2x2_forward(x)
    d = T.maxpool2x2_backward(idx, g)
    assert math.fsum(d.ravel().tolist()) == math.fsum(g.ravel().tolist())


def test_maxpool_gradient_check_away_from_ties(rng):
    # values separated by >= 0.05 within every window, so +/-1e-3 cannot reorder them
    base = rng.permutation(4 * 6 * 6).reshape(1, 6, 6, 4) * 0.05
    x = base + rng.uniform(0, 0.01, base.shape)

    def fwd(x):
        return T.maxpool2x2_forward(x)[0]

    def bwd(inputs, g):
        return [T.maxpool2x2_backward(T.maxpool2x2_forward(inputs[0])[1], g)]

    assert T.gradient_check(fwd, bwd, [x], rng) < 1e-4


# -- upsample / concat ----------------------------------------------------------------------


def test_upsample_scalar():
    out = T.upsample2x2_forward(np.full((1, 1, 1, 1), 2.5))
    assert out.shape == (1, 2, 2, 1) and np.all(out == 2.5)


def test_upsample_paper_shape():
    assert T.upsample2x2_forward(np.zeros((1, 32, 32, 256), np.float32)).shape == (1, 64, 64, 256)


def test_upsample_backward_block_sum(rng):
    g = rng.standard_normal((2, 4, 6, 3))
    d = T.upsample2x2_backward(g)
    np.testing.assert_allclose(d[1, 1, 2, 0], g[1, 2:4, 4:6, 0].sum())


def test_upsample_gradient_check(rng):
    def bwd(inputs, g):
        return [T.upsample2x2_backward(g)]

    assert T.gradient_check(T.upsample2x2_forward, bwd, [rng.standard_normal((1, 3, 4, 2))], rng) < 1e-4


def test_concat_shapes():
    a = np.zeros((1, 64, 64, 128), np.float32)
    assert T.concat_channels(a, a).shape == (1, 64, 64, 256)


def test_concat_empty_is_identity(rng):
    x = rng.standard_normal((2, 3, 3, 4))
    np.testing.assert_array_equal(T.concat_channels(x, np.zeros((2, 3, 3, 0))), x)


def test_concat_mismatch():
    with pytest.raises(ShapeError):
        T.concat_channels(np.zeros((1, 4, 4, 1)), np.zeros((1, 4, 2, 1)))


@settings(max_examples=30, deadline=None)
@given(
    a=arrays(np.float32, (1, 3, 2, 2), elements=st.floats(-1e6, 1e6, width=32)),
    b=arrays(np.float32, (1, 3, 2, 3), elements=st.floats(-1e6, 1e6, width=32)),
)
def test_concat_split_roundtrip(a, b):
    ra, rb = T.split_channels(T.concat_channels(a, b), a.shape[3])
    assert np.array_equal(ra, a) and np.array_equal(rb, b)


# -- activations and loss ------------------------------------------------------------


def test_elu_values():
    assert T.elu(np.array(0.0)) == 0
    assert T.elu(np.array(-1.0)) == pytest.approx(math.exp(-1) - 1, abs=1e-12)
    assert T.elu(np.array(-1.0)) == pytest.approx(-0.63212, abs=1e-5)
    assert T.elu(np.array(2.5)) == 2.5


def test_elu_derivative_at_minus_half():
    x = np.array(-0.5)
    analytic = T.elu_backward(x, np.array(1.0))
    numeric = (T.elu(x + 1e-6) - T.elu(x - 1e-6)) / 2e-6
    assert analytic == pytest.approx(T.elu(x) + 1, abs=1e-15)
    assert analytic == pytest.approx(0.60653, abs=1e-5)
    assert abs(analytic - numeric) < 1e-6


def test_elu_gradient_check(rng):
    x = rng.uniform(-2, 2, (2, 4, 4, 3))
    x = np.where(np.abs(x) < 0.05, 0.5, x)
    assert T.gradient_check(T.elu, lambda i, g: [T.elu_backward(i[0], g)], [x], rng) < 1e-4


def test_sigmoid_values(rng):
    assert T.sigmoid(np.array(0.0)) == 0.5
    x = rng.standard_normal(100)
    np.testing.assert_allclose(T.sigmoid(-x), 1 - T.sigmoid(x), atol=1e-15)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_sigmoid_extremes_stay_inside_unit_interval(dtype):
    with np.errstate(over="raise", invalid="raise", divide="raise"):
        y = T.sigmoid(np.array([-100.0, 100.0], dtype=dtype))
    assert np.all(np.isfinite(y)) and np.all(y > 0) and np.all(y < 1)


def test_sigmoid_gradient_check(rng):
    def bwd(inputs, g):
        return [T.sigmoid_backward(T.sigmoid(inputs[0]), g)]

    assert T.gradient_check(T.sigmoid, bwd, [rng.uniform(-4, 4, (2, 4, 4, 3))], rng) < 1e-4


def test_bce_at_half():
    p = np.full((2, 3, 3, 3), 0.5)
    loss, _ = T.bce_loss(p, p)
    assert loss == pytest.approx(math.log(2), abs=1e-12)


@pytest.mark.parametrize("value", [T.BCE_EPSILON, 1 - T.BCE_EPSILON])
def test_bce_perfect_prediction_is_near_zero(value):
    p = np.full((1, 2, 2, 3), value)
    loss, _ = T.bce_loss(p, p)
    assert 0 <= loss < 2e-6


def test_bce_gradient_check(rng):
    # p kept >= 0.1 away from t: at p == t the gradient vanishes and relative error is meaningless
    t = rng.uniform(0, 1, (2, 4, 4, 3))
    offset = rng.uniform(0.1, 0.3, t.shape) * np.where(t < 0.5, 1, -1)
    p = t + offset

    def fwd(p):
        return T.bce_loss(p, t)[0]

    assert T.gradient_check(fwd, lambda i, g: [T.bce_loss(i[0], t)[1] * g], [p], rng) < 1e-4


def test_bce_minimised_at_target(rng):
    t = rng.uniform(0.05, 0.95, (1, 4, 4, 3))
    entropy = -np.mean(t * np.log(t) + (1 - t) * np.log(1 - t))
    loss, grad = T.bce_loss(t.copy(), t)
    assert loss == pytest.approx(entropy, rel=1e-12)
    assert np.abs(grad).max() < 1e-12
    for _ in range(5):
        p = np.clip(t + rng.normal(0, 0.02, t.shape), 0.01, 0.99)
        assert T.bce_loss(p, t)[0] > loss


def test_bce_shape_mismatch():
    with pytest.raises(ShapeError):
        T.bce_loss(np.full((1, 2, 2, 3), 0.5), np.full((1, 2, 2, 1), 0.5))


# -- init ------------------------------------------------------------------------------


def test_he_normal_std_formula():
    assert math.sqrt(2 / (3 * 3 * 16)) == pytest.approx(0.11785, abs=1e-5)


def test_he_normal_statistics():
    # 3x3x16 kernels with 70 outputs: fan_in 144, 10080 draws
    k = T.he_normal_init((3, 3, 16, 70), T.make_rng(0))
    draws = k.weights.ravel()[:10000].astype(np.float64)
    std = math.sqrt(2 / 144)
    assert abs(draws.std() - std) < 0.05 * std
    assert abs(draws.mean()) < 3 * std / math.sqrt(10000)
    assert not k.bias.any()


def test_he_normal_zero_fan_in():
    with pytest.raises(ConfigError):
        T.he_normal_init((3, 3, 0, 4), T.make_rng(0))


def test_rng_is_reproducible():
    a = T.make_rng(42, 1).standard_normal(5)
    b = T.make_rng(42, 1).standard_normal(5)
    c = T.make_rng(42, 2).standard_normal(5)
    assert a.tobytes() == b.tobytes()
    assert a.tobytes() != c.tobytes()


# -- adam ------------------------------------------------------------------------------


def test_adam_zero_gradient_leaves_params():
    p = [np.array([1.0, -2.0])]
    before = p[0].copy()
    T.adam_step(p, [np.zeros(2)], T.AdamState.zeros_like(p), 0.001)
    np.testing.assert_array_equal(p[0], before)


@pytest.mark.parametrize("g", [1.0, -3.0, 1e-2])
def test_adam_first_step_is_about_lr(g):
    p = [np.zeros(3)]
    T.adam_step(p, [np.full(3, g)], T.AdamState.zeros_like(p), 0.001)
    expected = 0.001 * abs(g) / (abs(g) + T.ADAM_EPSILON)
    np.testing.assert_allclose(np.abs(p[0]), expected, rtol=1e-12)
    np.testing.assert_allclose(np.abs(p[0]), 0.001, rtol=1e-4)


def test_adam_two_steps_scalar_quadratic():
    # f(x) = (x - 3)^2, hand-unrolled recurrence in python floats
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-7
    x, m, v = 0.5, 0.0, 0.0
    for t in (1, 2):
        g = 2 * (x - 3)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * (g * g)
        x = x - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)

    p = [np.array([0.5])]
    state = T.AdamState.zeros_like(p)
    for _ in range(2):
        T.adam_step(p, [2 * (p[0] - 3)], state, lr)
    assert state.t == 2
    assert p[0][0] == x


def test_adam_shape_mismatch():
    p = [np.zeros(3)]
    with pytest.raises(ShapeError):
        T.adam_step(p, [np.zeros(2)], T.AdamState.zeros_like(p), 0.001)


# -- gradient_check harness ---------------------------------------------------------------


def test_gradient_check_identity(rng):
    # zero up to the rounding of the difference quotient
    assert T.gradient_check(lambda x: x, lambda i, g: [g], [rng.standard_normal((1, 2, 2, 1))], rng) < 1e-10


def test_gradient_check_detects_wrong_gradient(rng):
    err = T.gradient_check(lambda x: x * x, lambda i, g: [g * i[0]], [rng.uniform(1, 2, (1, 2, 2, 1))], rng)
    assert err > 0.4


def test_gradient_check_non_finite(rng):
    with pytest.raises(NumericalError, match="coordinate"), np.errstate(invalid="ignore"):
        T.gradient_check(lambda x: np.log(x), lambda i, g: [g / i[0]], [np.array([[[[1e-4]]]])], rng)
