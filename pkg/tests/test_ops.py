import numpy as np
import pytest

from cardseg import errors
from cardseg.ops import (
    BatchNormState,
    Conv2dParams,
    avg_pool2d,
    batch_norm,
    bilinear_resize,
    concat_channels,
    conv2d,
    relu,
    resize_matrix,
    separable_conv2d,
    softmax_channels,
)
from cardseg.tensor import Tape, Tensor, grad_check

from reference import bilinear_scalar, naive_conv2d


def _t(a, **kw):
    return Tensor(np.asarray(a), **kw)


# ---------------------------------------------------------------- conv2d

def test_conv_identity_kernel(rng):
    x = _t(rng.normal(size=(2, 3, 7, 7)).astype(np.float32))
    w = np.zeros((3, 3, 3, 3), dtype=np.float32)
    for c in range(3):
        w[c, c, 1, 1] = 1.0
    out = conv2d(x, Conv2dParams(weight=_t(w)))
    np.testing.assert_array_equal(out.data, x.data)


def test_conv_dilated_ones_sums_field():
    x = _t(np.ones((1, 1, 5, 5), dtype=np.float32))
    w = _t(np.ones((1, 1, 3, 3), dtype=np.float32))
    out = conv2d(x, Conv2dParams(weight=w, dilation=(2, 2), padding="valid"))
    assert out.shape == (1, 1, 1, 1)
    assert out.item() == 9.0


def test_conv_matches_naive_oracle(rng):
    for trial in range(50):
        g = int(rng.integers(0, 2))
        cin = int(rng.integers(1, 5))
        groups = cin if g else 1
        cout = int(rng.integers(1, 5)) * groups
        k = int(rng.choice([1, 3]))
        stride = int(rng.integers(1, 3))
        dilation = int(rng.integers(1, 3))
        padding = str(rng.choice(["same", "valid"]))
        eff = (k - 1) * dilation + 1
        H = int(rng.integers(eff, eff + 6))
        W = int(rng.integers(eff, eff + 6))
        B = int(rng.integers(1, 3))
        x = rng.normal(size=(B, cin, H, W)).astype(np.float32)
        w = rng.normal(size=(cout, cin // groups, k, k)).astype(np.float32)
        b = rng.normal(size=(cout,)).astype(np.float32)
        out = conv2d(
            _t(x),
            Conv2dParams(weight=_t(w), bias=_t(b), stride=stride, dilation=dilation,
                         padding=padding, groups=groups),
        )
        ref = naive_conv2d(x, w, b, (stride, stride), (dilation, dilation), padding, groups)
        assert out.shape == ref.shape, f"trial {trial}"
        np.testing.assert_allclose(out.data, ref, atol=1e-5)


def test_conv_channel_mismatch():
    x = _t(np.ones((1, 3, 5, 5)))
    with pytest.raises(errors.ChannelMismatch):
        conv2d(x, Conv2dParams(weight=_t(np.ones((2, 4, 3, 3)))))


def test_conv_kernel_too_large():
    x = _t(np.ones((1, 1, 3, 3)))
    with pytest.raises(errors.KernelTooLarge):
        conv2d(x, Conv2dParams(weight=_t(np.ones((1, 1, 3, 3))), dilation=(2, 2), padding="valid"))


def test_conv_dilation_touch_extent(rng):
    # a one-hot kernel probe must influence exactly (k-1)*d+1 input extent
    for d in (1, 2):
        H = 15
        x = np.zeros((1, 1, H, H), dtype=np.float32)
        x[0, 0, 7, 7] = 1.0
        w = _t(np.ones((1, 1, 3, 3), dtype=np.float32))
        out = conv2d(_t(x), Conv2dParams(weight=w, dilation=(d, d))).data[0, 0]
        ys, xs = np.nonzero(out)
        extent = (3 - 1) * d + 1
        assert ys.max() - ys.min() + 1 == extent
        assert xs.max() - xs.min() + 1 == extent


def test_separable_equals_composition(rng):
    cin, cout = 4, 6
    x = rng.normal(size=(2, cin, 9, 9)).astype(np.float32)
    dw = Conv2dParams(weight=_t(rng.normal(size=(cin, 1, 3, 3)).astype(np.float32)), groups=cin)
    pw = Conv2dParams(weight=_t(rng.normal(size=(cout, cin, 1, 1)).astype(np.float32)))
    out = separable_conv2d(_t(x), dw, pw)
    ref = conv2d(conv2d(_t(x), dw), pw)
    np.testing.assert_array_equal(out.data, ref.data)


def test_separable_identity(rng):
    cin = 3
    x = rng.normal(size=(1, cin, 6, 6)).astype(np.float32)
    dw_w = np.zeros((cin, 1, 3, 3), dtype=np.float32)
    dw_w[:, 0, 1, 1] = 1.0
    pw_w = np.eye(cin, dtype=np.float32).reshape(cin, cin, 1, 1)
    out = separable_conv2d(_t(x), Conv2dParams(weight=_t(dw_w), groups=cin),
                           Conv2dParams(weight=_t(pw_w)))
    np.testing.assert_array_equal(out.data, x)


def test_separable_parameter_count():
    # in=8, out=16, k=3: depthwise 8*9 + pointwise 8*16 = 200 vs dense 1152
    cin, cout, k = 8, 16, 3
    dw = cin * k * k
    pw = cin * cout
    assert dw + pw == 200
    assert cout * cin * k * k == 1152


# ---------------------------------------------------------------- pooling

def test_avg_pool_ones():
    out = avg_pool2d(_t(np.ones((1, 1, 6, 6), dtype=np.float32)))
    assert out.shape == (1, 1, 2, 2)
    np.testing.assert_array_equal(out.data, np.ones((1, 1, 2, 2), dtype=np.float32))


def test_avg_pool_constant_with_remainder():
    # 7x7 input: edge windows overlap only partially but stay constant
    out = avg_pool2d(_t(np.full((1, 2, 7, 7), 3.5, dtype=np.float32)))
    assert out.shape == (1, 2, 3, 3)
    np.testing.assert_allclose(out.data, 3.5, rtol=1e-6)


def test_avg_pool_mean_of_nine():
    x = np.arange(1.0, 10.0, dtype=np.float32).reshape(1, 1, 3, 3)
    out = avg_pool2d(_t(x))
    assert out.shape == (1, 1, 1, 1)
    assert out.item() == pytest.approx(5.0)


def test_avg_pool_too_small():
    with pytest.raises(errors.InputTooSmall):
        avg_pool2d(_t(np.ones((1, 1, 2, 5))))


# ---------------------------------------------------------------- resize

def test_resize_same_size_is_bit_equal(rng):
    x = _t(rng.normal(size=(2, 3, 5, 5)).astype(np.float32))
    out = bilinear_resize(x, (5, 5))
    assert out is x


def test_resize_constant(rng):
    x = _t(np.full((1, 2, 4, 6), 2.25, dtype=np.float32))
    out = bilinear_resize(x, (9, 5))
    np.testing.assert_allclose(out.data, 2.25, rtol=1e-6)


def test_resize_matches_scalar_oracle(rng):
    img = np.array([[0.0, 1.0], [2.0, 3.0]])
    out = bilinear_resize(_t(img.reshape(1, 1, 2, 2)), (4, 4))
    ref = bilinear_scalar(img, 4, 4)
    np.testing.assert_allclose(out.data[0, 0], ref, atol=1e-6)
    for _ in range(5):
        h, w = rng.integers(1, 7, size=2)
        h2, w2 = rng.integers(1, 9, size=2)
        img = rng.normal(size=(int(h), int(w)))
        out = bilinear_resize(_t(img.reshape(1, 1, int(h), int(w))), (int(h2), int(w2)))
        ref = bilinear_scalar(img, int(h2), int(w2))
        np.testing.assert_allclose(out.data[0, 0], ref, atol=1e-6)


def test_resize_round_trip_constant_exact():
    x = _t(np.full((1, 1, 6, 6), 1.5, dtype=np.float32))
    up = bilinear_resize(x, (13, 11))
    back = bilinear_resize(up, (6, 6))
    np.testing.assert_array_equal(back.data, x.data)


def test_resize_matrix_rows_sum_to_one():
    for n, m in [(3, 7), (7, 3), (1, 4), (5, 5)]:
        mat = resize_matrix(n, m)
        np.testing.assert_allclose(mat.sum(axis=1), 1.0, atol=1e-12)


# ---------------------------------------------------------------- concat

def test_concat_single_passthrough(rng):
    x = _t(rng.normal(size=(1, 2, 3, 3)))
    assert concat_channels([x]) is x


def test_concat_order_and_shape(rng):
    a = rng.normal(size=(2, 2, 4, 4)).astype(np.float32)
    b = rng.normal(size=(2, 3, 4, 4)).astype(np.float32)
    out = concat_channels([_t(a), _t(b)])
    assert out.shape == (2, 5, 4, 4)
    np.testing.assert_array_equal(out.data[:, :2], a)
    np.testing.assert_array_equal(out.data[:, 2:], b)


def test_concat_gradient_slices_back(rng):
    a = Tensor(rng.normal(size=(1, 2, 3, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(1, 4, 3, 3)), requires_grad=True)
    with Tape() as tape:
        y = (concat_channels([a, b]) * 2.0).sum()
    grads = tape.backward(y)
    assert grads[a].shape == a.shape
    assert grads[b].shape == b.shape
    np.testing.assert_array_equal(grads[a], np.full(a.shape, 2.0))


def test_concat_spatial_mismatch():
    with pytest.raises(errors.SpatialMismatch):
        concat_channels([_t(np.ones((1, 1, 3, 3))), _t(np.ones((1, 1, 4, 3)))])


# ---------------------------------------------------------------- batch norm

def test_batch_norm_normalizes(rng):
    x = _t(rng.normal(2.0, 3.0, size=(4, 3, 6, 6)).astype(np.float32))
    s = BatchNormState.create(3)
    out = batch_norm(x, s, training=True)
    mean = out.data.mean(axis=(0, 2, 3))
    var = out.data.var(axis=(0, 2, 3))
    np.testing.assert_allclose(mean, 0.0, atol=1e-4)
    np.testing.assert_allclose(var, 1.0, atol=1e-3)


def test_batch_norm_gamma_zero_gives_beta(rng):
    x = _t(rng.normal(size=(2, 2, 4, 4)).astype(np.float32))
    s = BatchNormState.create(2)
    s.gamma.data = np.zeros(2, dtype=np.float32)
    s.beta.data = np.array([1.5, -0.5], dtype=np.float32)
    out = batch_norm(x, s, training=True)
    np.testing.assert_allclose(out.data[:, 0], 1.5, atol=1e-6)
    np.testing.assert_allclose(out.data[:, 1], -0.5, atol=1e-6)


def test_batch_norm_running_stats_update(rng):
    x = rng.normal(1.0, 2.0, size=(8, 2, 5, 5)).astype(np.float32)
    s = BatchNormState.create(2)
    batch_norm(_t(x), s, training=True)
    expected_mean = 0.9 * 0.0 + 0.1 * x.mean(axis=(0, 2, 3))
    np.testing.assert_allclose(s.running_mean.data, expected_mean, atol=1e-6)
    # eval mode must use the stored statistics
    y = batch_norm(_t(x), s, training=False)
    ref = (x - s.running_mean.data[None, :, None, None]) / np.sqrt(
        s.running_var.data[None, :, None, None] + s.epsilon
    )
    np.testing.assert_allclose(y.data, ref, atol=1e-5)


# ---------------------------------------------------------------- relu / softmax

def test_relu_basic():
    out = relu(_t([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])


def test_softmax_uniform_on_equal_logits():
    x = _t(np.zeros((1, 4, 3, 3), dtype=np.float32))
    out = softmax_channels(x)
    np.testing.assert_allclose(out.data, 0.25, atol=1e-7)


def test_softmax_sums_to_one(rng):
    x = _t(rng.normal(size=(2, 4, 5, 5)).astype(np.float32) * 10)
    out = softmax_channels(x)
    np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-5)


def test_softmax_shift_invariance(rng):
    x = rng.normal(size=(1, 3, 4, 4)).astype(np.float64)
    shift = rng.normal(size=(1, 1, 4, 4)).astype(np.float64)
    p1 = softmax_channels(_t(x)).data
    p2 = softmax_channels(_t(x + shift)).data
    np.testing.assert_allclose(p1, p2, atol=1e-6)


# ---------------------------------------------------------------- gradients

def _gc_shapes(rng, n=5, chans=(2, 4)):
    shapes = []
    for _ in range(n):
        b = int(rng.integers(1, 3))
        c = int(rng.choice(chans))
        h = int(rng.integers(4, 8))
        w = int(rng.integers(4, 8))
        shapes.append((b, c, h, w))
    return shapes


def test_grad_conv2d(rng):
    for shape in _gc_shapes(rng):
        b, c, h, w = shape
        cout = int(rng.integers(1, 4))
        weight = Tensor(rng.normal(size=(cout, c, 3, 3)), dtype=np.float64, requires_grad=True)
        bias = Tensor(rng.normal(size=(cout,)), dtype=np.float64, requires_grad=True)
        x0 = rng.normal(size=shape)
        p = lambda wt: Conv2dParams(weight=wt, bias=bias, stride=(2, 1), padding="same")
        err = grad_check(lambda t: conv2d(t, p(weight)).sum(), Tensor(x0, dtype=np.float64))
        assert err < 1e-4
        err_w = grad_check(
            lambda wt: conv2d(Tensor(x0, dtype=np.float64), p(wt)).sum(), weight
        )
        assert err_w < 1e-4


def test_grad_conv2d_depthwise_dilated(rng):
    x0 = rng.normal(size=(1, 3, 7, 7))
    weight = Tensor(rng.normal(size=(3, 1, 3, 3)), dtype=np.float64, requires_grad=True)
    p = Conv2dParams(weight=weight, dilation=(2, 2), groups=3, padding="same")
    err = grad_check(lambda t: conv2d(t, p).sum(), Tensor(x0, dtype=np.float64))
    assert err < 1e-4


def test_grad_separable(rng):
    c = 3
    dw = Conv2dParams(weight=Tensor(rng.normal(size=(c, 1, 3, 3)), dtype=np.float64), groups=c)
    pw = Conv2dParams(weight=Tensor(rng.normal(size=(2, c, 1, 1)), dtype=np.float64))
    err = grad_check(
        lambda t: (separable_conv2d(t, dw, pw) * separable_conv2d(t, dw, pw)).sum(),
        Tensor(rng.normal(size=(1, c, 6, 6)), dtype=np.float64),
    )
    assert err < 1e-4


def test_grad_avg_pool(rng):
    for shape in _gc_shapes(rng):
        err = grad_check(
            lambda t: (avg_pool2d(t) * avg_pool2d(t)).sum(),
            Tensor(rng.normal(size=shape), dtype=np.float64),
        )
        assert err < 1e-4


def test_grad_bilinear_resize(rng):
    for shape in _gc_shapes(rng):
        b, c, h, w = shape
        target = (int(rng.integers(2, 9)), int(rng.integers(2, 9)))
        err = grad_check(
            lambda t: (bilinear_resize(t, target) * bilinear_resize(t, target)).sum(),
            Tensor(rng.normal(size=shape), dtype=np.float64),
        )
        assert err < 1e-4


def test_grad_batch_norm(rng):
    x0 = rng.normal(size=(2, 4, 5, 5))

    def f(t):
        s = BatchNormState.create(4, dtype=np.float64)
        y = batch_norm(t, s, training=True)
        return (y * y * y).sum()

    err = grad_check(f, Tensor(x0, dtype=np.float64))
    assert err < 1e-4


def test_grad_batch_norm_gamma_beta(rng):
    x0 = Tensor(rng.normal(size=(2, 3, 4, 4)), dtype=np.float64)

    def f(gb):
        s = BatchNormState.create(3, dtype=np.float64)
        s.gamma = gb
        y = batch_norm(x0, s, training=True)
        return (y * y).sum()

    err = grad_check(f, Tensor(rng.normal(size=(3,)), dtype=np.float64))
    assert err < 1e-4


def test_grad_relu(rng):
    for shape in _gc_shapes(rng):
        data = rng.uniform(0.1, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
        err = grad_check(lambda t: (relu(t) * relu(t)).sum(), Tensor(data, dtype=np.float64))
        assert err < 1e-4


def test_grad_softmax(rng):
    for shape in _gc_shapes(rng):
        target = rng.normal(size=shape)
        err = grad_check(
            lambda t: ((softmax_channels(t) - Tensor(target, dtype=np.float64))
                       * (softmax_channels(t) - Tensor(target, dtype=np.float64))).sum(),
            Tensor(rng.normal(size=shape), dtype=np.float64),
        )
        assert err < 1e-4
