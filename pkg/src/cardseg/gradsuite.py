"""Finite-difference gradient verification suite for every differentiable op.

Each op is checked on at least five random small shapes in float64 with
central differences (h = 1e-3), tolerance 1e-4 on the max relative error.
Full-model checks run at pinned inputs pre-verified to sit away from relu
kinks, where central differences are mathematically valid; per-op checks
use unconstrained random draws (relu draws keep |x| >= 0.1 for the same
reason).
"""
from __future__ import annotations

import numpy as np

from .losses import combined_loss, gdl, one_hot
from .model import CSegNet, ModelConfig
from .ops import (
    BatchNormState,
    Conv2dParams,
    avg_pool2d,
    batch_norm,
    bilinear_resize,
    conv2d,
    relu,
    separable_conv2d,
    softmax_channels,
)
from .tensor import Tensor, grad_check

TOLERANCE = 1e-4
STEP = 1e-3

# (config kwargs, input shape, model seed, pinned input seed); see the
# model test module for the kink-free selection procedure
MODEL_CASES = [
    (dict(num_classes=3, stages=2, base_channels=2, input_size=(8, 8)), (1, 1, 8, 8), 0, 1004),
    (dict(num_classes=3, stages=2, base_channels=2, input_size=(8, 8)), (2, 1, 8, 8), 1, 1005),
    (dict(num_classes=4, stages=3, base_channels=2, input_size=(12, 12)), (1, 1, 12, 12), 2, 1010),
    (dict(num_classes=2, stages=2, base_channels=3, input_size=(12, 12)), (1, 1, 12, 12), 3, 1020),
    (dict(num_classes=4, stages=2, base_channels=4, input_size=(8, 8)), (2, 1, 8, 8), 4, 1052),
]


def _shapes(rng, n=5, cmin=2, cmax=4, smin=4, smax=8):
    out = []
    for _ in range(n):
        out.append(
            (int(rng.integers(1, 3)), int(rng.integers(cmin, cmax + 1)),
             int(rng.integers(smin, smax)), int(rng.integers(smin, smax)))
        )
    return out


def _check_conv2d(rng):
    worst = 0.0
    for i, shape in enumerate(_shapes(rng)):
        b, c, h, w = shape
        cout = int(rng.integers(1, 4))
        stride = (2, 1) if i % 2 else (1, 1)
        weight = Tensor(rng.normal(size=(cout, c, 3, 3)), dtype=np.float64, requires_grad=True)
        bias = Tensor(rng.normal(size=(cout,)), dtype=np.float64, requires_grad=True)
        x0 = rng.normal(size=shape)

        def p(wt):
            return Conv2dParams(weight=wt, bias=bias, stride=stride, padding="same")

        worst = max(worst, grad_check(lambda t: conv2d(t, p(weight)).sum(),
                                      Tensor(x0, dtype=np.float64), h=STEP))
        worst = max(worst, grad_check(lambda wt: conv2d(Tensor(x0, dtype=np.float64), p(wt)).sum(),
                                      weight, h=STEP))
    # depthwise dilated branch
    x0 = rng.normal(size=(1, 3, 7, 7))
    weight = Tensor(rng.normal(size=(3, 1, 3, 3)), dtype=np.float64, requires_grad=True)
    pdw = Conv2dParams(weight=weight, dilation=(2, 2), groups=3, padding="same")
    worst = max(worst, grad_check(lambda t: conv2d(t, pdw).sum(),
                                  Tensor(x0, dtype=np.float64), h=STEP))
    return worst


def _check_separable(rng):
    worst = 0.0
    for shape in _shapes(rng):
        b, c, h, w = shape
        dw = Conv2dParams(weight=Tensor(rng.normal(size=(c, 1, 3, 3)), dtype=np.float64),
                          groups=c)
        pw = Conv2dParams(weight=Tensor(rng.normal(size=(2, c, 1, 1)), dtype=np.float64))
        worst = max(worst, grad_check(
            lambda t: (separable_conv2d(t, dw, pw) * separable_conv2d(t, dw, pw)).sum(),
            Tensor(rng.normal(size=shape), dtype=np.float64), h=STEP))
    return worst


def _check_avg_pool(rng):
    worst = 0.0
    for shape in _shapes(rng):
        worst = max(worst, grad_check(
            lambda t: (avg_pool2d(t) * avg_pool2d(t)).sum(),
            Tensor(rng.normal(size=shape), dtype=np.float64), h=STEP))
    return worst


def _check_resize(rng):
    worst = 0.0
    for shape in _shapes(rng):
        target = (int(rng.integers(2, 9)), int(rng.integers(2, 9)))
        worst = max(worst, grad_check(
            lambda t: (bilinear_resize(t, target) * bilinear_resize(t, target)).sum(),
            Tensor(rng.normal(size=shape), dtype=np.float64), h=STEP))
    return worst


def _check_batch_norm(rng):
    worst = 0.0
    for shape in _shapes(rng):
        c = shape[1]

        def f(t):
            s = BatchNormState.create(c, dtype=np.float64)
            y = batch_norm(t, s, training=True)
            return (y * y * y).sum()

        worst = max(worst, grad_check(f, Tensor(rng.normal(size=shape), dtype=np.float64),
                                      h=STEP))
    return worst


def _check_relu(rng):
    worst = 0.0
    for shape in _shapes(rng):
        data = rng.uniform(0.1, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
        worst = max(worst, grad_check(lambda t: (relu(t) * relu(t)).sum(),
                                      Tensor(data, dtype=np.float64), h=STEP))
    return worst


def _check_softmax(rng):
    worst = 0.0
    for shape in _shapes(rng):
        target = rng.normal(size=shape)

        def f(t):
            d = softmax_channels(t) - Tensor(target, dtype=np.float64)
            return (d * d).sum()

        worst = max(worst, grad_check(f, Tensor(rng.normal(size=shape), dtype=np.float64),
                                      h=STEP))
    return worst


def _check_gdl(rng):
    worst = 0.0
    for shape in _shapes(rng, cmin=2, cmax=4, smin=4, smax=7):
        b, c, h, w = shape
        target = one_hot(rng.integers(0, c, size=(b, h, w)), c)
        worst = max(worst, grad_check(
            lambda t: gdl(softmax_channels(t), target),
            Tensor(rng.normal(size=shape), dtype=np.float64), h=STEP))
    return worst


def _check_combined_loss(rng):
    worst = 0.0
    for shape in _shapes(rng, cmin=2, cmax=3, smin=4, smax=7):
        b, c, h, w = shape
        target = one_hot(rng.integers(0, c, size=(b, h, w)), c)
        aux = Tensor(rng.normal(size=(b, c, max(h // 2, 1), max(w // 2, 1))))
        worst = max(worst, grad_check(
            lambda t: combined_loss(t, [aux], target, [1.0, 0.4]),
            Tensor(rng.normal(size=shape), dtype=np.float64), h=STEP))
    return worst


def _check_model():
    worst = 0.0
    for cfg_kw, shape, model_seed, input_seed in MODEL_CASES:
        model = CSegNet(ModelConfig(**cfg_kw))
        params = model.init_params(model_seed, dtype=np.float64)

        def f(t):
            main, aux = model.forward(params, t, training=True)
            s = (main * main).sum()
            for a in aux:
                s = s + (a * a).sum()
            return s * 0.01

        x = np.random.default_rng(input_seed).normal(size=shape)
        worst = max(worst, grad_check(f, Tensor(x, dtype=np.float64), h=STEP))
    return worst


def run_grad_suite(seed: int = 20240101):
    """[(op name, max relative error)] over the whole differentiable op set."""
    checks = [
        ("conv2d", _check_conv2d),
        ("separable_conv2d", _check_separable),
        ("avg_pool2d", _check_avg_pool),
        ("bilinear_resize", _check_resize),
        ("batch_norm", _check_batch_norm),
        ("relu", _check_relu),
        ("softmax_channels", _check_softmax),
        ("gdl", _check_gdl),
        ("combined_loss", _check_combined_loss),
        ("model_forward", lambda rng: _check_model()),
    ]
    results = []
    for name, fn in checks:
        rng = np.random.default_rng(seed)
        results.append((name, float(fn(rng))))
    return results
