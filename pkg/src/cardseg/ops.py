"""Neural-network operators recorded on the autodiff tape.

Convolution is im2col + batched matmul; correctness is defined solely by
the naive direct-convolution oracle in the test suite, which this module
must match within 1e-5.  The im2col patches are rebuilt in backward rather
than kept alive, so tape memory stays proportional to activations.

Average pooling and bilinear resizing share one separable-matrix kernel:
both are y = Mh @ x @ Mw^T for per-axis matrices, which makes their
backward a pair of transposed matmuls.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import (
    ChannelMismatch,
    InputTooSmall,
    InvalidConfig,
    KernelTooLarge,
    ShapeMismatch,
    SpatialMismatch,
)
from .tensor import Tensor, record


def _pair(v) -> tuple:
    if isinstance(v, (tuple, list)):
        if len(v) != 2:
            raise InvalidConfig(f"expected int or pair, got {v!r}")
        return int(v[0]), int(v[1])
    return int(v), int(v)


@dataclass
class Conv2dParams:
    """Weights plus hyperparameters of one 2-D convolution.

    weight: (out_ch, in_ch // groups, kH, kW); bias: (out_ch,) or None.
    padding is "same" (zero padding, output ceil(H/stride)) or "valid".
    groups == in_ch is the depthwise case.
    """

    weight: Tensor
    bias: Optional[Tensor] = None
    stride: tuple = (1, 1)
    dilation: tuple = (1, 1)
    padding: str = "same"
    groups: int = 1

    def __post_init__(self):
        self.stride = _pair(self.stride)
        self.dilation = _pair(self.dilation)
        if self.padding not in ("same", "valid"):
            raise InvalidConfig(f"padding must be 'same' or 'valid', got {self.padding!r}")
        if min(self.stride) < 1 or min(self.dilation) < 1:
            raise InvalidConfig("stride and dilation must be positive")
        if self.groups < 1:
            raise InvalidConfig("groups must be positive")
        kh, kw = self.weight.shape[2], self.weight.shape[3]
        if kh % 2 == 0 or kw % 2 == 0:
            raise InvalidConfig(f"kernel dims must be odd, got {kh}x{kw}")


def _conv_geometry(H, W, kh, kw, stride, dilation, padding):
    sh, sw = stride
    dh, dw = dilation
    eff_h = (kh - 1) * dh + 1
    eff_w = (kw - 1) * dw + 1
    if padding == "same":
        Ho = -(-H // sh)
        Wo = -(-W // sw)
        pad_h = max(0, (Ho - 1) * sh + eff_h - H)
        pad_w = max(0, (Wo - 1) * sw + eff_w - W)
        pads = (pad_h // 2, pad_h - pad_h // 2, pad_w // 2, pad_w - pad_w // 2)
    else:
        if eff_h > H or eff_w > W:
            raise KernelTooLarge(
                f"effective kernel {eff_h}x{eff_w} exceeds input {H}x{W} with valid padding"
            )
        Ho = (H - eff_h) // sh + 1
        Wo = (W - eff_w) // sw + 1
        pads = (0, 0, 0, 0)
    return Ho, Wo, pads


def _patches(xp: np.ndarray, kh, kw, stride, dilation, Ho, Wo) -> np.ndarray:
    """(B, C, kh, kw, Ho, Wo) sliding view over the padded input; no copy."""
    B, C, Hp, Wp = xp.shape
    sB, sC, sH, sW = xp.strides
    sh, sw = stride
    dh, dw = dilation
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(B, C, kh, kw, Ho, Wo),
        strides=(sB, sC, dh * sH, dw * sW, sh * sH, sw * sW),
        writeable=False,
    )


def _tap(xp: np.ndarray, u, v, stride, dilation, Ho, Wo) -> np.ndarray:
    """Strided view of the padded input seen by kernel tap (u, v)."""
    sh, sw = stride
    dh, dw = dilation
    return xp[:, :, u * dh : u * dh + sh * (Ho - 1) + 1 : sh,
              v * dw : v * dw + sw * (Wo - 1) + 1 : sw]


def conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    """Grouped, dilated, strided 2-D convolution over (B, C, H, W).

    Three kernels behind one contract: 1x1 dense convs run as a plain
    matmul, depthwise convs as k^2 shift-and-scale passes, everything else
    through im2col + batched matmul.  Patches are rebuilt in backward so
    tape memory stays proportional to activations.
    """
    if x.ndim != 4:
        raise ShapeMismatch(f"conv2d expects (B,C,H,W), got {x.shape}")
    B, C, H, W = x.shape
    out_ch, cg, kh, kw = p.weight.shape
    G = p.groups
    if C != cg * G:
        raise ChannelMismatch(f"input has {C} channels, weight expects {cg * G} (groups={G})")
    if out_ch % G != 0:
        raise ChannelMismatch(f"out_ch {out_ch} not divisible by groups {G}")
    Og = out_ch // G
    Ho, Wo, (pt, pb, pl, pr) = _conv_geometry(H, W, kh, kw, p.stride, p.dilation, p.padding)
    if pt or pb or pl or pr:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    else:
        xp = x.data
    N = Ho * Wo
    weight, bias = p.weight, p.bias
    stride, dilation = p.stride, p.dilation
    x_needs = x.requires_grad

    if G == 1 and kh == 1 and kw == 1 and dilation == (1, 1):
        # pointwise: one matmul over flattened pixels
        xs = _tap(xp, 0, 0, stride, (1, 1), Ho, Wo)
        flat = np.ascontiguousarray(xs).reshape(B, C, N)
        w2d = weight.data.reshape(out_ch, C)
        out = np.matmul(w2d, flat).reshape(B, out_ch, Ho, Wo)
        if bias is not None:
            out = out + bias.data[None, :, None, None]

        def bwd(g):
            g3 = g.reshape(B, out_ch, N)
            gw = np.matmul(g3, flat.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
            gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
            gx = None
            if x_needs:
                gflat = np.matmul(w2d.T, g3).reshape(B, C, Ho, Wo)
                if stride == (1, 1):
                    gx = gflat
                else:
                    gxp = np.zeros_like(xp)
                    _tap(gxp, 0, 0, stride, (1, 1), Ho, Wo)[:] = gflat
                    gx = gxp
            if bias is not None:
                return gx, gw, gb
            return gx, gw

    elif G == C and Og == 1:
        # depthwise: k^2 scaled shifted adds, no patch materialization
        wd = weight.data[:, 0]  # (C, kh, kw)
        out = np.zeros((B, C, Ho, Wo), dtype=x.dtype)
        for u in range(kh):
            for v in range(kw):
                out += _tap(xp, u, v, stride, dilation, Ho, Wo) * wd[None, :, u, v, None, None]
        if bias is not None:
            out = out + bias.data[None, :, None, None]

        def bwd(g):
            gw = np.empty_like(weight.data)
            gxp = np.zeros_like(xp) if x_needs else None
            for u in range(kh):
                for v in range(kw):
                    xs = _tap(xp, u, v, stride, dilation, Ho, Wo)
                    gw[:, 0, u, v] = np.einsum("bchw,bchw->c", xs, g)
                    if x_needs:
                        _tap(gxp, u, v, stride, dilation, Ho, Wo)[:] += (
                            g * wd[None, :, u, v, None, None]
                        )
            gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
            gx = gxp[:, :, pt : pt + H, pl : pl + W] if x_needs else None
            if bias is not None:
                return gx, gw, gb
            return gx, gw

    else:
        ckk = cg * kh * kw
        cols = _patches(xp, kh, kw, stride, dilation, Ho, Wo).reshape(B, G, ckk, N)
        wm = weight.data.reshape(G, Og, ckk)
        out = np.matmul(wm, cols).reshape(B, out_ch, Ho, Wo)
        if bias is not None:
            out = out + bias.data[None, :, None, None]

        def bwd(g):
            g4 = g.reshape(B, G, Og, N)
            cols_b = _patches(xp, kh, kw, stride, dilation, Ho, Wo).reshape(B, G, ckk, N)
            gw = np.matmul(g4, cols_b.transpose(0, 1, 3, 2)).sum(axis=0).reshape(weight.shape)
            gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
            gx = None
            if x_needs:
                gcols = np.matmul(wm.transpose(0, 2, 1), g4).reshape(B, C, kh, kw, Ho, Wo)
                gxp = np.zeros_like(xp)
                for u in range(kh):
                    for v in range(kw):
                        _tap(gxp, u, v, stride, dilation, Ho, Wo)[:] += gcols[:, :, u, v]
                gx = gxp[:, :, pt : pt + H, pl : pl + W]
            if bias is not None:
                return gx, gw, gb
            return gx, gw

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record(inputs, out, bwd, "conv2d")


def separable_conv2d(x: Tensor, depthwise: Conv2dParams, pointwise: Conv2dParams) -> Tensor:
    """Depthwise spatial conv followed by a 1x1 cross-channel conv.

    Equals conv2d(conv2d(x, depthwise), pointwise) by definition.
    """
    C = x.shape[1]
    if depthwise.groups != C or depthwise.weight.shape[0] != C:
        raise ChannelMismatch("depthwise stage must have groups == out_ch == in_ch")
    if pointwise.weight.shape[2] != 1 or pointwise.weight.shape[3] != 1:
        raise InvalidConfig("pointwise stage must use a 1x1 kernel")
    if pointwise.weight.shape[1] * pointwise.groups != C:
        raise ChannelMismatch("pointwise in_ch must match depthwise out_ch")
    return conv2d(conv2d(x, depthwise), pointwise)


def _sep_apply(x: Tensor, mh: np.ndarray, mw: np.ndarray, op: str) -> Tensor:
    """y = Mh @ x @ Mw^T over the two spatial axes, with exact transpose backward.

    Accumulates in float64 and rounds once to the input dtype: the float64
    residual is far below one float32 ulp, so constant images survive a
    resize round-trip bit-exactly.
    """
    dtype = x.dtype
    out = np.matmul(np.matmul(mh, x.data), mw.T).astype(dtype, copy=False)

    def bwd(g):
        return (np.matmul(np.matmul(mh.T, g), mw).astype(dtype, copy=False),)

    return record((x,), out, bwd, op)


def pool_matrix(n: int, window: int, stride: int) -> np.ndarray:
    """Averaging matrix (n_out, n): rows are windows, divisor = true overlap."""
    n_out = -(-n // stride)
    m = np.zeros((n_out, n), dtype=np.float64)
    for i in range(n_out):
        lo = i * stride
        hi = min(lo + window, n)
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


def avg_pool2d(x: Tensor, window: int = 3, stride: int = 3) -> Tensor:
    """Window mean with zero-pad coverage of the remainder; edge windows
    divide by the true overlap count so borders are not darkened."""
    B, C, H, W = x.shape
    if H < window or W < window:
        raise InputTooSmall(f"avg_pool2d needs H,W >= {window}, got {H}x{W}")
    return _sep_apply(x, pool_matrix(H, window, stride), pool_matrix(W, window, stride), "avg_pool2d")


def resize_matrix(n_src: int, n_dst: int) -> np.ndarray:
    """Bilinear interpolation matrix (n_dst, n_src) with half-pixel centers."""
    m = np.zeros((n_dst, n_src), dtype=np.float64)
    if n_src == 1:
        m[:, 0] = 1.0
        return m
    src = (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5
    src = np.clip(src, 0.0, n_src - 1.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), n_src - 2)
    frac = src - i0
    rows = np.arange(n_dst)
    m[rows, i0] = 1.0 - frac
    m[rows, i0 + 1] = frac
    return m


def bilinear_resize(x: Tensor, size: tuple) -> Tensor:
    """Resize (B,C,H,W) to (B,C,H2,W2); exact identity when sizes match."""
    H2, W2 = int(size[0]), int(size[1])
    if H2 < 1 or W2 < 1:
        raise ShapeMismatch(f"target size must be positive, got {(H2, W2)}")
    B, C, H, W = x.shape
    if (H2, W2) == (H, W):
        return x
    return _sep_apply(x, resize_matrix(H, H2), resize_matrix(W, W2), "bilinear_resize")


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Stack tensors along the channel axis in argument order."""
    if len(xs) == 0:
        raise ShapeMismatch("concat_channels needs at least one tensor")
    if len(xs) == 1:
        return xs[0]
    b, _, h, w = xs[0].shape
    for t in xs[1:]:
        if t.shape[0] != b or t.shape[2] != h or t.shape[3] != w:
            raise SpatialMismatch(f"cannot concat {t.shape} with batch/spatial ({b},*,{h},{w})")
    out = np.concatenate([t.data for t in xs], axis=1)
    splits = np.cumsum([t.shape[1] for t in xs])[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(part) for part in np.split(g, splits, axis=1))

    return record(tuple(xs), out, bwd, "concat_channels")


@dataclass
class BatchNormState:
    """Per-channel affine normalization state.

    gamma/beta are learnable; running_mean/running_var are buffers updated
    by a single writer (the training step) with the given momentum.
    """

    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    momentum: float = 0.9
    epsilon: float = 1e-5

    @staticmethod
    def create(channels: int, dtype=np.float32) -> "BatchNormState":
        return BatchNormState(
            gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            running_mean=Tensor(np.zeros(channels, dtype=dtype)),
            running_var=Tensor(np.ones(channels, dtype=dtype)),
        )


def batch_norm(x: Tensor, s: BatchNormState, training: bool) -> Tensor:
    B, C, H, W = x.shape
    if s.gamma.shape != (C,):
        raise ChannelMismatch(f"batch_norm state has {s.gamma.shape[0]} channels, input has {C}")
    if training:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        mom = s.momentum
        s.running_mean.data = (mom * s.running_mean.data + (1.0 - mom) * mean).astype(
            s.running_mean.dtype
        )
        s.running_var.data = (mom * s.running_var.data + (1.0 - mom) * var).astype(
            s.running_var.dtype
        )
    else:
        mean = s.running_mean.data.astype(x.dtype)
        var = s.running_var.data.astype(x.dtype)
    inv = 1.0 / np.sqrt(var + s.epsilon)
    xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]
    out = s.gamma.data[None, :, None, None] * xhat + s.beta.data[None, :, None, None]

    gamma = s.gamma
    x_needs = x.requires_grad

    def bwd(g):
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gx = None
        if x_needs:
            scale = (gamma.data * inv)[None, :, None, None]
            if training:
                # gradient through the batch statistics
                gx = scale * (
                    g
                    - g.mean(axis=(0, 2, 3), keepdims=True)
                    - xhat * (g * xhat).mean(axis=(0, 2, 3), keepdims=True)
                )
            else:
                gx = scale * g
        return gx, ggamma, gbeta

    return record((x, s.gamma, s.beta), out, bwd, "batch_norm")


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def bwd(g):
        return (g * (x.data > 0),)

    return record((x,), out, bwd, "relu")


def softmax_channels(x: Tensor) -> Tensor:
    """Per-pixel distribution over the channel axis, max-shifted for stability."""
    if x.shape[1] < 2:
        raise ChannelMismatch("softmax_channels needs at least 2 channels")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return record((x,), p, bwd, "softmax_channels")
