"""CSegNet: a U-net variant with dilated-pyramid-pooling skip connections.

Three parts: a multi-scale stem (three strided 3x3 convolutions resampled
back to full resolution and fused), an Xception-style separable-conv
encoder, and a decoder with per-stage auxiliary heads for deep supervision.
In the "csegnet" variant every encoder->decoder shortcut (including the
bottleneck) passes through one dilated-pyramid-pooling block; the
"unet_baseline" variant keeps identity shortcuts and is otherwise
identical, which makes the two directly comparable in ablations.

Parameters live in a flat name->Tensor map whose key set is a pure
function of the configuration, so checkpoints round-trip exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import InvalidConfig, ShapeMismatch
from .ops import (
    BatchNormState,
    Conv2dParams,
    avg_pool2d,
    batch_norm,
    bilinear_resize,
    concat_channels,
    conv2d,
    relu,
    separable_conv2d,
    softmax_channels,
)
from .tensor import Tensor

CHANNEL_CAP_FACTOR = 16


@dataclass
class ModelConfig:
    num_classes: int = 4
    stages: int = 5
    base_channels: int = 16
    stem_strides: tuple = (1, 2, 4)
    input_size: tuple = (256, 256)
    variant: str = "csegnet"
    deep_supervision_weights: Optional[tuple] = None

    def __post_init__(self):
        self.stem_strides = tuple(int(s) for s in self.stem_strides)
        self.input_size = tuple(int(s) for s in self.input_size)
        if self.deep_supervision_weights is not None:
            self.deep_supervision_weights = tuple(float(w) for w in self.deep_supervision_weights)

    def validate(self) -> None:
        if self.stages < 2:
            raise InvalidConfig(f"stages must be >= 2, got {self.stages}")
        if self.num_classes < 2:
            raise InvalidConfig(f"num_classes must be >= 2, got {self.num_classes}")
        if self.base_channels < 1:
            raise InvalidConfig(f"base_channels must be positive, got {self.base_channels}")
        if self.variant not in ("csegnet", "unet_baseline"):
            raise InvalidConfig(f"unknown variant {self.variant!r}")
        h, w = self.input_size
        down = 2 ** (self.stages - 1)
        if h % down or w % down:
            raise InvalidConfig(f"input size {self.input_size} not divisible by 2^(stages-1)={down}")
        stem = max(self.stem_strides)
        if h % stem or w % stem:
            raise InvalidConfig(f"input size {self.input_size} not divisible by max stem stride {stem}")
        if self.variant == "csegnet" and min(h, w) // down < 3:
            raise InvalidConfig(
                f"bottleneck {min(h, w) // down}x{min(h, w) // down} too small for the "
                "3x3 pyramid pooling; use fewer stages or a larger input"
            )
        if len(self.head_weights()) != self.stages:
            raise InvalidConfig(
                f"need {self.stages} supervision weights (1 main + {self.stages - 1} aux), "
                f"got {len(self.head_weights())}"
            )

    def stage_channels(self) -> list:
        cap = CHANNEL_CAP_FACTOR * self.base_channels
        return [min(self.base_channels * 2**s, cap) for s in range(self.stages)]

    def head_weights(self) -> tuple:
        # aux weights above ~0.1 starve the smallest class at desk scale
        # when the pyramid skips are in play
        if self.deep_supervision_weights is not None:
            return self.deep_supervision_weights
        return (1.0,) + tuple(0.1 / 2**i for i in range(self.stages - 1))

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "stages": self.stages,
            "base_channels": self.base_channels,
            "stem_strides": list(self.stem_strides),
            "input_size": list(self.input_size),
            "variant": self.variant,
            "deep_supervision_weights": (
                None if self.deep_supervision_weights is None
                else list(self.deep_supervision_weights)
            ),
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        dsw = d.get("deep_supervision_weights")
        return ModelConfig(
            num_classes=int(d["num_classes"]),
            stages=int(d["stages"]),
            base_channels=int(d["base_channels"]),
            stem_strides=tuple(d["stem_strides"]),
            input_size=tuple(d["input_size"]),
            variant=d["variant"],
            deep_supervision_weights=None if dsw is None else tuple(dsw),
        )


# ------------------------------------------------------------------ layers

class _Conv:
    def __init__(self, name, in_ch, out_ch, k=3, stride=1, dilation=1, groups=1, bias=True):
        self.name = name
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.k = k
        self.stride = stride
        self.dilation = dilation
        self.groups = groups
        self.bias = bias

    def init(self, params, rng, dtype):
        fan_in = (self.in_ch // self.groups) * self.k * self.k
        limit = math.sqrt(6.0 / fan_in)
        w = rng.uniform(-limit, limit, size=(self.out_ch, self.in_ch // self.groups, self.k, self.k))
        params[self.name + ".weight"] = Tensor(w.astype(dtype), requires_grad=True)
        if self.bias:
            params[self.name + ".bias"] = Tensor(np.zeros(self.out_ch, dtype=dtype), requires_grad=True)

    def conv_params(self, params) -> Conv2dParams:
        return Conv2dParams(
            weight=params[self.name + ".weight"],
            bias=params[self.name + ".bias"] if self.bias else None,
            stride=self.stride,
            dilation=self.dilation,
            groups=self.groups,
        )

    def __call__(self, params, x, training=False):
        return conv2d(x, self.conv_params(params))

    def learnable_count(self):
        n = self.out_ch * (self.in_ch // self.groups) * self.k * self.k
        return n + (self.out_ch if self.bias else 0)


class _BatchNorm:
    def __init__(self, name, ch):
        self.name = name
        self.ch = ch

    def init(self, params, rng, dtype):
        params[self.name + ".gamma"] = Tensor(np.ones(self.ch, dtype=dtype), requires_grad=True)
        params[self.name + ".beta"] = Tensor(np.zeros(self.ch, dtype=dtype), requires_grad=True)
        params[self.name + ".running_mean"] = Tensor(np.zeros(self.ch, dtype=dtype))
        params[self.name + ".running_var"] = Tensor(np.ones(self.ch, dtype=dtype))

    def state(self, params) -> BatchNormState:
        return BatchNormState(
            gamma=params[self.name + ".gamma"],
            beta=params[self.name + ".beta"],
            running_mean=params[self.name + ".running_mean"],
            running_var=params[self.name + ".running_var"],
        )

    def __call__(self, params, x, training=False):
        return batch_norm(x, self.state(params), training)

    def learnable_count(self):
        return 2 * self.ch


class _ConvBnRelu:
    def __init__(self, name, in_ch, out_ch, k=3, stride=1, dilation=1):
        self.conv = _Conv(name + ".conv", in_ch, out_ch, k=k, stride=stride, dilation=dilation, bias=False)
        self.bn = _BatchNorm(name + ".bn", out_ch)
        self.children = [self.conv, self.bn]

    def __call__(self, params, x, training=False):
        return relu(self.bn(params, self.conv(params, x), training))


class _SepConv:
    """Depthwise 3x3 (optionally strided) followed by a pointwise 1x1."""

    def __init__(self, name, in_ch, out_ch, stride=1):
        self.dw = _Conv(name + ".dw", in_ch, in_ch, k=3, stride=stride, groups=in_ch, bias=False)
        self.pw = _Conv(name + ".pw", in_ch, out_ch, k=1, bias=False)
        self.children = [self.dw, self.pw]

    def __call__(self, params, x, training=False):
        return separable_conv2d(x, self.dw.conv_params(params), self.pw.conv_params(params))


class _SepBnRelu:
    def __init__(self, name, in_ch, out_ch, stride=1):
        self.sep = _SepConv(name, in_ch, out_ch, stride=stride)
        self.bn = _BatchNorm(name + ".bn", out_ch)
        self.children = [self.sep, self.bn]

    def __call__(self, params, x, training=False):
        return relu(self.bn(params, self.sep(params, x), training))


class _XceptionBlock:
    """Two separable convs with a 1x1-conv residual shortcut."""

    def __init__(self, name, ch):
        self.sep1 = _SepConv(name + ".sep1", ch, ch)
        self.bn1 = _BatchNorm(name + ".bn1", ch)
        self.sep2 = _SepConv(name + ".sep2", ch, ch)
        self.bn2 = _BatchNorm(name + ".bn2", ch)
        self.short = _Conv(name + ".short", ch, ch, k=1, bias=False)
        self.short_bn = _BatchNorm(name + ".short_bn", ch)
        self.children = [self.sep1, self.bn1, self.sep2, self.bn2, self.short, self.short_bn]

    def __call__(self, params, x, training=False):
        y = relu(self.bn1(params, self.sep1(params, x), training))
        y = self.bn2(params, self.sep2(params, y), training)
        s = self.short_bn(params, self.short(params, x), training)
        return relu(y + s)


class _DppBlock:
    """Five parallel receptive-field branches fused by a plain 1x1 conv.

    Branches: 1x1 conv; 3x3 conv; 3x3 conv rate 1; 3x3 conv rate 2; 3x3
    stride-3 average pool resampled back to the input size.  All branches
    keep the input channel count; the fuse conv compresses 5C back to C.
    """

    BRANCH_TABLE = (
        {"op": "conv", "kernel": 1, "stride": 1, "dilation": None},
        {"op": "conv", "kernel": 3, "stride": 1, "dilation": None},
        {"op": "conv", "kernel": 3, "stride": 1, "dilation": 1},
        {"op": "conv", "kernel": 3, "stride": 1, "dilation": 2},
        {"op": "avg_pool", "kernel": 3, "stride": 3, "dilation": None},
    )

    def __init__(self, name, ch):
        self.name = name
        self.ch = ch
        self.b1x1 = _ConvBnRelu(name + ".b1x1", ch, ch, k=1)
        self.b3x3 = _ConvBnRelu(name + ".b3x3", ch, ch, k=3)
        self.b3x3r1 = _ConvBnRelu(name + ".b3x3r1", ch, ch, k=3, dilation=1)
        self.b3x3r2 = _ConvBnRelu(name + ".b3x3r2", ch, ch, k=3, dilation=2)
        self.fuse = _Conv(name + ".fuse", 5 * ch, ch, k=1, bias=True)
        self.children = [self.b1x1, self.b3x3, self.b3x3r1, self.b3x3r2, self.fuse]

    @property
    def conv_branches(self):
        return [self.b1x1, self.b3x3, self.b3x3r1, self.b3x3r2]

    def __call__(self, params, x, training=False):
        size = x.shape[2:]
        outs = [branch(params, x, training) for branch in self.conv_branches]
        outs.append(bilinear_resize(avg_pool2d(x, 3, 3), size))
        return self.fuse(params, concat_channels(outs))


class _Stem:
    """Three strided 3x3 convs resampled to full size, concatenated and fused."""

    def __init__(self, strides, out_ch):
        self.branches = [
            _ConvBnRelu(f"stem.b{i}", 1, out_ch, k=3, stride=s) for i, s in enumerate(strides)
        ]
        self.fuse = _ConvBnRelu("stem.fuse", len(strides) * out_ch, out_ch, k=3)
        self.children = list(self.branches) + [self.fuse]

    def __call__(self, params, x, training=False):
        size = x.shape[2:]
        outs = [bilinear_resize(b(params, x, training), size) for b in self.branches]
        return self.fuse(params, concat_channels(outs), training)


def _walk(spec):
    yield spec
    for child in getattr(spec, "children", ()):
        yield from _walk(child)


class CSegNet:
    """Builds and runs the network for one ModelConfig."""

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        ch = config.stage_channels()
        S = config.stages
        self.stem = _Stem(config.stem_strides, ch[0])
        self.enc_down = [None]
        self.enc_blocks = [_XceptionBlock("enc0", ch[0])]
        for s in range(1, S):
            self.enc_down.append(_SepBnRelu(f"enc{s}.down", ch[s - 1], ch[s], stride=2))
            self.enc_blocks.append(_XceptionBlock(f"enc{s}", ch[s]))
        if config.variant == "csegnet":
            self.skips = [_DppBlock(f"skip{s}", ch[s]) for s in range(S)]
        else:
            self.skips = [None] * S
        self.dec_convs = {}
        for s in range(S - 2, -1, -1):
            self.dec_convs[s] = (
                _SepBnRelu(f"dec{s}.conv1", ch[s + 1] + ch[s], ch[s]),
                _SepBnRelu(f"dec{s}.conv2", ch[s], ch[s]),
            )
        self.head_main = _Conv("head.main", ch[0], config.num_classes, k=1, bias=True)
        self.head_aux = {
            s: _Conv(f"head.aux{s}", ch[s], config.num_classes, k=1, bias=True)
            for s in range(1, S)
        }

        self._top_specs = [self.stem] + self.enc_blocks + [d for d in self.enc_down if d]
        self._top_specs += [b for b in self.skips if b is not None]
        for s in sorted(self.dec_convs):
            self._top_specs += list(self.dec_convs[s])
        self._top_specs += [self.head_main] + [self.head_aux[s] for s in sorted(self.head_aux)]

    # ------------------------------------------------------------- params

    def _leaf_specs(self):
        for top in self._top_specs:
            for spec in _walk(top):
                if isinstance(spec, (_Conv, _BatchNorm)):
                    yield spec

    def init_params(self, seed: int, dtype=np.float32) -> dict:
        """Deterministic named parameter map for (config, seed)."""
        rng = np.random.default_rng(seed)
        params: dict = {}
        for spec in self._leaf_specs():
            spec.init(params, rng, dtype)
        return params

    def param_names(self) -> list:
        params: dict = {}
        rng = np.random.default_rng(0)
        for spec in self._leaf_specs():
            spec.init(params, rng, np.float32)
        return sorted(params)

    def learnable_count(self) -> int:
        return sum(spec.learnable_count() for spec in self._leaf_specs())

    # ------------------------------------------------------------ forward

    def forward(self, params: dict, x: Tensor, training: bool = False):
        """Main logits (B,N,H,W) plus auxiliary logits at each lower stage."""
        cfg = self.config
        H, W = cfg.input_size
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (H, W):
            raise ShapeMismatch(f"expected input (B,1,{H},{W}), got {x.shape}")
        S = cfg.stages
        feats = []
        h = self.stem(params, x, training)
        h = self.enc_blocks[0](params, h, training)
        feats.append(h)
        for s in range(1, S):
            h = self.enc_down[s](params, h, training)
            h = self.enc_blocks[s](params, h, training)
            feats.append(h)

        def through_skip(s, f):
            return self.skips[s](params, f, training) if self.skips[s] is not None else f

        d = through_skip(S - 1, feats[S - 1])
        aux = {S - 1: self.head_aux[S - 1](params, d)}
        for s in range(S - 2, -1, -1):
            up = bilinear_resize(d, (H >> s, W >> s))
            cat = concat_channels([up, through_skip(s, feats[s])])
            c1, c2 = self.dec_convs[s]
            d = c2(params, c1(params, cat, training), training)
            if s > 0:
                aux[s] = self.head_aux[s](params, d)
        main = self.head_main(params, d)
        return main, [aux[s] for s in sorted(aux)]

    def predict_proba(self, params: dict, x: Tensor, merge_aux: bool = False) -> np.ndarray:
        """Eval-mode class probabilities per pixel; optionally averages the
        upsampled auxiliary softmaxes into the main prediction."""
        main, aux = self.forward(params, x, training=False)
        probs = softmax_channels(main).data
        if merge_aux:
            acc = probs.copy()
            for a in aux:
                acc += bilinear_resize(softmax_channels(a), self.config.input_size).data
            probs = acc / (1 + len(aux))
        return probs

    # ------------------------------------------------------------ summary

    def summary(self) -> str:
        """Plain-text table of layer name, output shape, learnable parameters."""
        cfg = self.config
        H, W = cfg.input_size
        ch = cfg.stage_channels()
        S = cfg.stages

        def count(top):
            return sum(
                s.learnable_count() for s in _walk(top) if isinstance(s, (_Conv, _BatchNorm))
            )

        rows = [("stem", (ch[0], H, W), count(self.stem))]
        for s in range(S):
            if s > 0:
                rows.append((f"enc{s}.down", (ch[s], H >> s, W >> s), count(self.enc_down[s])))
            rows.append((f"enc{s}", (ch[s], H >> s, W >> s), count(self.enc_blocks[s])))
        for s in range(S):
            if self.skips[s] is not None:
                rows.append((f"skip{s}", (ch[s], H >> s, W >> s), count(self.skips[s])))
        for s in range(S - 2, -1, -1):
            c1, c2 = self.dec_convs[s]
            rows.append((f"dec{s}", (ch[s], H >> s, W >> s), count(c1) + count(c2)))
        for s in sorted(self.head_aux):
            rows.append((f"head.aux{s}", (cfg.num_classes, H >> s, W >> s), count(self.head_aux[s])))
        rows.append(("head.main", (cfg.num_classes, H, W), count(self.head_main)))

        width = max(len(r[0]) for r in rows) + 2
        lines = [f"{'layer':<{width}}{'output (C,H,W)':<20}{'params':>10}"]
        for name, shape, n in rows:
            lines.append(f"{name:<{width}}{str(shape):<20}{n:>10}")
        lines.append(f"{'total':<{width}}{'':<20}{self.learnable_count():>10}")
        return "\n".join(lines)


def build(config: ModelConfig, seed: int, dtype=np.float32):
    """(model, params) for a validated config; deterministic under seed."""
    model = CSegNet(config)
    return model, model.init_params(seed, dtype=dtype)
