"""Trainable layer objects on top of the autodiff ops, plus per-layer
complexity accounting.

Complexity counts follow the usual binary-network convention: one
multiply-accumulate is one op, binary MACs are tallied separately from float
ops, and the float work of the binarization scales (computing D, filtering
it into K, applying beta and K) is charged to the float column because it
genuinely executes in float.  Counts are per single input (batch 1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Var
from .binary import (
    activation_scale,
    pad_spatial,
    scaled_sign_conv,
    scaled_sign_depthwise_conv,
    sign_ste,
    sign_ste_nhwc,
)
from .errors import GeometryError
from .tensorops import conv_out_hw


@dataclass
class Cost:
    """Per-layer complexity, one input image.

    float_ops: float MACs/elementwise work that a float twin would also do
    scale_ops: float work of the binarization scales (D, K, beta/K apply);
               the float twin drops these
    binary_ops: 1-bit MACs (counted at 1/64 float op in effective FLOPs)
    """

    float_ops: int = 0
    scale_ops: int = 0
    binary_ops: int = 0
    params_float: int = 0
    params_binary_bits: int = 0
    beta_scalars: int = 0

    def __iadd__(self, other: "Cost"):
        self.float_ops += other.float_ops
        self.scale_ops += other.scale_ops
        self.binary_ops += other.binary_ops
        self.params_float += other.params_float
        self.params_binary_bits += other.params_binary_bits
        self.beta_scalars += other.beta_scalars
        return self


@dataclass
class LayerCost(Cost):
    name: str = ""
    kind: str = ""


class Module:
    """Minimal container: reflective parameter/buffer discovery over
    attributes, lists and tuples, in definition order."""

    def _children(self):
        for key, val in vars(self).items():
            if isinstance(val, (Module, Parameter)):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, (Module, Parameter)):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = ""):
        for key, val in self._children():
            if isinstance(val, Parameter):
                yield prefix + key, val
            else:
                yield from val.named_parameters(prefix + key + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for key, val in self._children():
            if isinstance(val, Module):
                yield from val.named_buffers(prefix + key + ".")

    def modules(self):
        yield self
        for _, val in self._children():
            if isinstance(val, Module):
                yield from val.modules()

    def named_modules(self, prefix: str = ""):
        yield prefix.rstrip("."), self
        for key, val in self._children():
            if isinstance(val, Module):
                yield from val.named_modules(prefix + key + ".")

    def state_entries(self):
        """name -> array view of everything a checkpoint must hold."""
        out = {}
        for name, p in self.named_parameters():
            out[name] = p.data
        for name, b in self.named_buffers():
            out[name] = b
        return out

    def load_state(self, entries: dict):
        for name, p in self.named_parameters():
            if name not in entries:
                raise GeometryError(f"checkpoint is missing parameter {name}")
            if entries[name].shape != p.data.shape:
                raise GeometryError(
                    f"{name}: checkpoint shape {entries[name].shape} "
                    f"!= model shape {p.data.shape}"
                )
            p.data[...] = entries[name]
        for name, b in self.named_buffers():
            if name not in entries:
                raise GeometryError(f"checkpoint is missing buffer {name}")
            b[...] = entries[name]


def he_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


def conv_weight_parameters(root: Module) -> list[Parameter]:
    """Every convolution weight in the tree (modules advertise theirs via a
    conv_weights() hook); the gradient-magnitude instrumentation sums these."""
    out = []
    for m in root.modules():
        hook = getattr(m, "conv_weights", None)
        if hook is not None:
            out.extend(hook())
    return out


class BatchNorm2d(Module):
    def __init__(self, channels: int, affine: bool = True):
        self.channels = channels
        self.gamma = Parameter(np.ones(channels, np.float32)) if affine else None
        self.beta = Parameter(np.zeros(channels, np.float32)) if affine else None
        self.running_mean = np.zeros(channels, np.float32)
        self.running_var = np.ones(channels, np.float32)

    def named_buffers(self, prefix: str = ""):
        yield prefix + "running_mean", self.running_mean
        yield prefix + "running_var", self.running_var

    def forward(self, x: Var, training: bool) -> Var:
        return ad.batchnorm2d(
            x, self.gamma, self.beta, self.running_mean, self.running_var, training
        )

    def complexity(self, in_shape):
        c, h, w = in_shape
        affine = 2 * c if self.gamma is not None else 0
        return Cost(float_ops=2 * c * h * w, params_float=affine), in_shape


class Conv2d(Module):
    """Plain float convolution (stem, probe baselines, float twins)."""

    def __init__(self, cin, cout, kernel, stride=1, dilation=1, padding=None,
                 rng: np.random.Generator | None = None):
        if padding is None:
            padding = dilation * (kernel - 1) // 2
        self.cin, self.cout, self.kernel = cin, cout, kernel
        self.stride, self.dilation, self.padding = stride, dilation, padding
        rng = rng or np.random.default_rng(0)
        self.weight = Parameter(
            he_init(rng, (cout, cin, kernel, kernel), cin * kernel * kernel)
        )

    def forward(self, x: Var, training: bool) -> Var:
        return ad.conv2d(x, self.weight, self.stride, self.dilation, self.padding)

    def conv_weights(self):
        return [self.weight]

    def complexity(self, in_shape):
        c, h, w = in_shape
        oh, ow = conv_out_hw(h, w, (self.kernel, self.kernel),
                             self.stride, self.dilation, self.padding)
        macs = oh * ow * self.cout * c * self.kernel * self.kernel
        return (
            Cost(float_ops=macs, params_float=self.weight.data.size),
            (self.cout, oh, ow),
        )


class Linear(Module):
    def __init__(self, fin, fout, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.weight = Parameter(
            (rng.standard_normal((fout, fin)) / np.sqrt(fin)).astype(np.float32)
        )
        self.bias = Parameter(np.zeros(fout, np.float32))

    def forward(self, x: Var, training: bool) -> Var:
        return ad.linear(x, self.weight, self.bias)

    def complexity(self, in_features: int):
        fout, fin = self.weight.data.shape
        return Cost(
            float_ops=fout * fin,
            params_float=self.weight.data.size + self.bias.data.size,
        ), fout


class BinConv2d(Module):
    """One binarized convolution block: batchnorm -> sign -> 1-bit conv with
    beta/K scaling.  The block ordering (normalize before the sign) is what
    makes these trainable at all; master weights stay float and B/beta are
    re-derived from them on every forward."""

    def __init__(self, cin, cout, kernel, stride=1, dilation=1, padding=None,
                 rng: np.random.Generator | None = None, bn_affine: bool = True):
        if padding is None:
            padding = dilation * (kernel - 1) // 2
        self.cin, self.cout, self.kernel = cin, cout, kernel
        self.stride, self.dilation, self.padding = stride, dilation, padding
        self.bn = BatchNorm2d(cin, affine=bn_affine)
        rng = rng or np.random.default_rng(0)
        self.weight = Parameter(
            he_init(rng, (cout, cin, kernel, kernel), cin * kernel * kernel)
        )

    def forward(self, x: Var, training: bool) -> Var:
        h = self.bn.forward(x, training)
        k_map = activation_scale(
            h.data, (self.kernel, self.kernel), self.stride, self.dilation, self.padding
        )
        s = sign_ste_nhwc(h, self.padding)
        return scaled_sign_conv(
            s, [self.weight], k_map, (self.kernel, self.kernel), self.stride, self.dilation
        )

    def conv_weights(self):
        return [self.weight]

    def complexity(self, in_shape):
        c, h, w = in_shape
        bn_cost, _ = self.bn.complexity(in_shape)
        oh, ow = conv_out_hw(h, w, (self.kernel, self.kernel),
                             self.stride, self.dilation, self.padding)
        k2 = self.kernel * self.kernel
        cost = Cost(
            float_ops=bn_cost.float_ops,
            scale_ops=c * h * w + oh * ow * k2 + 2 * oh * ow * self.cout,
            binary_ops=oh * ow * self.cout * c * k2,
            params_float=bn_cost.params_float,
            params_binary_bits=self.weight.data.size,
            beta_scalars=self.cout,
        )
        return cost, (self.cout, oh, ow)


class BinSepConv2d(Module):
    """Separable binary conv block: BN -> sign -> depthwise 1-bit conv ->
    BN -> sign -> pointwise 1-bit conv.  Excluded from the default search
    space; exists for the quantization-error studies and the keep-sepconv
    ablation."""

    def __init__(self, cin, cout, kernel, stride=1, dilation=1,
                 rng: np.random.Generator | None = None, bn_affine: bool = True):
        self.cin, self.cout, self.kernel = cin, cout, kernel
        self.stride, self.dilation = stride, dilation
        self.padding = dilation * (kernel - 1) // 2
        rng = rng or np.random.default_rng(0)
        self.bn1 = BatchNorm2d(cin, affine=bn_affine)
        self.w_depth = Parameter(
            he_init(rng, (cin, kernel, kernel), kernel * kernel)
        )
        self.bn2 = BatchNorm2d(cin, affine=bn_affine)
        self.w_point = Parameter(he_init(rng, (cout, cin, 1, 1), cin))

    def forward(self, x: Var, training: bool) -> Var:
        h = self.bn1.forward(x, training)
        k1 = activation_scale(
            h.data, (self.kernel, self.kernel), self.stride, self.dilation, self.padding
        )
        s1 = pad_spatial(sign_ste(h), self.padding, value=1.0)
        mid = scaled_sign_depthwise_conv(
            s1, self.w_depth, k1, (self.kernel, self.kernel), self.stride, self.dilation
        )
        h2 = self.bn2.forward(mid, training)
        k2 = activation_scale(h2.data, (1, 1), 1, 1, 0)
        s2 = sign_ste_nhwc(h2, 0)
        return scaled_sign_conv(s2, [self.w_point], k2, (1, 1), 1, 1)

    def conv_weights(self):
        return [self.w_depth, self.w_point]

    def complexity(self, in_shape):
        c, h, w = in_shape
        oh, ow = conv_out_hw(h, w, (self.kernel, self.kernel),
                             self.stride, self.dilation, self.padding)
        k2 = self.kernel * self.kernel
        bn1, _ = self.bn1.complexity(in_shape)
        bn2, _ = self.bn2.complexity((c, oh, ow))
        cost = Cost(
            float_ops=bn1.float_ops + bn2.float_ops,
            scale_ops=(c * h * w + oh * ow * k2 + 2 * oh * ow * c        # depthwise
                       + c * oh * ow + oh * ow + 2 * oh * ow * self.cout),  # pointwise
            binary_ops=oh * ow * c * k2 + oh * ow * self.cout * c,
            params_float=bn1.params_float + bn2.params_float,
            params_binary_bits=self.w_depth.data.size + self.w_point.data.size,
            beta_scalars=c + self.cout,
        )
        return cost, (self.cout, oh, ow)


class MaxPool(Module):
    def __init__(self, stride: int):
        self.stride = stride

    def forward(self, x: Var, training: bool) -> Var:
        return ad.maxpool2d(x, 3, self.stride, 1)

    def complexity(self, in_shape):
        c, h, w = in_shape
        oh, ow = conv_out_hw(h, w, (3, 3), self.stride, 1, 1)
        return Cost(float_ops=oh * ow * c * 9), (c, oh, ow)


class AvgPool(Module):
    def __init__(self, stride: int):
        self.stride = stride

    def forward(self, x: Var, training: bool) -> Var:
        return ad.avgpool2d(x, 3, self.stride, 1)

    def complexity(self, in_shape):
        c, h, w = in_shape
        oh, ow = conv_out_hw(h, w, (3, 3), self.stride, 1, 1)
        return Cost(float_ops=oh * ow * c * 9), (c, oh, ow)


class Zeroise(Module):
    """Outputs zeros of the strided shape; no parameters, no FLOPs, and a
    hard zero gradient (the output is a constant leaf)."""

    def __init__(self, stride: int):
        self.stride = stride

    def forward(self, x: Var, training: bool) -> Var:
        return zeroise_forward(x, self.stride)

    def complexity(self, in_shape):
        c, h, w = in_shape
        s = self.stride
        return Cost(), (c, (h - 1) // s + 1, (w - 1) // s + 1)


def zeroise_forward(x: Var, stride: int) -> Var:
    if stride not in (1, 2):
        raise GeometryError(f"zeroise stride must be 1 or 2, got {stride}")
    n, c, h, w = x.data.shape
    shape = (n, c, (h - 1) // stride + 1, (w - 1) // stride + 1)
    return Var(np.zeros(shape, dtype=x.data.dtype))
