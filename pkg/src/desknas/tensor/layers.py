"""Parameterized building blocks and the shared candidate-operation library."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import functional as F
from .core import Tensor, default_dtype, mul, relu


class Module:
    """Container that discovers its parameters and children by attribute walk."""

    name: str = ""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            yield from _walk(value, f"{prefix}{key}")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))


def _walk(value, path: str):
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield path, value
    elif isinstance(value, Module):
        yield from value.named_parameters(path + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{path}.{i}")
    elif isinstance(value, dict):
        for k in sorted(value, key=str):
            yield from _walk(value[k], f"{path}.{k}")


def kaiming_uniform(shape: tuple[int, ...], rng: np.random.Generator, name: str | None = None) -> Tensor:
    fan_in = int(np.prod(shape[1:]))
    bound = math.sqrt(6.0 / fan_in)
    data = rng.uniform(-bound, bound, size=shape).astype(default_dtype())
    return Tensor(data, requires_grad=True, name=name)


def zeros(shape, name: str | None = None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=default_dtype()), requires_grad=True, name=name)


def ones(shape, name: str | None = None) -> Tensor:
    return Tensor(np.ones(shape, dtype=default_dtype()), requires_grad=True, name=name)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel, rng: np.random.Generator, stride=1,
                 dilation: int = 1, groups: int = 1, bias: bool = False, name: str = "conv"):
        kh, kw = F._pair(kernel)
        self.name = name
        self.stride = stride
        self.dilation = dilation
        self.groups = groups
        self.padding = (dilation * (kh - 1) // 2, dilation * (kw - 1) // 2)
        self.weight = kaiming_uniform((c_out, c_in // groups, kh, kw), rng)
        self.bias = zeros((c_out,)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding,
                        dilation=self.dilation, groups=self.groups, name=self.name)


class Norm(Module):
    """Instance standardization followed by a learned per-channel affine map."""

    def __init__(self, channels: int):
        self.scale = ones((1, channels, 1, 1))
        self.shift = zeros((1, channels, 1, 1))

    def forward(self, x: Tensor) -> Tensor:
        return F.instance_norm(x) * self.scale + self.shift


class Zero(Module):
    def __init__(self, stride: int = 1):
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        return mul(F.subsample(x, self.stride), 0.0)


class Skip(Module):
    def __init__(self, stride: int = 1):
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        return F.subsample(x, self.stride)


class Pool(Module):
    def __init__(self, mode: str, stride: int = 1):
        self.mode = mode
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        pool = F.max_pool2d if self.mode == "max" else F.avg_pool2d
        return pool(x, 3, self.stride, 1)


class ReLUConvNorm(Module):
    """ReLU, one or more convolutions, then normalization."""

    def __init__(self, convs: list[Conv2d], channels: int):
        self.convs = convs
        self.norm = Norm(channels)

    def forward(self, x: Tensor) -> Tensor:
        x = relu(x)
        for conv in self.convs:
            x = conv(x)
        return self.norm(x)


def plain_conv(c: int, k: int, stride: int, rng, name: str) -> ReLUConvNorm:
    return ReLUConvNorm([Conv2d(c, c, k, rng, stride=stride, name=name)], c)


def separable_conv(c: int, k: int, stride: int, rng, name: str, dilation: int = 1) -> ReLUConvNorm:
    depth = Conv2d(c, c, k, rng, stride=stride, dilation=dilation, groups=c, name=f"{name}.depthwise")
    point = Conv2d(c, c, 1, rng, name=f"{name}.pointwise")
    return ReLUConvNorm([depth, point], c)


def split_conv(c: int, k: int, stride: int, rng, name: str) -> ReLUConvNorm:
    tall = Conv2d(c, c, (k, 1), rng, stride=(stride, 1), name=f"{name}.kx1")
    wide = Conv2d(c, c, (1, k), rng, stride=(1, stride), name=f"{name}.1xk")
    return ReLUConvNorm([tall, wide], c)


def _conv_kind(builder, k, dilation=1):
    if dilation == 1:
        return lambda c, s, rng, name: builder(c, k, s, rng, name)
    return lambda c, s, rng, name: builder(c, k, s, rng, name, dilation=dilation)


# name -> factory(channels, stride, rng, name)
OPS = {
    "conv2d_1": _conv_kind(plain_conv, 3),
    "conv2d_2": _conv_kind(plain_conv, 5),
    "conv2d_3": _conv_kind(plain_conv, 7),
    "depthconv2d_1": _conv_kind(separable_conv, 3),
    "depthconv2d_2": _conv_kind(separable_conv, 5),
    "depthconv2d_3": _conv_kind(separable_conv, 7),
    "sep_conv_3x3": _conv_kind(separable_conv, 3),
    "sep_conv_5x5": _conv_kind(separable_conv, 5),
    "sep_conv_7x7": _conv_kind(separable_conv, 7),
    "splitconv2d_1": _conv_kind(split_conv, 3),
    "splitconv2d_2": _conv_kind(split_conv, 5),
    "splitconv2d_3": _conv_kind(split_conv, 7),
    "dil_conv_3x3": _conv_kind(separable_conv, 3, dilation=2),
    "dil_conv_5x5": _conv_kind(separable_conv, 5, dilation=2),
    "avg_pool_3x3": lambda c, s, rng, name: Pool("avg", s),
    "max_pool_3x3": lambda c, s, rng, name: Pool("max", s),
    "skip": lambda c, s, rng, name: Skip(s),
    "cut": lambda c, s, rng, name: Zero(s),
}

PARAMETER_FREE = frozenset({"avg_pool_3x3", "max_pool_3x3", "skip", "cut"})


def build_op(kind: str, channels: int, stride: int, rng: np.random.Generator, name: str = "") -> Module:
    try:
        factory = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown operation {kind!r}; known: {sorted(OPS)}") from None
    op = factory(channels, stride, rng, name or kind)
    op.name = name or kind
    return op
