"""Composite layers: dense blocks, transitions, and convolution blocks.

Modules own their parameter tensors and expose them through
named_parameters / named_buffers with dotted, construction-ordered names,
which fixes the serialization order. Forward passes are pure given
(input, parameters, mode); only batchnorm running statistics mutate, and
only in train mode.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ConfigError
from .tensor import Tensor


def he_uniform(rng: np.random.Generator, shape, fan_in: int,
               dtype=np.float64) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Module:
    """Minimal module tree: explicit registration, no attribute magic."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._children: dict[str, Module] = {}
        self.training = False

    def _param(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(data, requires_grad=True)
        self._params[name] = t
        return t

    def _buffer(self, name: str, data: np.ndarray) -> np.ndarray:
        self._buffers[name] = data
        return data

    def _child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = [(prefix + n, t) for n, t in self._params.items()]
        for cn, child in self._children.items():
            out.extend(child.named_parameters(prefix + cn + "."))
        return out

    def named_buffers(self, prefix: str = "") -> list[tuple[str, np.ndarray]]:
        out = [(prefix + n, b) for n, b in self._buffers.items()]
        for cn, child in self._children.items():
            out.extend(child.named_buffers(prefix + cn + "."))
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def parameter_count(self) -> int:
        return sum(t.size for t in self.parameters())

    def set_mode(self, training: bool) -> None:
        self.training = training
        for child in self._children.values():
            child.set_mode(training)


class Conv2d(Module):
    """Convolution layer; kernel size 1 takes the pointwise fast path."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int,
                 rng: np.random.Generator, stride: int = 1, dilation: int = 1,
                 padding: int = 0, bias: bool = False, dtype=np.float64):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.dilation = dilation
        self.padding = padding
        fan_in = in_channels * kernel * kernel
        self.weight = self._param(
            "weight", he_uniform(rng, (out_channels, in_channels, kernel, kernel),
                                 fan_in, dtype))
        self.bias = self._param("bias", np.zeros(out_channels, dtype=dtype)) \
            if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if self.kernel == 1 and self.stride == 1 and self.dilation == 1 \
                and self.padding == 0:
            return ops.pointwise_conv(x, self.weight, self.bias)
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride,
                          dilation=self.dilation, padding=self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5,
                 dtype=np.float64):
        super().__init__()
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = self._param("gamma", np.ones(channels, dtype=dtype))
        self.beta = self._param("beta", np.zeros(channels, dtype=dtype))
        self.running_mean = self._buffer("running_mean",
                                         np.zeros(channels, dtype=dtype))
        self.running_var = self._buffer("running_var",
                                        np.ones(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return ops.batchnorm2d(x, self.gamma, self.beta, self.training,
                               self.running_mean, self.running_var,
                               momentum=self.momentum, eps=self.eps)


class ConvBnRelu(Module):
    """conv -> batchnorm -> relu, the post-activation building block."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int,
                 rng, stride: int = 1, dilation: int = 1, padding: int = 0,
                 dtype=np.float64):
        super().__init__()
        self.conv = self._child("conv", Conv2d(in_channels, out_channels,
                                               kernel, rng, stride=stride,
                                               dilation=dilation,
                                               padding=padding, dtype=dtype))
        self.bn = self._child("bn", BatchNorm2d(out_channels, dtype=dtype))
        self.out_channels = out_channels

    def forward(self, x: Tensor) -> Tensor:
        return ops.relu(self.bn.forward(self.conv.forward(x)))


@dataclass(frozen=True)
class SeparableBlockSpec:
    out_channels: int
    kernel: int = 3


class SeparableBlock(Module):
    """Depthwise 3x3 (same padding) -> pointwise 1x1 -> BN -> ReLU.

    Weight count is C*k^2 + C*M versus C*M*k^2 for the standard block the
    stConv ablation swaps in.
    """

    def __init__(self, in_channels: int, spec: SeparableBlockSpec, rng,
                 dtype=np.float64):
        super().__init__()
        k = spec.kernel
        self.in_channels = in_channels
        self.out_channels = spec.out_channels
        self.kernel = k
        self.depthwise = self._param(
            "depthwise", he_uniform(rng, (in_channels, 1, k, k), k * k, dtype))
        self.pointwise = self._param(
            "pointwise", he_uniform(rng, (spec.out_channels, in_channels, 1, 1),
                                    in_channels, dtype))
        self.bn = self._child("bn", BatchNorm2d(spec.out_channels, dtype=dtype))

    def spatial_mix(self, x: Tensor) -> Tensor:
        """The factored convolution alone, before normalization."""
        pad = (self.kernel - 1) // 2
        mixed = ops.depthwise_conv2d(x, self.depthwise, padding=pad)
        return ops.pointwise_conv(mixed, self.pointwise)

    def forward(self, x: Tensor) -> Tensor:
        return ops.relu(self.bn.forward(self.spatial_mix(x)))


class StandardBlock(ConvBnRelu):
    """3x3 same-padding conv block; the stConv counterpart of SeparableBlock."""

    def __init__(self, in_channels: int, out_channels: int, rng,
                 dtype=np.float64):
        super().__init__(in_channels, out_channels, 3, rng, padding=1,
                         dtype=dtype)
        self.kernel = 3
        self.in_channels = in_channels


def make_block(conv_mode: str, in_channels: int, out_channels: int, rng,
               dtype=np.float64) -> Module:
    if conv_mode == "separable":
        return SeparableBlock(in_channels, SeparableBlockSpec(out_channels),
                              rng, dtype=dtype)
    if conv_mode == "standard":
        return StandardBlock(in_channels, out_channels, rng, dtype=dtype)
    raise ConfigError(f"unknown conv_mode '{conv_mode}'")


@dataclass(frozen=True)
class DenseBlockSpec:
    num_layers: int
    growth: int
    bottleneck_factor: int = 4


class DenseLayer(Module):
    """Pre-activation bottleneck layer; output concatenates its input.

    BN -> ReLU -> 1x1 conv (bottleneck_factor * growth) -> BN -> ReLU ->
    3x3 conv (growth, same padding), then concat(input, new features).
    """

    def __init__(self, in_channels: int, spec: DenseBlockSpec, rng,
                 dtype=np.float64):
        super().__init__()
        mid = spec.bottleneck_factor * spec.growth
        self.in_channels = in_channels
        self.out_channels = in_channels + spec.growth
        self.bn1 = self._child("bn1", BatchNorm2d(in_channels, dtype=dtype))
        self.conv1 = self._child("conv1", Conv2d(in_channels, mid, 1, rng,
                                                 dtype=dtype))
        self.bn2 = self._child("bn2", BatchNorm2d(mid, dtype=dtype))
        self.conv2 = self._child("conv2", Conv2d(mid, spec.growth, 3, rng,
                                                 padding=1, dtype=dtype))

    def new_features(self, x: Tensor) -> Tensor:
        h = self.conv1.forward(ops.relu(self.bn1.forward(x)))
        return self.conv2.forward(ops.relu(self.bn2.forward(h)))

    def forward(self, x: Tensor) -> Tensor:
        return ops.concat_channels([x, self.new_features(x)])


class DenseBlock(Module):
    """Stack of densely connected layers; channels grow by num_layers*growth."""

    def __init__(self, in_channels: int, spec: DenseBlockSpec, rng,
                 dtype=np.float64):
        super().__init__()
        self.spec = spec
        self.in_channels = in_channels
        self.layers: list[DenseLayer] = []
        ch = in_channels
        for i in range(spec.num_layers):
            layer = DenseLayer(ch, spec, rng, dtype=dtype)
            self._child(f"layer{i}", layer)
            self.layers.append(layer)
            ch = layer.out_channels
        self.out_channels = ch

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer.forward(x)
        return x


@dataclass(frozen=True)
class TransitionSpec:
    compression: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.compression <= 1.0:
            raise ConfigError(
                f"compression must be in (0, 1], got {self.compression}")


class Transition(Module):
    """BN -> ReLU -> 1x1 compression conv -> 2x2 average pool."""

    def __init__(self, in_channels: int, spec: TransitionSpec, rng,
                 dtype=np.float64):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = int(np.floor(spec.compression * in_channels))
        self.bn = self._child("bn", BatchNorm2d(in_channels, dtype=dtype))
        self.conv = self._child("conv", Conv2d(in_channels, self.out_channels,
                                               1, rng, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return ops.avgpool2d(self.conv.forward(ops.relu(self.bn.forward(x))))


class Upsample2x(Module):
    """Stride-2 kernel-2 transposed convolution doubling both spatial dims."""

    def __init__(self, in_channels: int, out_channels: int, rng,
                 dtype=np.float64):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.weight = self._param(
            "weight", he_uniform(rng, (in_channels, out_channels, 2, 2),
                                 in_channels * 4, dtype))

    def forward(self, x: Tensor) -> Tensor:
        return ops.transposed_conv2d(x, self.weight)
