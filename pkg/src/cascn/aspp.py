"""Atrous spatial pyramid pooling bridge.

Parallel branches over one input: an optional 1x1 conv, 3x3 convs at the
configured dilation rates (padding = rate keeps spatial dims), and an
optional image-level pooling branch, each conv -> BN -> ReLU. Branch
outputs concatenate and a 1x1 projection maps them to the output width.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ConfigError
from .layers import BatchNorm2d, Conv2d, ConvBnRelu, Module
from .tensor import Tensor


@dataclass(frozen=True)
class AsppSpec:
    in_channels: int
    out_channels: int
    rates: tuple[int, ...] = (6, 12, 18)
    include_1x1: bool = True
    include_image_pool: bool = True

    def __post_init__(self):
        if any(r < 1 for r in self.rates):
            raise ConfigError(f"dilation rates must be >= 1, got {self.rates}")
        if len(set(self.rates)) != len(self.rates):
            raise ConfigError(f"dilation rates must be distinct, got {self.rates}")
        if self.branch_count == 0:
            raise ConfigError("pyramid needs at least one branch")

    @property
    def branch_count(self) -> int:
        return (len(self.rates) + int(self.include_1x1)
                + int(self.include_image_pool))


class Aspp(Module):
    def __init__(self, spec: AsppSpec, rng: np.random.Generator,
                 dtype=np.float64):
        super().__init__()
        self.spec = spec
        cin, cout = spec.in_channels, spec.out_channels
        self.branches: list[ConvBnRelu] = []
        if spec.include_1x1:
            br = ConvBnRelu(cin, cout, 1, rng, dtype=dtype)
            self._child("branch_1x1", br)
            self.branches.append(br)
        for r in spec.rates:
            br = ConvBnRelu(cin, cout, 3, rng, dilation=r, padding=r,
                            dtype=dtype)
            self._child(f"branch_rate{r}", br)
            self.branches.append(br)
        if spec.include_image_pool:
            self.pool_conv = self._child("pool_conv",
                                         Conv2d(cin, cout, 1, rng, dtype=dtype))
            self.pool_bn = self._child("pool_bn", BatchNorm2d(cout, dtype=dtype))
        self.project = self._child(
            "project", ConvBnRelu(spec.branch_count * cout, cout, 1, rng,
                                  dtype=dtype))
        self.out_channels = cout

    def forward(self, x: Tensor) -> Tensor:
        n, _, h, w = x.shape
        outs = [br.forward(x) for br in self.branches]
        if self.spec.include_image_pool:
            pooled = ops.global_avg_pool(x).reshape((n, x.shape[1], 1, 1))
            pooled = ops.relu(self.pool_bn.forward(self.pool_conv.forward(pooled)))
            outs.append(ops.broadcast_spatial(pooled, h, w))
        return self.project.forward(ops.concat_channels(outs))
