"""Channel attention over dual pooled descriptors.

Average- and max-pooled channel vectors pass through one shared 1-D
convolution, are summed, squashed by a sigmoid, and rescale the input
channels. Kernel size adapts to the channel count unless pinned.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ConfigError, DimensionError
from .layers import Module, he_uniform
from .tensor import Tensor


def meca_kernel_size(channels: int, gamma: int = 2, b: int = 1) -> int:
    """Adaptive 1-D kernel size: nearest odd to log2(C)/gamma + b/gamma,
    never below 3."""
    if channels < 1:
        raise ConfigError(f"channel count must be positive, got {channels}")
    t = int(math.log2(channels) / gamma + b / gamma)
    k = t if t % 2 == 1 else t + 1
    return max(k, 3)


@dataclass(frozen=True)
class MecaSpec:
    channels: int
    kernel: int | None = None  # None = adaptive

    def resolved_kernel(self) -> int:
        k = self.kernel if self.kernel is not None \
            else meca_kernel_size(self.channels)
        if k % 2 == 0:
            raise ConfigError(f"attention kernel must be odd, got {k}")
        return k


class Meca(Module):
    """Dual-pooled channel attention with one shared 1-D convolution."""

    def __init__(self, spec: MecaSpec, rng: np.random.Generator,
                 dtype=np.float64):
        super().__init__()
        self.spec = spec
        self.kernel = spec.resolved_kernel()
        if self.kernel > spec.channels:
            warnings.warn(
                f"attention kernel {self.kernel} exceeds channel count "
                f"{spec.channels}", stacklevel=2)
        self.weights = self._param(
            "weights", he_uniform(rng, (self.kernel,), self.kernel, dtype))

    def attention_weights(self, x: Tensor) -> Tensor:
        """Per-(batch, channel) gate in (0, 1), shape [N, C]."""
        if x.shape[1] != self.spec.channels:
            raise DimensionError(
                f"channel axis mismatch: attention built for "
                f"{self.spec.channels} channels, input has {x.shape[1]}")
        avg_branch = ops.conv1d_channels(ops.global_avg_pool(x), self.weights)
        max_branch = ops.conv1d_channels(ops.global_max_pool(x), self.weights)
        return ops.sigmoid(avg_branch + max_branch)

    def forward(self, x: Tensor) -> Tensor:
        return ops.scale_channels(x, self.attention_weights(x))
