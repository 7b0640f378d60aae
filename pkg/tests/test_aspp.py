"""Dilated pyramid bridge invariants."""

import numpy as np
import pytest

from cascn import ops
from cascn.aspp import Aspp, AsppSpec
from cascn.errors import ConfigError
from cascn.tensor import Tensor


def make(spec, seed=0):
    return Aspp(spec, np.random.default_rng(seed))


def test_spatial_preservation_default_rates(rng):
    block = make(AsppSpec(3, 8))
    x = Tensor(rng.normal(size=(1, 3, 12, 16)))
    assert block.forward(x).shape == (1, 8, 12, 16)


def test_spatial_preservation_random_specs():
    rng = np.random.default_rng(42)
    for _ in range(50):
        rates = tuple(sorted(rng.choice(np.arange(1, 7), size=2,
                                        replace=False).tolist()))
        spec = AsppSpec(int(rng.integers(1, 4)), int(rng.integers(1, 5)),
                        rates=rates,
                        include_1x1=bool(rng.integers(0, 2)),
                        include_image_pool=bool(rng.integers(0, 2)))
        h = int(rng.integers(1, 8))
        w = int(rng.integers(1, 8))
        x = Tensor(rng.normal(size=(1, spec.in_channels, h, w)))
        out = make(spec, seed=int(rng.integers(0, 100))).forward(x)
        assert out.shape == (1, spec.out_channels, h, w)


def test_projection_input_channels():
    spec = AsppSpec(4, 8, rates=(1, 2, 3))
    assert spec.branch_count == 5
    block = make(spec)
    assert block.project.conv.in_channels == 40


def test_rate_one_branch_equals_standard_conv(rng):
    x = Tensor(rng.normal(size=(1, 3, 6, 6)))
    w = Tensor(rng.normal(size=(2, 3, 3, 3)))
    a = ops.conv2d(x, w, dilation=1, padding=1).data
    b = ops.conv2d(x, w, padding=1).data
    assert np.abs(a - b).max() < 1e-12


@pytest.mark.parametrize("rate", [1, 2, 3, 5])
def test_impulse_confined_to_chebyshev_radius(rate):
    size = 2 * rate + 5
    impulse = np.zeros((1, 1, size, size))
    center = size // 2
    impulse[0, 0, center, center] = 1.0
    resp = ops.conv2d(Tensor(impulse), Tensor(np.ones((1, 1, 3, 3))),
                      dilation=rate, padding=rate).data[0, 0]
    ii, jj = np.nonzero(resp)
    assert np.maximum(np.abs(ii - center), np.abs(jj - center)).max() == rate


def test_image_pool_branch_is_spatially_constant(rng):
    spec = AsppSpec(3, 4, rates=(2,), include_1x1=False,
                    include_image_pool=True)
    block = make(spec)
    x = Tensor(rng.normal(size=(2, 3, 5, 5)))
    pooled = ops.global_avg_pool(x).reshape((2, 3, 1, 1))
    pooled = ops.relu(block.pool_bn.forward(block.pool_conv.forward(pooled)))
    branch = ops.broadcast_spatial(pooled, 5, 5).data
    assert np.all(branch == branch[:, :, :1, :1])


def test_duplicate_rates_rejected():
    with pytest.raises(ConfigError, match="distinct"):
        AsppSpec(3, 4, rates=(2, 2))


def test_zero_rate_rejected():
    with pytest.raises(ConfigError):
        AsppSpec(3, 4, rates=(0, 2))


def test_empty_branch_set_rejected():
    with pytest.raises(ConfigError):
        AsppSpec(3, 4, rates=(), include_1x1=False, include_image_pool=False)
