"""Differentiable training losses over pixel probability maps.

The segmentation loss is binary cross-entropy plus soft Jaccard distance;
both are plain tensor-op compositions so gradients flow through the tape.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .tensor import Tensor

CLAMP_EPS = 1e-7


@dataclass(frozen=True)
class PixelBatch:
    """Predicted probabilities paired with binary targets of equal shape."""

    predictions: Tensor
    targets: np.ndarray

    def __post_init__(self):
        targets = np.asarray(self.targets)
        if self.predictions.shape != targets.shape:
            raise ContractError(
                f"prediction shape {self.predictions.shape} does not match "
                f"target shape {targets.shape}")
        if self.predictions.size == 0:
            raise ContractError("empty pixel batch")
        if not np.all((targets == 0) | (targets == 1)):
            raise ContractError("targets must be exactly 0 or 1")
        object.__setattr__(self, "targets",
                           targets.astype(self.predictions.dtype))

    @property
    def pixel_count(self) -> int:
        return self.predictions.size


def bce_loss(batch: PixelBatch) -> Tensor:
    """Mean binary cross-entropy, predictions clamped to [eps, 1-eps]."""
    p = batch.predictions.clip(CLAMP_EPS, 1.0 - CLAMP_EPS)
    x = batch.targets
    per_pixel = p.log() * x + (1.0 - p).log() * (1.0 - x)
    return -per_pixel.mean()


def jaccard_loss(batch: PixelBatch) -> Tensor:
    """Soft Jaccard distance: 1 - |x*p| / (|x| + |p| - |x*p|).

    The ratio is taken exactly when the union is meaningful; when both
    prediction and target are (numerically) empty the loss is 0 by the
    defined-empty convention, which also guards the denominator.
    """
    p = batch.predictions
    x = batch.targets
    intersection = (p * x).sum()
    union = p.sum() + float(x.sum()) - intersection
    if float(union.data) <= CLAMP_EPS:
        return Tensor(np.zeros((), dtype=p.dtype))
    return 1.0 - intersection / union


def seg_loss(batch: PixelBatch) -> Tensor:
    """Combined loss: bce_loss + jaccard_loss (gradients add)."""
    return bce_loss(batch) + jaccard_loss(batch)
