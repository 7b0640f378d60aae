"""Evaluation metrics from pixel confusion counts.

SE = TP/(TP+FN), SP = TN/(TN+FP), AC = (TP+TN)/N, DI = 2TP/(2TP+FP+FN),
JA = TP/(TP+FP+FN). A metric whose denominator vanishes reports 1.0 when
the class it measures is absent on both sides, else 0.0.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError

METRIC_NAMES = ("SE", "SP", "AC", "DI", "JA")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ContractError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion(pred: np.ndarray, target: np.ndarray,
              threshold: float = 0.5) -> ConfusionCounts:
    """Threshold a probability map (ties count positive) against a binary
    mask and tally the four confusion cells."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ContractError(f"prediction shape {pred.shape} does not match "
                            f"mask shape {target.shape}")
    if pred.size == 0:
        raise ContractError("empty prediction")
    pos = pred >= threshold
    t = target.astype(bool)
    return ConfusionCounts(tp=int(np.sum(pos & t)),
                           fp=int(np.sum(pos & ~t)),
                           tn=int(np.sum(~pos & ~t)),
                           fn=int(np.sum(~pos & t)))


def _safe_ratio(num: int, den: int, absent: bool) -> float:
    if den == 0:
        return 1.0 if absent else 0.0
    return num / den


def metrics(counts: ConfusionCounts) -> dict[str, float]:
    tp, fp, tn, fn = counts.tp, counts.fp, counts.tn, counts.fn
    return {
        "SE": _safe_ratio(tp, tp + fn, absent=fp == 0),
        "SP": _safe_ratio(tn, tn + fp, absent=fn == 0),
        "AC": _safe_ratio(tp + tn, counts.total, absent=True),
        "DI": _safe_ratio(2 * tp, 2 * tp + fp + fn, absent=True),
        "JA": _safe_ratio(tp, tp + fp + fn, absent=True),
    }


@dataclass
class MetricReport:
    """Per-image metric rows plus their unweighted mean."""

    rows: list[tuple[str, dict[str, float]]]

    def mean(self) -> dict[str, float]:
        if not self.rows:
            raise ContractError("empty metric report")
        n = len(self.rows)
        # fsum keeps the mean exact, hence independent of image order
        return {name: math.fsum(r[1][name] for r in self.rows) / n
                for name in METRIC_NAMES}

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("image," + ",".join(METRIC_NAMES) + "\n")
        for image_id, values in self.rows:
            out.write(image_id + ","
                      + ",".join(f"{values[m]:.4f}" for m in METRIC_NAMES)
                      + "\n")
        mean = self.mean()
        out.write("MEAN,"
                  + ",".join(f"{mean[m]:.4f}" for m in METRIC_NAMES) + "\n")
        return out.getvalue()
