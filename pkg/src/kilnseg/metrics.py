"""Segmentation metrics and the slag-fraction stability monitor."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigError, ShapeError

CLASS_NAMES = ("background", "slag", "camera edge", "wall")
SLAG = 1


@dataclass(frozen=True)
class MonitorConfig:
    window: int = 60
    slag_class: int = SLAG
    height: int = 64
    width: int = 64

    def __post_init__(self):
        if self.window < 2:
            raise ConfigError("running-variance window must be >= 2")


class ConfusionMatrix:
    """Counts ``(i, j)`` = pixels of true class i predicted as class j.

    Matrices over disjoint pixel sets merge by ``+``.
    """

    def __init__(self, counts: np.ndarray):
        counts = np.asarray(counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1] or np.any(counts < 0):
            raise ShapeError("confusion counts must be a square non-negative matrix")
        self.counts = counts

    @classmethod
    def empty(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    def tp(self, c: int) -> int:
        return int(self.counts[c, c])

    def fp(self, c: int) -> int:
        return int(self.counts[:, c].sum() - self.counts[c, c])

    def fn(self, c: int) -> int:
        return int(self.counts[c, :].sum() - self.counts[c, c])

    def tn(self, c: int) -> int:
        return self.total - self.tp(c) - self.fp(c) - self.fn(c)


def confusion_matrix(pred, truth, num_classes: int = 4) -> ConfusionMatrix:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {pred.shape} and truth {truth.shape} differ")
    idx = truth.astype(np.int64).ravel() * num_classes + pred.astype(np.int64).ravel()
    counts = np.bincount(idx, minlength=num_classes * num_classes)
    return ConfusionMatrix(counts.reshape(num_classes, num_classes))


def pixel_accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise ShapeError("accuracy of an empty confusion matrix")
    return float(np.trace(cm.counts) / cm.total)


def iou_class(cm: ConfusionMatrix, c: int) -> float:
    """TP / (TP + FP + FN); a class absent from both maps scores 1.0."""
    if not 0 <= c < cm.num_classes:
        raise ShapeError(f"class {c} out of range")
    union = cm.tp(c) + cm.fp(c) + cm.fn(c)
    if union == 0:
        return 1.0
    return cm.tp(c) / union


def mean_iou(cm: ConfusionMatrix) -> float:
    """Unweighted mean IoU over classes present in truth or prediction.

    Classes absent from the whole evaluation set are left out.
    """
    if cm.total == 0:
        raise ShapeError("mean IoU of an empty confusion matrix")
    present = [c for c in range(cm.num_classes)
               if cm.counts[c, :].sum() + cm.counts[:, c].sum() > 0]
    return float(np.mean([iou_class(cm, c) for c in present]))


def slag_fraction(pred, cfg: Optional[MonitorConfig] = None) -> float:
    pred = np.asarray(pred)
    cfg = cfg or MonitorConfig(height=pred.shape[0], width=pred.shape[1])
    if pred.shape != (cfg.height, cfg.width):
        raise ShapeError(f"mask {pred.shape} does not match monitor {(cfg.height, cfg.width)}")
    return float(np.count_nonzero(pred == cfg.slag_class) / (cfg.height * cfg.width))


def running_variance(series: Sequence[float], cfg: MonitorConfig | int = 60) -> list[float]:
    """Population variance of each full window of ``k`` consecutive values.

    Returns ``len(series) - k + 1`` values; the i-th belongs to the window
    ending at ``series[i + k - 1]``.
    """
    k = cfg.window if isinstance(cfg, MonitorConfig) else int(cfg)
    if k < 2:
        raise ConfigError("running-variance window must be >= 2")
    rv = RunningVariance(k)
    out = []
    for x in series:
        v = rv.push(x)
        if v is not None:
            out.append(v)
    return out


class RunningVariance:
    """Single-pass sliding-window population variance (Welford add/remove)."""

    def __init__(self, window: int):
        if window < 2:
            raise ConfigError("running-variance window must be >= 2")
        self.window = window
        self._buf: deque = deque()
        self._mean = 0.0
        self._m2 = 0.0

    def push(self, x: float) -> Optional[float]:
        """Add a value; return the window variance once the window is full."""
        x = float(x)
        self._buf.append(x)
        n = len(self._buf)
        delta = x - self._mean
        self._mean += delta / n
        self._m2 += delta * (x - self._mean)
        if n > self.window:
            old = self._buf.popleft()
            n -= 1
            delta = old - self._mean
            self._mean -= delta / n
            self._m2 -= delta * (old - self._mean)
        if n < self.window:
            return None
        return max(self._m2, 0.0) / n


def evaluate_masks(preds: Iterable, truths: Iterable, num_classes: int = 4) -> dict:
    """Per-class IoU, mIoU and accuracy over a corpus of mask pairs."""
    cm = ConfusionMatrix.empty(num_classes)
    for p, t in zip(preds, truths):
        cm = cm + confusion_matrix(p, t, num_classes)
    return {
        "iou": [iou_class(cm, c) for c in range(num_classes)],
        "miou": mean_iou(cm),
        "accuracy": pixel_accuracy(cm),
        "confusion": cm,
    }
