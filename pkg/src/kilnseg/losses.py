"""Segmentation losses and class-imbalance weighting.

All three losses take per-pixel class probabilities ``(N, C, H, W)`` and
either an integer target mask ``(N, H, W)`` or its one-hot encoding. Class
weights are normalised inside every loss, so scaling them leaves the value
unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Tensor, log

SMOOTH = 1e-6
LOG_CLAMP = 1e-12

SCHEMES = ("NONE", "ISV", "ISRV")


@dataclass(frozen=True)
class ClassWeightTable:
    frequencies: np.ndarray
    weights: np.ndarray
    scheme: str = "NONE"

    def __post_init__(self):
        if self.frequencies.shape != self.weights.shape:
            raise ShapeError("frequencies and weights must align")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown weighting scheme {self.scheme!r}")


def class_frequencies(masks: Iterable[np.ndarray], num_classes: int = 4) -> ClassWeightTable:
    """Fraction of all pixels carrying each class id."""
    counts = np.zeros(num_classes, dtype=np.int64)
    seen = False
    for m in masks:
        m = np.asarray(m)
        if m.size and m.max() >= num_classes:
            raise ShapeError(f"class id {m.max()} >= num_classes {num_classes}")
        counts += np.bincount(m.ravel(), minlength=num_classes)[:num_classes]
        seen = True
    if not seen or counts.sum() == 0:
        raise ShapeError("class_frequencies needs at least one non-empty mask")
    freqs = counts / counts.sum()
    return ClassWeightTable(freqs, np.ones(num_classes), "NONE")


def class_weights(table: ClassWeightTable, scheme: str) -> ClassWeightTable:
    """ISV: 1/f^2, ISRV: 1/sqrt(f), NONE: 1."""
    scheme = scheme.upper()
    f = np.asarray(table.frequencies, dtype=np.float64)
    if scheme == "NONE":
        return ClassWeightTable(f, np.ones_like(f), "NONE")
    if scheme not in SCHEMES:
        raise ConfigError(f"unknown weighting scheme {scheme!r}")
    if np.any(f <= 0):
        missing = np.flatnonzero(f <= 0).tolist()
        raise ConfigError(f"{scheme} undefined: classes {missing} never occur in the training set")
    w = 1.0 / f**2 if scheme == "ISV" else 1.0 / np.sqrt(f)
    return ClassWeightTable(f, w, scheme)


def one_hot(target: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """(N, H, W) ids -> (N, C, H, W) indicator array."""
    target = np.asarray(target)
    if target.min() < 0 or target.max() >= num_classes:
        raise ShapeError("target ids out of range")
    return np.moveaxis(np.eye(num_classes, dtype=dtype)[target], -1, 1)


def _as_one_hot(target, probs: Tensor) -> np.ndarray:
    target = np.asarray(target)
    if target.shape == probs.shape:
        return target.astype(probs.dtype)
    if target.shape != (probs.shape[0],) + probs.shape[2:]:
        raise ShapeError(f"target {target.shape} does not match probs {probs.shape}")
    return one_hot(target, probs.shape[1], probs.dtype)


def _weights(weights, num_classes: int, dtype) -> np.ndarray:
    if weights is None:
        return np.ones(num_classes, dtype=dtype)
    if isinstance(weights, ClassWeightTable):
        weights = weights.weights
    w = np.asarray(weights, dtype=dtype)
    if w.shape != (num_classes,) or np.any(w <= 0):
        raise ShapeError("weights must be positive, one per class")
    return w


def cross_entropy_loss(probs: Tensor, target, weights=None) -> Tensor:
    """Weighted mean of ``-log p[target]`` over pixels, normalised by total weight."""
    g = _as_one_hot(target, probs)
    w = _weights(weights, probs.shape[1], probs.dtype).reshape(1, -1, 1, 1)
    wg = g * w
    total = wg.sum()
    return (log(probs, clamp=LOG_CLAMP) * Tensor(wg)).sum() * (-1.0 / total)


def _normalised(weights, c, dtype) -> np.ndarray:
    w = _weights(weights, c, dtype)
    return w / w.sum()


def dice_loss(probs: Tensor, target, weights=None) -> Tensor:
    """``1 - sum_c w_c * 2 sum(p g) / (sum p^2 + sum g^2 + eps)``."""
    g = _as_one_hot(target, probs)
    axes = (0, 2, 3)
    inter = (probs * Tensor(g)).sum(axis=axes)
    denom = (probs * probs).sum(axis=axes) + (g * g).sum(axis=axes) + SMOOTH
    coef = inter * 2.0 / denom
    w = _normalised(weights, probs.shape[1], probs.dtype)
    return 1.0 - (coef * Tensor(w)).sum()


def _tanimoto(p: Tensor, g: np.ndarray) -> Tensor:
    axes = (0, 2, 3)
    pg = (p * Tensor(g)).sum(axis=axes)
    denom = (p * p).sum(axis=axes) + (g * g).sum(axis=axes) - pg + SMOOTH
    return pg / denom


def tanimoto_loss(probs: Tensor, target, weights=None) -> Tensor:
    """Complement-averaged Tanimoto: ``1 - (T(p, g) + T(1-p, 1-g)) / 2`` per class."""
    g = _as_one_hot(target, probs)
    t = (_tanimoto(probs, g) + _tanimoto(1.0 - probs, 1.0 - g)) * 0.5
    w = _normalised(weights, probs.shape[1], probs.dtype)
    return 1.0 - (t * Tensor(w)).sum()


def binary_cross_entropy(p: Tensor, labels: Sequence[float], negative_weight: float = 1.0) -> Tensor:
    """Mean BCE of sigmoid outputs ``p`` (shape (N,)) against 0/1 labels.

    ``negative_weight`` scales the terms of label-0 samples; values above 1
    trade recall for precision.
    """
    if negative_weight <= 0:
        raise ConfigError("negative_weight must be positive")
    y = np.asarray(labels, dtype=p.dtype).reshape(p.shape)
    pos = log(p, clamp=LOG_CLAMP) * Tensor(y)
    neg = log(1.0 - p, clamp=LOG_CLAMP) * Tensor(1.0 - y)
    if negative_weight == 1.0:
        return (pos + neg).mean() * -1.0
    w = np.where(y > 0, 1.0, negative_weight).astype(p.dtype)
    return ((pos + neg) * Tensor(w)).mean() * -1.0


LOSSES = {"ce": cross_entropy_loss, "dice": dice_loss, "tanimoto": tanimoto_loss}


def get_loss(name: str):
    try:
        return LOSSES[name]
    except KeyError:
        raise ConfigError(f"unknown loss {name!r}; choose from {sorted(LOSSES)}") from None
