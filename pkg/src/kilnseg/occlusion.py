"""Binary occlusion discriminator that gates frames before segmentation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError
from .models.base import ConvBNReLU, Linear, ModelGraph, register, to_tensor
from .tensor import Tensor


@dataclass(frozen=True)
class DiscriminatorConfig:
    input_size: tuple = (64, 64)
    in_channels: int = 3
    channels: tuple = (8, 16, 32)
    dropout: float = 0.25

    def __post_init__(self):
        if len(self.channels) != 3:
            raise ConfigError("the discriminator has exactly three blocks")
        h, w = self.input_size
        if h < 8 or w < 8:
            raise ConfigError(f"input {self.input_size} too small for three 2x2 pooling stages")


@register("discriminator")
class OcclusionDiscriminator(ModelGraph):
    """Three [conv-BN-ReLU, conv-BN-ReLU, max-pool, dropout] blocks, a dense layer, a sigmoid."""

    config_cls = DiscriminatorConfig

    def __init__(self, config: DiscriminatorConfig = DiscriminatorConfig(), seed: int = 0):
        super().__init__(config, seed)
        self.blocks = []
        cin = config.in_channels
        for i, cout in enumerate(config.channels):
            a = ConvBNReLU(self, f"block{i}.0", cin, cout, 3)
            b = ConvBNReLU(self, f"block{i}.1", cout, cout, 3)
            self.add_layer("pool", f"block{i}.pool", window=2)
            self.add_layer("dropout", f"block{i}.dropout", rate=config.dropout)
            self.blocks.append((a, b))
            cin = cout
        h, w = config.input_size
        self.features = cin * (h // 8) * (w // 8)
        self.dense = Linear(self, "dense", self.features, 1)

    def forward(self, x: Tensor, training: bool = False,
                rng: Optional[np.random.Generator] = None) -> Tensor:
        """Occlusion probability per image, shape (N,). Dropout only when training with an rng."""
        self.check_input(x, *self.config.input_size)
        drop_rng = rng if training else None
        for a, b in self.blocks:
            x = b(a(x, training), training)
            x = ops.max_pool2d(x, 2)
            x = ops.dropout(x, self.config.dropout, drop_rng)
        logit = self.dense(ops.flatten(x))
        return ops.sigmoid(logit).reshape(-1)

    __call__ = forward


def build_discriminator(config: DiscriminatorConfig = DiscriminatorConfig(), seed: int = 0):
    return OcclusionDiscriminator(config, seed)


@dataclass(frozen=True)
class OcclusionVerdict:
    probability: float
    threshold: float = 0.5

    @property
    def occluded(self) -> bool:
        return self.probability >= self.threshold


def classify_occlusion(model: OcclusionDiscriminator, frame, threshold: float = 0.5) -> OcclusionVerdict:
    """Deterministic verdict for one uint8 HxWx3 frame (or a prepared tensor)."""
    x = frame if isinstance(frame, Tensor) else to_tensor(frame)
    if x.shape[0] != 1:
        raise ShapeError("classify_occlusion takes a single frame")
    p = float(model.forward(x, training=False).data[0])
    return OcclusionVerdict(p, threshold)


def occlusion_probabilities(model: OcclusionDiscriminator, frames, batch_size: int = 32) -> np.ndarray:
    frames = np.asarray(frames)
    out = [model.forward(to_tensor(frames[i : i + batch_size])).data
           for i in range(0, len(frames), batch_size)]
    return np.concatenate(out).astype(np.float64)


def precision_recall(verdicts: Sequence, truth_flags: Sequence[bool]) -> tuple[Optional[float], float]:
    """Precision and recall with "occluded" as the positive class.

    ``verdicts`` may be :class:`OcclusionVerdict` objects or booleans.
    Precision is ``None`` when nothing was predicted occluded.
    """
    pred = np.array([v.occluded if isinstance(v, OcclusionVerdict) else bool(v) for v in verdicts])
    truth = np.asarray(truth_flags, dtype=bool)
    if pred.shape != truth.shape:
        raise ShapeError("verdicts and truth flags differ in length")
    if not truth.any():
        raise ShapeError("recall needs at least one occluded frame in truth")
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    precision = tp / (tp + fp) if tp + fp else None
    return precision, tp / (tp + fn)
