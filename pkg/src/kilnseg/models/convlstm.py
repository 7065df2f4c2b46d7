"""Convolutional LSTM cell and the two-frame PSPNet-LSTM."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .. import ops
from ..errors import ConfigError, ShapeError
from ..tensor import Tensor
from .base import Conv2d, ModelGraph, register
from .config import ModelConfig
from .pspnet import TRUNK_PREFIXES, PSPNet, PSPTrunk

GATES = ("input", "forget", "output", "candidate")


class ConvLSTMState(NamedTuple):
    h: Tensor
    c: Tensor

    @classmethod
    def zeros(cls, batch: int, channels: int, height: int, width: int, dtype=np.float32):
        z = np.zeros((batch, channels, height, width), dtype=dtype)
        return cls(Tensor(z), Tensor(z.copy()))


class ConvLSTMWeights(NamedTuple):
    """Gate kernels stacked in (input, forget, output, candidate) order."""

    wx: Tensor  # (4 * hidden, in_channels, 3, 3)
    wh: Tensor  # (4 * hidden, hidden, 3, 3)
    bias: Tensor  # (4 * hidden,)


def convlstm_step(x: Tensor, state: ConvLSTMState, weights: ConvLSTMWeights) -> ConvLSTMState:
    """One peephole-free convLSTM update with 3x3 zero-padded gate convolutions."""
    hidden = state.h.shape[1]
    if x.shape[2:] != state.h.shape[2:]:
        raise ShapeError(f"input {x.shape} and state {state.h.shape} differ spatially")
    if weights.wx.shape[:2] != (4 * hidden, x.shape[1]) or weights.wh.shape[:2] != (4 * hidden, hidden):
        raise ShapeError("convLSTM weights do not match input/hidden channels")
    k = weights.wx.shape[2]
    gates = ops.conv2d(x, weights.wx, weights.bias, padding=k // 2) + ops.conv2d(
        state.h, weights.wh, None, padding=k // 2
    )
    i, f, o, g = ops.split_channels(gates, 4)
    i, f, o, g = ops.sigmoid(i), ops.sigmoid(f), ops.sigmoid(o), ops.tanh(g)
    c = f * state.c + i * g
    h = o * ops.tanh(c)
    return ConvLSTMState(h, c)


class ConvLSTMCell:
    def __init__(self, graph: ModelGraph, name: str, cin: int, hidden: int, kernel: int = 3):
        self.hidden = hidden
        wx = graph.param(f"{name}.wx", (4 * hidden, cin, kernel, kernel), "glorot")
        wh = graph.param(f"{name}.wh", (4 * hidden, hidden, kernel, kernel), "glorot")
        bias = graph.param(f"{name}.bias", (4 * hidden,), "zeros")
        bias.data[hidden : 2 * hidden] = 1.0  # forget gate starts open
        self.weights = ConvLSTMWeights(wx, wh, bias)
        graph.add_layer("convlstm", name, cin=cin, hidden=hidden, kernel=kernel)

    def __call__(self, x: Tensor, state: ConvLSTMState) -> ConvLSTMState:
        return convlstm_step(x, state, self.weights)


@register("pspnet-lstm")
class PSPNetLSTM(ModelGraph):
    """PSPNet whose classifier is replaced by a two-step convLSTM.

    Both frames run through the same trunk parameters. The earlier frame
    drives the first cell step from a zero state; the later frame drives the
    second step, whose hidden state is classified.
    """

    config_cls = ModelConfig

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__(config, seed)
        self.trunk = PSPTrunk(self, config)
        hidden = config.lstm_hidden_channels or self.trunk.out_channels
        self.cell = ConvLSTMCell(self, "lstm", self.trunk.out_channels, hidden)
        self.classifier = Conv2d(self, "lstm_head", hidden, config.num_classes, 1)

    def features(self, x: Tensor, training: bool = False) -> Tensor:
        self.check_input(x, *self.config.input_size)
        return self.trunk(x, training)

    def logits_from_features(self, prev: Tensor, cur: Tensor) -> Tensor:
        n, _, fh, fw = cur.shape
        state = ConvLSTMState.zeros(n, self.cell.hidden, fh, fw, cur.dtype)
        state = self.cell(prev, state)
        state = self.cell(cur, state)
        h, w = self.config.input_size
        return ops.upsample_bilinear(self.classifier(state.h), h, w)

    def forward_features(self, prev: Tensor, cur: Tensor) -> Tensor:
        return ops.softmax(self.logits_from_features(prev, cur), axis=1)

    def forward(self, prev: Tensor, cur: Tensor, training: bool = False) -> Tensor:
        if prev.shape != cur.shape:
            raise ShapeError(f"pair frames differ: {prev.shape} vs {cur.shape}")
        return self.forward_features(self.features(prev, training), self.features(cur, training))

    __call__ = forward


@dataclass(frozen=True)
class LSTMConfig:
    hidden_channels: Optional[int] = None
    seed: int = 1


def init_lstm_variant_from_base(base: ModelGraph, lstm_config: LSTMConfig = LSTMConfig()) -> PSPNetLSTM:
    """Copy a PSPNet's trunk bit-exactly into a fresh PSPNet-LSTM and freeze it."""
    if not isinstance(base, PSPNet):
        raise ConfigError(f"PSPNet-LSTM transfers from a PSPNet, not {base.kind!r}")
    config = base.config.with_(lstm_hidden_channels=lstm_config.hidden_channels)
    model = PSPNetLSTM(config, seed=lstm_config.seed)
    for name, p in model.params.items():
        if name.startswith(TRUNK_PREFIXES):
            src = base.params.get(name)
            if src is None or src.shape != p.shape:
                raise ConfigError(f"base has no compatible parameter {name!r}")
            p.data = src.data.copy()
            p.requires_grad = False
    for name, stats in model.stats.items():
        src = base.stats[name]
        stats.mean, stats.var = src.mean.copy(), src.var.copy()
    return model


def pspnet_lstm_forward(model: PSPNetLSTM, pair) -> Tensor:
    """Segment the later frame of ``pair`` = (earlier, later)."""
    prev, cur = pair
    return model.forward(prev, cur)
