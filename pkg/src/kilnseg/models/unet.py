"""Mini U-Net: the original encoder-decoder with 16x fewer filters."""

from __future__ import annotations

from .. import ops
from ..errors import ConfigError
from ..tensor import Tensor
from .base import Conv2d, ModelGraph, TransposedConv2d, register
from .config import ModelConfig


class DoubleConv:
    def __init__(self, graph, name, cin, cout):
        self.a = Conv2d(graph, f"{name}.0", cin, cout, 3)
        self.b = Conv2d(graph, f"{name}.1", cout, cout, 3)

    def __call__(self, x):
        return ops.relu(self.b(ops.relu(self.a(x))))


@register("unet")
class UNetMini(ModelGraph):
    config_cls = ModelConfig

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__(config, seed)
        depth = config.unet_depth
        h, w = config.input_size
        if depth < 1:
            raise ConfigError("unet_depth must be >= 1")
        if h % 2**depth or w % 2**depth:
            raise ConfigError(f"input {config.input_size} not divisible by 2^{depth}")
        self.filters = [config.base_filters * 2**i for i in range(depth + 1)]
        f = self.filters
        self.down = []
        cin = config.in_channels
        for i in range(depth):
            self.down.append(DoubleConv(self, f"enc{i}", cin, f[i]))
            self.add_layer("pool", f"pool{i}", window=2)
            cin = f[i]
        self.bottom = DoubleConv(self, "bottom", f[depth - 1], f[depth])
        self.up = []
        for i in reversed(range(depth)):
            self.up.append((TransposedConv2d(self, f"up{i}", f[i + 1], f[i]),
                            DoubleConv(self, f"dec{i}", 2 * f[i], f[i])))
        self.classifier = Conv2d(self, "classifier", f[0], config.num_classes, 1)

    def logits(self, x: Tensor, training: bool = False) -> Tensor:
        self.check_input(x, *self.config.input_size)
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = ops.max_pool2d(x, 2)
        x = self.bottom(x)
        for (upconv, block), skip in zip(self.up, reversed(skips)):
            x = block(ops.concat_channels(skip, upconv(x)))
        return self.classifier(x)

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        return ops.softmax(self.logits(x, training), axis=1)

    __call__ = forward


def build_unet_mini(config: ModelConfig, seed: int = 0) -> UNetMini:
    return UNetMini(config, seed)
