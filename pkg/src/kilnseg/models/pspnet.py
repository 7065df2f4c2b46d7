"""Dilated residual backbone, pyramid pooling module and PSPNet."""

from __future__ import annotations

from .. import ops
from ..errors import ShapeError
from ..tensor import Tensor
from .base import BatchNorm2d, Conv2d, ConvBNReLU, ModelGraph, register
from .config import ModelConfig


def stage_plan(config: ModelConfig) -> list[tuple[int, int, int]]:
    """(width, stride, dilation) per stage.

    Strides are kept while the running downsampling stays within
    ``output_stride``; past that each stride is replaced by doubling (or
    multiplying) the dilation of the remaining stages.
    """
    config.check_backbone()
    current = 2 * (2 if config.stem_pool else 1)
    if current > config.output_stride:
        raise ShapeError("stem already downsamples beyond output_stride")
    dilation = 1
    plan = []
    for width, stride in zip(config.backbone_widths, config.stage_strides):
        if current * stride <= config.output_stride:
            current *= stride
            plan.append((width, stride, dilation))
        else:
            dilation *= stride
            plan.append((width, 1, dilation))
    if current != config.output_stride:
        raise ShapeError(f"stage strides reach only {current}, not {config.output_stride}")
    return plan


class BasicBlock:
    expansion = 1

    def __init__(self, graph, name, cin, width, stride, dilation):
        cout = width
        self.conv1 = Conv2d(graph, f"{name}.conv1", cin, cout, 3, stride, dilation, bias=False)
        self.bn1 = BatchNorm2d(graph, f"{name}.bn1", cout)
        self.conv2 = Conv2d(graph, f"{name}.conv2", cout, cout, 3, 1, dilation, bias=False)
        self.bn2 = BatchNorm2d(graph, f"{name}.bn2", cout)
        self.proj = None
        if stride != 1 or cin != cout:
            self.proj = Conv2d(graph, f"{name}.proj", cin, cout, 1, stride, bias=False)
            self.proj_bn = BatchNorm2d(graph, f"{name}.proj_bn", cout)
        self.out_channels = cout

    def shortcut(self, x, training):
        return x if self.proj is None else self.proj_bn(self.proj(x), training)

    def __call__(self, x, training):
        y = ops.relu(self.bn1(self.conv1(x), training))
        y = self.bn2(self.conv2(y), training)
        return ops.relu(y + self.shortcut(x, training))


class Bottleneck(BasicBlock):
    expansion = 4

    def __init__(self, graph, name, cin, width, stride, dilation):
        cout = width * self.expansion
        self.conv1 = Conv2d(graph, f"{name}.conv1", cin, width, 1, bias=False)
        self.bn1 = BatchNorm2d(graph, f"{name}.bn1", width)
        self.conv2 = Conv2d(graph, f"{name}.conv2", width, width, 3, stride, dilation, bias=False)
        self.bn2 = BatchNorm2d(graph, f"{name}.bn2", width)
        self.conv3 = Conv2d(graph, f"{name}.conv3", width, cout, 1, bias=False)
        self.bn3 = BatchNorm2d(graph, f"{name}.bn3", cout)
        self.proj = None
        if stride != 1 or cin != cout:
            self.proj = Conv2d(graph, f"{name}.proj", cin, cout, 1, stride, bias=False)
            self.proj_bn = BatchNorm2d(graph, f"{name}.proj_bn", cout)
        self.out_channels = cout

    def __call__(self, x, training):
        y = ops.relu(self.bn1(self.conv1(x), training))
        y = ops.relu(self.bn2(self.conv2(y), training))
        y = self.bn3(self.conv3(y), training)
        return ops.relu(y + self.shortcut(x, training))


class DilatedBackbone:
    def __init__(self, graph: ModelGraph, name: str, config: ModelConfig):
        self.plan = stage_plan(config)
        self.stem = ConvBNReLU(graph, f"{name}.stem", config.in_channels, config.stem_width,
                               config.stem_kernel, stride=2)
        self.stem_pool = config.stem_pool
        if self.stem_pool:
            graph.add_layer("pool", f"{name}.stem_pool", window=2)
        block_cls = Bottleneck if config.block == "bottleneck" else BasicBlock
        cin = config.stem_width
        self.blocks = []
        for s, ((width, stride, dilation), depth) in enumerate(zip(self.plan, config.backbone_depth)):
            for b in range(depth):
                block = block_cls(graph, f"{name}.stage{s}.{b}", cin, width,
                                  stride if b == 0 else 1, dilation)
                self.blocks.append(block)
                cin = block.out_channels
        self.out_channels = cin

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        x = self.stem(x, training)
        if self.stem_pool:
            x = ops.max_pool2d(x, 2)
        for block in self.blocks:
            x = block(x, training)
        return x


class PyramidPooling:
    """Average-pool into each bin grid, 1x1-reduce, upsample, concat onto the input."""

    def __init__(self, graph: ModelGraph, name: str, channels: int, bins):
        if channels % len(bins):
            raise ShapeError(f"{channels} channels not divisible by {len(bins)} pyramid bins")
        self.bins = tuple(bins)
        reduced = channels // len(bins)
        self.convs = [Conv2d(graph, f"{name}.branch{b}", channels, reduced, 1) for b in self.bins]
        self.out_channels = 2 * channels

    def pooled(self, x: Tensor) -> list[Tensor]:
        return [ops.adaptive_avg_pool2d(x, b) for b in self.bins]

    def __call__(self, x: Tensor) -> Tensor:
        h, w = x.shape[2], x.shape[3]
        branches = [
            ops.upsample_bilinear(ops.relu(conv(p)), h, w)
            for conv, p in zip(self.convs, self.pooled(x))
        ]
        return ops.concat_channels(x, *branches)


@register("backbone")
class BackboneGraph(ModelGraph):
    config_cls = ModelConfig

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__(config, seed)
        self.backbone = DilatedBackbone(self, "backbone", config)

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        self.check_input(x, *self.config.input_size)
        return self.backbone(x, training)

    __call__ = forward


class PSPTrunk:
    """Backbone, pyramid pooling and the 3x3 conv stack: everything before the classifier."""

    def __init__(self, graph: ModelGraph, config: ModelConfig):
        self.backbone = DilatedBackbone(graph, "backbone", config)
        c = self.backbone.out_channels
        self.ppm = PyramidPooling(graph, "ppm", c, config.pyramid_bins)
        self.out_channels = config.head_channels or c
        self.head = ConvBNReLU(graph, "head", self.ppm.out_channels, self.out_channels, 3)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return self.head(self.ppm(self.backbone(x, training)), training)


TRUNK_PREFIXES = ("backbone.", "ppm.", "head.")


@register("pspnet")
class PSPNet(ModelGraph):
    config_cls = ModelConfig

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__(config, seed)
        self.trunk = PSPTrunk(self, config)
        self.classifier = Conv2d(self, "classifier", self.trunk.out_channels, config.num_classes, 1)

    def features(self, x: Tensor, training: bool = False) -> Tensor:
        self.check_input(x, *self.config.input_size)
        return self.trunk(x, training)

    def logits(self, x: Tensor, training: bool = False) -> Tensor:
        h, w = self.config.input_size
        return ops.upsample_bilinear(self.classifier(self.features(x, training)), h, w)

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        return ops.softmax(self.logits(x, training), axis=1)

    __call__ = forward


def build_dilated_backbone(config: ModelConfig, seed: int = 0) -> BackboneGraph:
    return BackboneGraph(config, seed)


def build_pspnet(config: ModelConfig, seed: int = 0) -> PSPNet:
    return PSPNet(config, seed)


def pyramid_pooling_forward(module: PyramidPooling, features: Tensor) -> Tensor:
    return module(features)


def pspnet_forward(model: PSPNet, frame: Tensor) -> Tensor:
    return model.forward(frame)
