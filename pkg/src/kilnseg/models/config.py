from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

from ..errors import ConfigError


def _power_of_two(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


@dataclass(frozen=True)
class ModelConfig:
    """Hyper-parameters shared by the U-Net, PSPNet and PSPNet-LSTM builders.

    ``base_filters`` is the first U-Net stage width (4 = 64 / 16). The
    backbone fields describe a dilated ResNet: ``backbone_widths`` per stage,
    ``backbone_depth`` residual blocks per stage, ``stage_strides`` the
    nominal strides, of which the later ones are traded for dilation until
    the total downsampling equals ``output_stride``.
    """

    input_size: tuple = (64, 64)
    in_channels: int = 3
    num_classes: int = 4
    base_filters: int = 4
    unet_depth: int = 4
    backbone_widths: tuple = (16, 16, 24, 24)
    backbone_depth: tuple = (1, 1, 1, 1)
    stem_width: int = 12
    stem_kernel: int = 3
    stem_pool: bool = False
    stage_strides: tuple = (2, 2, 2, 2)
    block: str = "basic"
    pyramid_bins: tuple = (1, 2, 3, 6)
    head_channels: Optional[int] = None
    lstm_hidden_channels: Optional[int] = None
    output_stride: int = 8

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.base_filters < 1:
            raise ConfigError("base_filters must be >= 1")
        if isinstance(self.backbone_depth, int):
            object.__setattr__(self, "backbone_depth", (self.backbone_depth,) * len(self.backbone_widths))
        if len(self.backbone_depth) != len(self.backbone_widths) or len(self.stage_strides) != len(self.backbone_widths):
            raise ConfigError("backbone_widths, backbone_depth and stage_strides must align")
        bins = list(self.pyramid_bins)
        if any(b < 1 for b in bins) or any(a >= b for a, b in zip(bins, bins[1:])):
            raise ConfigError("pyramid_bins must be strictly increasing positive integers")
        if self.block not in ("basic", "bottleneck"):
            raise ConfigError(f"unknown residual block {self.block!r}")

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)

    @property
    def feature_size(self) -> tuple:
        return (self.input_size[0] // self.output_stride, self.input_size[1] // self.output_stride)

    def check_backbone(self) -> None:
        if not _power_of_two(self.output_stride) or self.output_stride < 2:
            raise ConfigError(f"output_stride {self.output_stride} must be a power of two >= 2")
        h, w = self.input_size
        if h % self.output_stride or w % self.output_stride:
            raise ConfigError(f"input {self.input_size} not divisible by output_stride {self.output_stride}")
        fh, fw = self.feature_size
        if max(self.pyramid_bins) > min(fh, fw):
            raise ConfigError(f"pyramid bin {max(self.pyramid_bins)} exceeds feature map {fh}x{fw}")

    @classmethod
    def tiny(cls, **changes) -> "ModelConfig":
        """8x8 inputs with 2-filter stages, for gradient checks."""
        base = dict(input_size=(8, 8), base_filters=2, unet_depth=2, backbone_widths=(2, 4),
                    backbone_depth=(1, 1), stem_width=2, stage_strides=(2, 2),
                    pyramid_bins=(1, 2), output_stride=4)
        base.update(changes)
        return cls(**base)

    @classmethod
    def resnet50(cls, **changes) -> "ModelConfig":
        """Full-scale dilated ResNet-50 layout (49 backbone convolutions)."""
        base = dict(input_size=(480, 640), backbone_widths=(64, 128, 256, 512),
                    backbone_depth=(3, 4, 6, 3), stem_width=64, stem_kernel=7, stem_pool=True,
                    stage_strides=(1, 2, 2, 2), block="bottleneck", head_channels=512)
        base.update(changes)
        return cls(**base)
