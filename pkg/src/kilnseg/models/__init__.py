from .base import ModelGraph, to_tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ModelConfig
from .convlstm import (
    ConvLSTMState,
    ConvLSTMWeights,
    LSTMConfig,
    PSPNetLSTM,
    convlstm_step,
    init_lstm_variant_from_base,
    pspnet_lstm_forward,
)
from .pspnet import (
    PSPNet,
    PyramidPooling,
    build_dilated_backbone,
    build_pspnet,
    pspnet_forward,
    pyramid_pooling_forward,
    stage_plan,
)
from .unet import UNetMini, build_unet_mini

__all__ = [
    "ConvLSTMState", "ConvLSTMWeights", "LSTMConfig", "ModelConfig", "ModelGraph", "PSPNet",
    "PSPNetLSTM", "PyramidPooling", "UNetMini", "build_dilated_backbone", "build_pspnet",
    "build_unet_mini", "convlstm_step", "init_lstm_variant_from_base", "load_checkpoint",
    "pspnet_forward", "pspnet_lstm_forward", "pyramid_pooling_forward", "save_checkpoint",
    "stage_plan", "to_tensor",
]
