"""From-scratch network stack: layers, blocks, models, training."""

from .blocks import ConvNeXtBlock, DoubleConv
from .layers import (
    Layer,
    circular_pad_gantry,
    circular_pad_gantry_backward,
    crop_gantry,
    crop_gantry_backward,
    nan_check_mode,
    trunc_normal,
)
from .models import ARCHS, MedNext, NetConfig, UNet, build_model
from .train import (
    Adam,
    LoadedCheckpoint,
    TrainResult,
    curve_to_csv,
    load_checkpoint,
    loss_l1l2,
    predict_fluence,
    save_checkpoint,
    train,
)

__all__ = [
    "ARCHS",
    "Adam",
    "ConvNeXtBlock",
    "DoubleConv",
    "Layer",
    "LoadedCheckpoint",
    "MedNext",
    "NetConfig",
    "TrainResult",
    "UNet",
    "build_model",
    "circular_pad_gantry",
    "circular_pad_gantry_backward",
    "crop_gantry",
    "crop_gantry_backward",
    "curve_to_csv",
    "load_checkpoint",
    "loss_l1l2",
    "nan_check_mode",
    "predict_fluence",
    "save_checkpoint",
    "train",
    "trunc_normal",
]
