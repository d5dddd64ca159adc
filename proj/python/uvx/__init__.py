"""U-VixLSTM segmentation toolkit: model, losses, metrics, synthetic data and training."""

from ._uvx import (
    ConfigError,
    ContractError,
    ForgetGate,
    FormatError,
    Model,
    ModelConfig,
    NumericError,
    ShapeError,
    UvxError,
    bench,
    composite_loss,
    dsc_iou,
    evaluate,
    gradcheck,
    hd95,
    load_case,
    synth,
    tiny_model_config,
    train,
)

__all__ = [
    "ConfigError",
    "ContractError",
    "ForgetGate",
    "FormatError",
    "Model",
    "ModelConfig",
    "NumericError",
    "ShapeError",
    "UvxError",
    "bench",
    "composite_loss",
    "dsc_iou",
    "evaluate",
    "gradcheck",
    "hd95",
    "load_case",
    "synth",
    "tiny_model_config",
    "train",
]
