"""From-scratch CPU toolkit for the sequential feature filtering classifier head."""

from .head import (
    EnsembleRule,
    FfcHead,
    FfcOutputs,
    ensemble_predict,
    ffc_backward,
    ffc_forward,
    filter_step,
    head_statistics,
    overhead_report,
    train_loss,
)
from .model import Model, ModelConfig
from .optim import TrainConfig

__version__ = "0.1.0"

__all__ = [
    "EnsembleRule",
    "FfcHead",
    "FfcOutputs",
    "Model",
    "ModelConfig",
    "TrainConfig",
    "ensemble_predict",
    "ffc_backward",
    "ffc_forward",
    "filter_step",
    "head_statistics",
    "overhead_report",
    "train_loss",
]
