"""Neural approximation of the feedback operator ``(tau, x, u) -> U``."""

from .dataset import Dataset, generate_dataset, label_audit, resample_matrix, to_channels
from .model import (
    DeepONetModel,
    NeuralController,
    best_so_far,
    evaluate,
    load_model,
    predict,
    save_model,
    train,
)
from .network import ModelConfig

__all__ = [
    "Dataset",
    "DeepONetModel",
    "ModelConfig",
    "NeuralController",
    "best_so_far",
    "evaluate",
    "generate_dataset",
    "label_audit",
    "load_model",
    "predict",
    "resample_matrix",
    "save_model",
    "to_channels",
    "train",
]
