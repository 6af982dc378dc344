"""Caption-based real/fake image detection with low-rank adapters, built on numpy."""

from .degrade import DegradeSpec, apply_degradation
from .evaluate import ConfusionCounts, EvalReport, accuracy, cross_matrix, eval_subset, f1
from .lora import count_params, init_adapter, inject, lora_forward, merge
from .model import CaptionModel, ModelConfig, caption_to_label
from .train import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "CaptionModel", "Checkpoint", "ConfusionCounts", "DegradeSpec", "EvalReport", "ModelConfig", "TrainConfig",
    "accuracy", "apply_degradation", "caption_to_label", "count_params", "cross_matrix", "eval_subset", "f1",
    "init_adapter", "inject", "load_checkpoint", "lora_forward", "merge", "save_checkpoint", "train",
]
