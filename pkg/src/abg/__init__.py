"""Adversarial bipartite graph learning for cross-domain video classification."""
from .config import TrainConfig, desk_preset, full_scale_preset, source_only
from .data import ShiftSpec, VideoSet, generate, read_dataset, write_dataset
from .model import ABGModel
from .trainer import evaluate, fit, lr_schedule, train_step

__version__ = "0.1.0"

__all__ = ["ABGModel", "ShiftSpec", "TrainConfig", "VideoSet", "desk_preset", "evaluate", "fit",
           "full_scale_preset", "generate", "lr_schedule", "read_dataset", "source_only", "train_step",
           "write_dataset"]
