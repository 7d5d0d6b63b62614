"""Coarse-mask refinement with affinity-aware encoders and hypernetwork-modulated implicit decoders."""

from .datagen import generate_dataset, generate_scene, perturb_mask
from .inference import refine, refine_batch
from .metrics import evaluate, iou, mba
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = ["TrainConfig", "evaluate", "generate_dataset", "generate_scene", "iou", "load_checkpoint",
           "mba", "perturb_mask", "refine", "refine_batch", "save_checkpoint", "train"]
