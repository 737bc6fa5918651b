"""Desk-scale deepfake detector: frozen ViT with low-rank attention updates,
feature redistribution, class-invariant feature augmentation, and a synthetic
splice benchmark."""

from .config import RunConfig, load_config
from .harness import ablate, evaluate, export_features, gradcheck, robustness, train
from .model import GenDF, build_model, load_model, save_model

__all__ = [
    "GenDF",
    "RunConfig",
    "ablate",
    "build_model",
    "evaluate",
    "export_features",
    "gradcheck",
    "load_config",
    "load_model",
    "robustness",
    "save_model",
    "train",
]
