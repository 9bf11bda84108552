"""Desk-scale unified retrieve-read-rerank extractive QA."""

from .config import TrainConfig
from .corpus import (
    Document,
    Instance,
    Question,
    SyntheticSpec,
    generate_synthetic,
    load_dataset,
    save_dataset,
)
from .encoder import ModelConfig, QAModel, load_checkpoint, save_checkpoint
from .inference import EvalReport, Prediction, block_pass_benchmark, evaluate, predict
from .preprocess import Vocabulary
from .train import TrainError, train

__all__ = [
    "Document",
    "EvalReport",
    "Instance",
    "ModelConfig",
    "Prediction",
    "QAModel",
    "Question",
    "SyntheticSpec",
    "TrainConfig",
    "TrainError",
    "Vocabulary",
    "block_pass_benchmark",
    "evaluate",
    "generate_synthetic",
    "load_checkpoint",
    "load_dataset",
    "predict",
    "save_checkpoint",
    "save_dataset",
    "train",
]
