"""
Training harness: run configuration, optimiser, checkpoints, the training
loop, evaluation/inference, cost accounting, gradient checks and ablations.

Usage:
  from src.training import load_config, train, evaluate
  result = train(load_config("config/default.yaml"), "data/shapes", "runs/desk")
  report = evaluate(result.best_checkpoint, "test")
"""

from src.training.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from src.training.config import RunConfig, load_config
from src.training.inference import evaluate, infer
from src.training.trainer import TrainResult, train

__all__ = [
    "Checkpoint",
    "RunConfig",
    "TrainResult",
    "evaluate",
    "infer",
    "load_checkpoint",
    "load_config",
    "save_checkpoint",
    "train",
]
