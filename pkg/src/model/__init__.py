"""
Model package: parameter containers, encoders, conditioned interaction,
conditioned reconstruction, objective/metrics and the assembled segmenter.

Usage:
  from src.model import ConditionedSegmenter, ModelConfig, TrainOptions
"""

from src.model.segmenter import ConditionedSegmenter, ModelConfig, TrainOptions, TrainOutput

__all__ = ["ConditionedSegmenter", "ModelConfig", "TrainOptions", "TrainOutput"]
