from src.data.dataset import BatchLoader, SampleBatch, SegmentationDataset, generate
from src.data.shapes import SceneSpec, counterfactual_pair, sample_scene

__all__ = [
    "BatchLoader",
    "SampleBatch",
    "SceneSpec",
    "SegmentationDataset",
    "counterfactual_pair",
    "generate",
    "sample_scene",
]
