"""Shared fixtures: seeded generators, the micro-config and a tiny generated dataset."""

import numpy as np
import pytest

from src.data.dataset import generate, load_vocabulary
from src.model.segmenter import ConditionedSegmenter, ModelConfig
from src.training.checkpoint import save_checkpoint
from src.training.diagnostics import MICRO_CONFIG


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def micro_model_config() -> ModelConfig:
    return MICRO_CONFIG.model_config(12)


@pytest.fixture
def micro_batch(rng):
    """Two 16×16 images, three token slots (last one padded), random targets."""
    images = rng.uniform(0, 1, size=(2, 1, 16, 16)).astype(np.float32)
    token_ids = np.array([[3, 7, 0], [5, 0, 0]])
    pad_mask = token_ids == 0
    targets = (rng.uniform(size=(2, 1, 16, 16)) < 0.3).astype(np.float32)
    return images, token_ids, pad_mask, targets


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """24 samples on a 16×16 canvas: 19 train / 2 val / 3 test."""
    root = tmp_path_factory.mktemp("shapes")
    generate(root, 24, master_seed=7, canvas=16, workers=2)
    return root


@pytest.fixture
def tiny_config():
    return MICRO_CONFIG.with_overrides(epochs=2, batch_size=4, eval_batch_size=8, prefetch=1)


@pytest.fixture
def untrained_checkpoint(tiny_data, tiny_config, tmp_path):
    vocab = load_vocabulary(tiny_data)
    model = ConditionedSegmenter(tiny_config.model_config(len(vocab)), np.random.default_rng(0))
    return save_checkpoint(tmp_path / "ckpt", model, tiny_config, vocab, dataset=str(tiny_data))
