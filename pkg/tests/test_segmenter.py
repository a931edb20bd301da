from dataclasses import replace

import numpy as np
import pytest

from src.errors import ConfigurationError
from src.model.encoders import PAD_ID
from src.model.objective import LossWeights
from src.model.segmenter import ConditionedSegmenter, TrainOptions
from src.training.diagnostics import MICRO_CONFIG, MICRO_VOCAB

ALL_COMPONENTS = {"l_v2t", "l_t2v", "l_ccl", "l_dice", "l_ce"}


def grads_under(model, prefix):
    return [p.grad for name, p in model.named_parameters() if name.startswith(prefix)]


def all_zero(grads):
    return all(not np.any(g) for g in grads)


def run_step(model, batch, options, mask_seed=(0,)):
    model.zero_grad()
    out = model.forward_train(*batch, options, mask_seed=mask_seed)
    out.loss.backward()
    return out


@pytest.fixture
def model(micro_model_config):
    return ConditionedSegmenter(micro_model_config, np.random.default_rng(0))


@pytest.fixture
def options():
    return MICRO_CONFIG.train_options()


def test_default_objective_has_all_components(model, micro_batch, options):
    out = run_step(model, micro_batch, options)
    assert set(out.components) == ALL_COMPONENTS
    assert np.isfinite(out.loss.item())
    assert out.logits.shape == (2, 1, 16, 16)
    assert all(np.isfinite(v) for v in out.component_values().values())


def test_training_and_inference_logits_are_identical(model, micro_batch, options):
    images, token_ids, pad_mask, targets = micro_batch
    train_logits = model.forward_train(images, token_ids, pad_mask, targets, options).logits.data
    infer_logits = model.forward_inference(images, token_ids, pad_mask).data
    np.testing.assert_array_equal(train_logits, infer_logits)


def test_segmentation_only_leaves_auxiliary_branches_untouched(model, micro_batch):
    options = TrainOptions(weights=LossWeights(0.0, 0.0, 0.0, 5.0))
    out = run_step(model, micro_batch, options)
    assert set(out.components) == {"l_dice", "l_ce"}
    for prefix in ("vision_recon.", "text_recon.", "interaction.poi_head.", "interaction.woi_head.",
                   "interaction.vision_to_text_attn."):
        assert all_zero(grads_under(model, prefix)), prefix
    assert not all_zero(grads_under(model, "decoder."))


def test_vision_reconstruction_toggle(model, micro_batch, options):
    out = run_step(model, micro_batch, replace(options, use_cvr=False))
    assert "l_t2v" not in out.components
    assert all_zero(grads_under(model, "vision_recon."))
    assert not all_zero(grads_under(model, "text_recon."))


def test_interest_heads_learn_only_through_conditions(model, micro_batch):
    weights = LossWeights(1.0, 1.0, 0.0, 5.0)
    run_step(model, micro_batch, TrainOptions(weights=weights, tau=0.5, condition_grad=False))
    assert all_zero(grads_under(model, "interaction.poi_head."))
    assert all_zero(grads_under(model, "interaction.woi_head."))

    run_step(model, micro_batch, TrainOptions(weights=weights, tau=0.5, condition_grad=True))
    assert not all_zero(grads_under(model, "interaction.poi_head."))
    assert not all_zero(grads_under(model, "interaction.woi_head."))


def test_forward_train_is_deterministic(micro_model_config, micro_batch, options):
    losses = []
    for _ in range(2):
        model = ConditionedSegmenter(micro_model_config, np.random.default_rng(0))
        losses.append(model.forward_train(*micro_batch, options, mask_seed=(4, 2)).loss.item())
    assert losses[0] == losses[1]


def self_attention_model():
    config = MICRO_CONFIG.with_overrides(attention="self").model_config(MICRO_VOCAB)
    return ConditionedSegmenter(config, np.random.default_rng(0))


def test_self_attention_variant(micro_batch, options):
    model = self_attention_model()
    names = [name for name, _ in model.named_parameters()]
    assert not any(name.startswith(("vision_recon.", "text_recon.")) for name in names)
    out = run_step(model, micro_batch, options)
    assert set(out.components) == ALL_COMPONENTS
    assert not all_zero(grads_under(model, "joint_recon."))


def test_self_attention_reconstructor_is_idle_without_reconstruction_losses(micro_batch, options):
    model = self_attention_model()
    out = run_step(model, micro_batch, replace(options, use_cvr=False, use_clr=False))
    assert "l_t2v" not in out.components and "l_v2t" not in out.components
    assert all_zero(grads_under(model, "joint_recon."))


def test_self_attention_text_half_ignores_the_vision_toggle(micro_batch, options):
    model = self_attention_model()
    both = model.forward_train(*micro_batch, options, mask_seed=(1, 1))
    text_only = model.forward_train(*micro_batch, replace(options, use_cvr=False), mask_seed=(1, 1))
    assert "l_t2v" not in text_only.components
    np.testing.assert_allclose(text_only.components["l_v2t"].item(), both.components["l_v2t"].item(), rtol=1e-5)


def test_inference_parameters_are_a_strict_subset(model):
    names = [name for name, _ in model.inference_parameters()]
    assert names
    assert not any(name.startswith(("vision_recon.", "text_recon.", "interaction.poi_head.")) for name in names)
    assert sum(p.size for _, p in model.inference_parameters()) < model.num_parameters()


def test_interest_maps_are_distributions(model, micro_batch):
    images, token_ids, pad_mask, _ = micro_batch
    w_poi, w_woi = model.interest_maps(images, token_ids, pad_mask)
    assert w_poi.shape == (2, 4) and w_woi.shape == (2, 3)
    np.testing.assert_allclose(w_poi.sum(axis=1), 1.0, atol=1e-5)
    np.testing.assert_allclose(w_woi.sum(axis=1), 1.0, atol=1e-5)
    assert (w_woi[pad_mask] == 0).all()


def test_configuration_errors(micro_model_config):
    with pytest.raises(ConfigurationError):
        ConditionedSegmenter(replace(micro_model_config, attention="dense"), np.random.default_rng(0))
    with pytest.raises(ConfigurationError):
        TrainOptions(alpha_v=1.2)
    with pytest.raises(ConfigurationError):
        TrainOptions(tau=0.0)
    with pytest.raises(ConfigurationError):
        TrainOptions(mask_strategy="grid")


@pytest.mark.parametrize("attention", ["cross", "self"])
def test_pad_embedding_never_reaches_the_loss(micro_batch, options, attention):
    config = MICRO_CONFIG.with_overrides(attention=attention).model_config(MICRO_VOCAB)
    model = ConditionedSegmenter(config, np.random.default_rng(0))
    before = model.forward_train(*micro_batch, options, mask_seed=(2,))
    model.text_encoder.embedding.data[PAD_ID] += np.random.default_rng(9).normal(size=config.width) * 3
    after = model.forward_train(*micro_batch, options, mask_seed=(2,))
    for name, value in before.component_values().items():
        np.testing.assert_allclose(after.component_values()[name], value, rtol=1e-6, err_msg=name)
