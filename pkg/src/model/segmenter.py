"""
Language-guided segmenter: the full training graph and the pruned inference graph.

Training graph:
    encoders → conditioned interaction (both directions, interest weights)
             → mask decoder on V + V′          (L_Dice, L_CE)
             → batch similarity matrix          (L_CCL)
             → masked V rebuilt from E by Ψ_v   (L_T2V)
             → masked E rebuilt from V by Ψ_t   (L_V2T)

The "self" attention mode replaces Ψ_v and Ψ_t with one joint Ψ over [V; E].

Inference graph keeps the encoders, the text-to-vision attention and the
decoder only. Both graphs share segment_logits(), so the masks agree bit for bit.
"""

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from src.autodiff import ops
from src.autodiff.tensor import Tensor, no_grad
from src.errors import ConfigurationError
from src.model.encoders import MaskDecoder, TextEncoder, TextFeatures, VisualEncoder, VisualFeatures
from src.model.interaction import ATTENTION_MODES, ConditionedInteraction, FusionOutput, contrastive_loss, similarity_matrix
from src.model.layers import Module
from src.model.objective import LossWeights, ce_loss, dice_loss, total_loss
from src.model.reconstruction import (
    MASK_STRATEGIES, ConditionedReconstructor, MaskSpec, apply_mask, loss_t2v, loss_v2t, sample_mask,
)

logger = logging.getLogger(__name__)

VISION = 0
TEXT = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    image_size: int = 64
    channels: tuple[int, ...] = (16, 32, 64)
    width: int = 64
    text_layers: int = 2
    text_heads: int = 4
    max_tokens: int = 8
    ffn_mult: int = 2
    recon_layers: int = 3
    recon_ffn: bool = True
    attention: str = "cross"

    @property
    def grid(self) -> int:
        return self.image_size // 2 ** len(self.channels)

    @property
    def patches(self) -> int:
        return self.grid * self.grid


@dataclass(frozen=True)
class TrainOptions:
    """Per-step knobs of the training objective (ablation toggles included)."""
    weights: LossWeights = field(default_factory=LossWeights)
    alpha_v: float = 0.5
    alpha_t: float = 0.3
    tau: float = 0.07
    use_ccl_condition: bool = True
    use_cvr: bool = True
    use_clr: bool = True
    use_cvr_condition: bool = True
    use_clr_condition: bool = True
    mask_strategy: str = "weighted"
    condition_grad: bool = True

    def __post_init__(self) -> None:
        for name in ("alpha_v", "alpha_t"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1], got {value}")
        if self.tau <= 0:
            raise ConfigurationError(f"tau must be > 0, got {self.tau}")
        if self.mask_strategy not in MASK_STRATEGIES:
            raise ConfigurationError(f"mask_strategy must be one of {MASK_STRATEGIES}")


@dataclass(frozen=True)
class FrozenTerms:
    """
    The values the objective treats as constants: reconstruction targets,
    loss weights, mask draws and the detached conditions. Passing them back
    into forward_train pins them, so finite differences see the same function
    the backward pass differentiates.
    """
    vision_target: np.ndarray
    text_target: np.ndarray
    w_poi: np.ndarray
    w_woi: np.ndarray
    vision_masks: tuple[MaskSpec, ...]
    text_masks: tuple[MaskSpec, ...]


@dataclass
class TrainOutput:
    loss: Tensor
    components: dict[str, Tensor]   # only the terms that entered the objective
    logits: Tensor
    fusion: FusionOutput
    frozen: FrozenTerms | None = None

    def component_values(self) -> dict[str, float]:
        return {name: value.item() for name, value in self.components.items()}


def _uniform_weights(valid: np.ndarray, dtype) -> np.ndarray:
    valid = valid.astype(dtype)
    return valid / np.maximum(valid.sum(axis=-1, keepdims=True), 1)


class ConditionedSegmenter(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator) -> None:
        if config.attention not in ATTENTION_MODES:
            raise ConfigurationError(f"attention must be one of {ATTENTION_MODES}, got {config.attention!r}")
        self._config = config
        hidden = config.ffn_mult * config.width
        self.visual_encoder = VisualEncoder(config.image_size, config.channels, config.width, rng)
        self.text_encoder = TextEncoder(
            config.vocab_size, config.max_tokens, config.width,
            config.text_layers, config.text_heads, config.ffn_mult, rng,
        )
        self.interaction = ConditionedInteraction(config.width, rng, config.attention)
        self.decoder = MaskDecoder(config.channels, config.width, rng)
        hidden = hidden if config.recon_ffn else None
        if config.attention == "self":
            self.joint_recon = ConditionedReconstructor(config.width, config.recon_layers, hidden, rng)
        else:
            self.vision_recon = ConditionedReconstructor(config.width, config.recon_layers, hidden, rng)
            self.text_recon = ConditionedReconstructor(config.width, config.recon_layers, hidden, rng)

    @property
    def config(self) -> ModelConfig:
        return self._config

    def inference_parameters(self) -> list[tuple[str, Tensor]]:
        """Parameters the pruned graph touches (encoders, text-to-vision attention, decoder)."""
        keep = ("visual_encoder.", "text_encoder.", "interaction.text_to_vision_attn.", "decoder.")
        return [(n, p) for n, p in self.named_parameters() if n.startswith(keep)]

    # ------------------------------------------------------------------
    # Shared path
    # ------------------------------------------------------------------

    def encode(self, images: np.ndarray, token_ids: np.ndarray, pad_mask: np.ndarray) -> tuple[VisualFeatures, TextFeatures]:
        return self.visual_encoder(images), self.text_encoder(token_ids, pad_mask)

    def segment_logits(self, visual: VisualFeatures, text: TextFeatures) -> tuple[Tensor, Tensor]:
        """(logits (B, 1, H, W), V′). The decoder sees V + V′."""
        v_prime = self.interaction.text_to_vision(visual.values, text.values, text.valid)
        logits = self.decoder(visual.values + v_prime, visual.spatial, visual.skip_stack)
        return logits, v_prime

    # ------------------------------------------------------------------
    # Inference
    # ------------------------------------------------------------------

    def forward_inference(self, images: np.ndarray, token_ids: np.ndarray, pad_mask: np.ndarray) -> Tensor:
        with no_grad():
            visual, text = self.encode(images, token_ids, pad_mask)
            logits, _ = self.segment_logits(visual, text)
        return logits

    def interest_maps(self, images: np.ndarray, token_ids: np.ndarray, pad_mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """W_poi (B, N) and W_woi (B, L) for inspection; runs both fusion directions."""
        with no_grad():
            visual, text = self.encode(images, token_ids, pad_mask)
            fusion = self.interaction(visual.values, text.values, text.valid)
        return fusion.w_poi.data, fusion.w_woi.data

    # ------------------------------------------------------------------
    # Training
    # ------------------------------------------------------------------

    def _condition(self, weights: Tensor, frozen: np.ndarray, valid: np.ndarray, enabled: bool, grad: bool) -> Tensor:
        if not enabled:
            return Tensor(valid.astype(weights.dtype))
        return weights if grad else Tensor(frozen)

    def _masks(
        self, weights: np.ndarray, valid: np.ndarray, ratio: float, strategy: str, seed: Sequence[int], modality: int
    ) -> tuple[MaskSpec, ...]:
        return tuple(
            sample_mask(weights[b], ratio, np.random.default_rng([*seed, b, modality]), valid[b], strategy)
            for b in range(weights.shape[0])
        )

    def forward_train(
        self,
        images: np.ndarray,
        token_ids: np.ndarray,
        pad_mask: np.ndarray,
        targets: np.ndarray,
        options: TrainOptions,
        mask_seed: Sequence[int] = (0,),
        frozen: FrozenTerms | None = None,
    ) -> TrainOutput:
        """
        Build the full objective for one batch. Mask draws use
        default_rng([*mask_seed, sample_index, modality]).

        `frozen` pins every stop-gradient quantity to the values of an earlier
        pass (see FrozenTerms); without it they come from this pass.
        """
        visual, text = self.encode(images, token_ids, pad_mask)
        v, e, valid = visual.values, text.values, text.valid
        weights = options.weights

        logits, v_prime = self.segment_logits(visual, text)
        e_prime = self.interaction.vision_to_text(e, v, valid)
        w_poi, w_woi = self.interaction.interest_weights(v_prime, e_prime, valid)
        fusion = FusionOutput(v_prime, e_prime, w_poi, w_woi)

        patch_valid = np.ones(w_poi.shape, dtype=bool)
        if frozen is None:
            frozen = FrozenTerms(
                vision_target=v.data.copy(),
                text_target=e.data.copy(),
                w_poi=w_poi.data.copy(),
                w_woi=w_woi.data.copy(),
                vision_masks=self._masks(w_poi.data, patch_valid, options.alpha_v, options.mask_strategy, mask_seed, VISION),
                text_masks=self._masks(w_woi.data, valid, options.alpha_t, options.mask_strategy, mask_seed, TEXT),
            )

        components: dict[str, Tensor] = {}
        if weights.lambda4 > 0:
            components["l_dice"] = dice_loss(logits, targets)
            components["l_ce"] = ce_loss(logits, targets)

        if weights.lambda3 > 0:
            if options.use_ccl_condition:
                poi, woi = w_poi, w_woi
            else:
                poi = Tensor(_uniform_weights(patch_valid, v.dtype))
                woi = Tensor(_uniform_weights(valid, v.dtype))
            s = similarity_matrix(v, e, poi, woi, valid)
            components["l_ccl"] = contrastive_loss(s, options.tau)

        want_vision = options.use_cvr and weights.lambda2 > 0
        want_text = options.use_clr and weights.lambda1 > 0
        if want_vision or want_text:
            v_masked = apply_mask(v, list(frozen.vision_masks))
            e_masked = apply_mask(e, list(frozen.text_masks))
            grad = options.condition_grad
            poi_condition = self._condition(w_poi, frozen.w_poi, patch_valid, options.use_clr_condition, grad)
            woi_condition = self._condition(w_woi, frozen.w_woi, valid, options.use_cvr_condition, grad)

            if self.interaction.mode == "self":
                v_hat, e_hat = self._reconstruct_joint(
                    v, e, v_masked if want_vision else None, e_masked if want_text else None,
                    poi_condition, woi_condition, valid,
                )
            else:
                v_hat = self.vision_recon(v_masked, e, woi_condition, valid) if want_vision else None
                e_hat = self.text_recon(e_masked, v, poi_condition, patch_valid) if want_text else None

            if want_vision:
                components["l_t2v"] = loss_t2v(Tensor(frozen.vision_target), v_hat, frozen.w_poi)
            if want_text:
                components["l_v2t"] = loss_v2t(Tensor(frozen.text_target), e_hat, frozen.w_woi, valid)

        loss = total_loss(components, weights)
        return TrainOutput(loss=loss, components=components, logits=logits, fusion=fusion, frozen=frozen)

    def _reconstruct_joint(
        self,
        v: Tensor,
        e: Tensor,
        v_masked: Tensor | None,
        e_masked: Tensor | None,
        poi_condition: Tensor,
        woi_condition: Tensor,
        valid: np.ndarray,
    ) -> tuple[Tensor | None, Tensor | None]:
        """
        Self-attention variant: one Ψ queries with [V_m; E_m] against [V; E].
        Only the modalities whose loss is on are passed as queries; query rows
        are independent, so dropping one half leaves the other unchanged.
        """
        joint_valid = np.concatenate([np.ones(v.shape[:2], dtype=bool), valid], axis=1)
        queries = [q for q in (v_masked, e_masked) if q is not None]
        out = self.joint_recon(
            ops.concat(queries, axis=1),
            ops.concat([v, e], axis=1),
            ops.concat([poi_condition, woi_condition], axis=1),
            joint_valid,
        )
        patches = v.shape[1] if v_masked is not None else 0
        v_hat = ops.narrow(out, 1, 0, patches) if v_masked is not None else None
        e_hat = ops.narrow(out, 1, patches, out.shape[1]) if e_masked is not None else None
        return v_hat, e_hat
