"""
Feature encoders and the mask decoder.

Visual side: a three-stage convolutional downsampler (conv3x3 + ReLU, then 2×2
average pooling) whose pre-pool maps form the skip stack, followed by a 1×1
projection to the shared width D and a learned patch-position embedding.
At 64×64 input this yields an 8×8 grid, N = 64 patches.

Text side: word-level vocabulary, learned token and position embeddings, and
a small pre-LN transformer. Pad positions are masked out of self-attention
and never act as keys anywhere downstream.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from src.autodiff import ops
from src.autodiff.tensor import Tensor
from src.errors import ConfigurationError, DimensionError, InputError, NumericError, VocabularyError
from src.model.layers import Conv2d, FeedForward, LayerNorm, Module, MultiHeadSelfAttention, uniform_parameter

logger = logging.getLogger(__name__)

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
PAD_ID = 0
UNK_ID = 1

# Above this fraction of unknown ids a prompt is flagged as unreliable
UNKNOWN_WARNING_FRACTION = 0.5


# ----------------------------------------------------------------------
# Feature containers
# ----------------------------------------------------------------------

@dataclass
class VisualFeatures:
    values: Tensor                  # (B, N, D)
    spatial: tuple[int, int]        # (H', W'), N = H'·W'
    skip_stack: list[Tensor]        # one (B, C_s, H_s, W_s) map per downsampling stage


@dataclass
class TextFeatures:
    values: Tensor                  # (B, L, D)
    token_ids: np.ndarray           # (B, L) int64
    pad_mask: np.ndarray            # (B, L) bool, True at pad positions

    @property
    def valid(self) -> np.ndarray:
        return ~self.pad_mask


# ----------------------------------------------------------------------
# Vocabulary and tokenisation
# ----------------------------------------------------------------------

@dataclass
class TokenizedPrompt:
    token_ids: np.ndarray           # (L_max,) int64
    pad_mask: np.ndarray            # (L_max,) bool
    empty: bool                     # prompt had no words
    unknown_fraction: float         # share of non-pad ids that are <unk>

    @property
    def unknown_heavy(self) -> bool:
        return self.unknown_fraction > UNKNOWN_WARNING_FRACTION


class Vocabulary:
    def __init__(self, words: Iterable[str] = ()) -> None:
        self._ids: dict[str, int] = {PAD_TOKEN: PAD_ID, UNK_TOKEN: UNK_ID}
        for word in words:
            self.add(word)

    def add(self, word: str) -> int:
        word = word.lower()
        if word not in self._ids:
            self._ids[word] = len(self._ids)
        return self._ids[word]

    def id(self, word: str) -> int:
        return self._ids.get(word.lower(), UNK_ID)

    def words(self) -> list[str]:
        return sorted(self._ids, key=self._ids.__getitem__)

    def __len__(self) -> int:
        return len(self._ids)

    def __contains__(self, word: str) -> bool:
        return word.lower() in self._ids

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self._ids == other._ids

    def save(self, path: Path | str) -> None:
        lines = [f"{word}\t{idx}" for word, idx in sorted(self._ids.items(), key=lambda kv: kv[1])]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Path | str) -> "Vocabulary":
        ids: dict[str, int] = {}
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                word, idx = line.split("\t")
                ids[word] = int(idx)
            except ValueError:
                raise VocabularyError(f"{path}:{lineno}: expected 'word<TAB>id', got {line!r}") from None
        if sorted(ids.values()) != list(range(len(ids))):
            raise VocabularyError(f"{path}: ids are not dense 0..{len(ids) - 1}")
        if ids.get(PAD_TOKEN) != PAD_ID or ids.get(UNK_TOKEN) != UNK_ID:
            raise VocabularyError(f"{path}: reserved ids {PAD_TOKEN}=0 / {UNK_TOKEN}=1 missing")
        vocab = cls()
        vocab._ids = ids
        return vocab

    def to_list(self) -> list[str]:
        return self.words()

    @classmethod
    def from_list(cls, words: list[str]) -> "Vocabulary":
        if words[:2] != [PAD_TOKEN, UNK_TOKEN]:
            raise VocabularyError(f"word list must start with {PAD_TOKEN}, {UNK_TOKEN}")
        return cls(words[2:])


def tokenize(text: str, vocab: Vocabulary, max_tokens: int) -> TokenizedPrompt:
    """Lowercase whitespace split, <unk> for unseen words, right-pad / truncate to max_tokens."""
    if max_tokens < 1:
        raise ConfigurationError(f"max_tokens must be >= 1, got {max_tokens}")
    words = text.lower().split()
    ids = [vocab.id(w) for w in words[:max_tokens]]
    token_ids = np.full(max_tokens, PAD_ID, dtype=np.int64)
    token_ids[:len(ids)] = ids
    pad_mask = np.ones(max_tokens, dtype=bool)
    pad_mask[:len(ids)] = False
    if not ids:
        logger.warning("empty prompt %r: all positions are padding", text)
    unknown = sum(1 for i in ids if i == UNK_ID) / len(ids) if ids else 0.0
    return TokenizedPrompt(token_ids, pad_mask, empty=not ids, unknown_fraction=unknown)


def tokenize_batch(texts: list[str], vocab: Vocabulary, max_tokens: int) -> tuple[np.ndarray, np.ndarray]:
    prompts = [tokenize(t, vocab, max_tokens) for t in texts]
    return np.stack([p.token_ids for p in prompts]), np.stack([p.pad_mask for p in prompts])


# ----------------------------------------------------------------------
# Visual encoder / mask decoder
# ----------------------------------------------------------------------

class VisualEncoder(Module):
    def __init__(self, image_size: int, channels: tuple[int, ...], width: int, rng: np.random.Generator) -> None:
        stride = 2 ** len(channels)
        if image_size % stride:
            raise ConfigurationError(f"image_size {image_size} not divisible by {stride} ({len(channels)} stages)")
        self._image_size = image_size
        self._grid = image_size // stride
        self.stages = []
        in_channels = 1
        for c in channels:
            self.stages.append(Conv2d(in_channels, c, 3, rng))
            in_channels = c
        self.project = Conv2d(in_channels, width, 1, rng)
        self.position = uniform_parameter(rng, (self._grid * self._grid, width), width)

    @property
    def grid(self) -> tuple[int, int]:
        return self._grid, self._grid

    def __call__(self, images: Tensor | np.ndarray) -> VisualFeatures:
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=self.project.weight.dtype))
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (self._image_size, self._image_size):
            raise DimensionError(
                f"expected images (B, 1, {self._image_size}, {self._image_size}), got {x.shape}"
            )
        if np.isnan(x.data).any():
            raise NumericError("images contain NaN pixels")
        if x.data.size and (x.data.min() < 0.0 or x.data.max() > 1.0):
            raise InputError(f"pixel intensities must lie in [0, 1], got [{x.data.min():.3g}, {x.data.max():.3g}]")
        skips = []
        for stage in self.stages:
            x = ops.relu(stage(x))
            skips.append(x)
            x = ops.avg_pool2d(x)
        x = self.project(x)                                   # B, D, h, w
        batch, width = x.shape[:2]
        patches = ops.permute(ops.reshape(x, (batch, width, -1)), (0, 2, 1))
        return VisualFeatures(values=patches + self.position, spatial=self.grid, skip_stack=skips)


class MaskDecoder(Module):
    """Upsample ×2, concatenate the matching skip map, conv3x3 + ReLU; 1×1 head to one logit."""

    def __init__(self, channels: tuple[int, ...], width: int, rng: np.random.Generator) -> None:
        self.stages = []
        in_channels = width
        for depth in reversed(range(len(channels))):
            out_channels = channels[max(depth - 1, 0)]
            self.stages.append(Conv2d(in_channels + channels[depth], out_channels, 3, rng))
            in_channels = out_channels
        self.head = Conv2d(in_channels, 1, 1, rng)

    def __call__(self, fused: Tensor, spatial: tuple[int, int], skip_stack: list[Tensor]) -> Tensor:
        if len(skip_stack) != len(self.stages):
            raise ConfigurationError(
                f"decoder has {len(self.stages)} stages but skip stack holds {len(skip_stack)} maps"
            )
        batch, patches, width = fused.shape
        h, w = spatial
        if patches != h * w:
            raise DimensionError(f"cannot lay {patches} patches out on a {h}×{w} grid")
        x = ops.reshape(ops.permute(fused, (0, 2, 1)), (batch, width, h, w))
        for stage, skip in zip(self.stages, reversed(skip_stack)):
            x = ops.upsample2x(x)
            x = ops.relu(stage(ops.concat([x, skip], axis=1)))
        return self.head(x)


def decode_mask(decoder: MaskDecoder, fused: Tensor, features: VisualFeatures) -> Tensor:
    """Per-pixel logits (B, 1, H, W) from fused patch features."""
    return decoder(fused, features.spatial, features.skip_stack)


# ----------------------------------------------------------------------
# Text encoder
# ----------------------------------------------------------------------

class TransformerBlock(Module):
    def __init__(self, width: int, heads: int, hidden: int, rng: np.random.Generator) -> None:
        self.norm1 = LayerNorm(width)
        self.attn = MultiHeadSelfAttention(width, heads, rng)
        self.norm2 = LayerNorm(width)
        self.ffn = FeedForward(width, hidden, rng)

    def __call__(self, x: Tensor, pad_mask: np.ndarray) -> Tensor:
        x = x + self.attn(self.norm1(x), pad_mask)
        return x + self.ffn(self.norm2(x))


class TextEncoder(Module):
    def __init__(
        self,
        vocab_size: int,
        max_tokens: int,
        width: int,
        layers: int,
        heads: int,
        ffn_mult: int,
        rng: np.random.Generator,
    ) -> None:
        self.embedding = uniform_parameter(rng, (vocab_size, width), width)
        self.position = uniform_parameter(rng, (max_tokens, width), width)
        self.blocks = [TransformerBlock(width, heads, ffn_mult * width, rng) for _ in range(layers)]
        self.norm = LayerNorm(width)

    @property
    def vocab_size(self) -> int:
        return self.embedding.shape[0]

    def __call__(self, token_ids: np.ndarray, pad_mask: np.ndarray) -> TextFeatures:
        token_ids = np.asarray(token_ids, dtype=np.int64)
        pad_mask = np.asarray(pad_mask, dtype=bool)
        if token_ids.shape != pad_mask.shape or token_ids.ndim != 2:
            raise DimensionError(f"token ids {token_ids.shape} and pad mask {pad_mask.shape} must be (B, L)")
        if token_ids.shape[1] != self.position.shape[0]:
            raise DimensionError(f"expected {self.position.shape[0]} token positions, got {token_ids.shape[1]}")
        if token_ids.size and (token_ids.min() < 0 or token_ids.max() >= self.vocab_size):
            raise VocabularyError(
                f"token id out of range [0, {self.vocab_size}): min={token_ids.min()} max={token_ids.max()}"
            )
        x = ops.take(self.embedding, token_ids) + self.position
        for block in self.blocks:
            x = block(x, pad_mask)
        return TextFeatures(values=self.norm(x), token_ids=token_ids, pad_mask=pad_mask)


def encode_image(encoder: VisualEncoder, images: np.ndarray | Tensor) -> VisualFeatures:
    return encoder(images)


def encode_text(encoder: TextEncoder, token_ids: np.ndarray, pad_mask: np.ndarray) -> TextFeatures:
    return encoder(token_ids, pad_mask)
