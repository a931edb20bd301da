import logging

import numpy as np
import pytest

from src.autodiff.tensor import Tensor
from src.data.dataset import jitter_intensity
from src.errors import ConfigurationError, DimensionError, InputError, NumericError, VocabularyError
from src.model.encoders import (
    PAD_ID,
    UNK_ID,
    MaskDecoder,
    TextEncoder,
    VisualEncoder,
    Vocabulary,
    decode_mask,
    encode_image,
    encode_text,
    tokenize,
    tokenize_batch,
)


@pytest.fixture
def vocab():
    return Vocabulary(["upper", "left", "circle", "segment", "the", "both", "lower", "squares"])


# ----------------------------------------------------------------------
# Vocabulary / tokenisation
# ----------------------------------------------------------------------

def test_reserved_ids(vocab):
    assert vocab.id("<pad>") == PAD_ID == 0
    assert vocab.id("<unk>") == UNK_ID == 1
    assert vocab.id("upper") == 2


def test_tokenize_pads_to_length(vocab):
    tokens = tokenize("Upper left circle", vocab, 5)
    assert tokens.token_ids.tolist() == [vocab.id("upper"), vocab.id("left"), vocab.id("circle"), 0, 0]
    assert tokens.pad_mask.tolist() == [False, False, False, True, True]
    assert not tokens.empty


def test_unknown_word_maps_to_unk(vocab):
    tokens = tokenize("upper zzz circle", vocab, 5)
    assert tokens.token_ids[1] == UNK_ID
    assert tokens.unknown_fraction == pytest.approx(1 / 3)
    assert not tokens.unknown_heavy
    assert tokenize("zzz qqq circle", vocab, 5).unknown_heavy


def test_truncation_keeps_first_words(vocab):
    words = "segment the upper left circle both lower".split()
    tokens = tokenize(" ".join(words), vocab, 5)
    assert tokens.token_ids.tolist() == [vocab.id(w) for w in words[:5]]
    assert not tokens.pad_mask.any()


def test_empty_prompt_is_all_pad_with_warning(vocab, caplog):
    with caplog.at_level(logging.WARNING):
        tokens = tokenize("   ", vocab, 4)
    assert tokens.empty
    assert tokens.pad_mask.all()
    assert (tokens.token_ids == PAD_ID).all()
    assert "empty prompt" in caplog.text


def test_tokenize_rejects_zero_length(vocab):
    with pytest.raises(ConfigurationError):
        tokenize("circle", vocab, 0)


def test_tokenize_batch_stacks(vocab):
    ids, pad = tokenize_batch(["upper circle", "both lower squares"], vocab, 4)
    assert ids.shape == pad.shape == (2, 4)
    assert pad.sum(axis=1).tolist() == [2, 1]


def test_vocabulary_save_load(vocab, tmp_path):
    path = tmp_path / "vocab.tsv"
    vocab.save(path)
    assert path.read_text(encoding="utf-8").splitlines()[:3] == ["<pad>\t0", "<unk>\t1", "upper\t2"]
    assert Vocabulary.load(path) == vocab
    assert Vocabulary.from_list(vocab.to_list()) == vocab


def test_vocabulary_load_rejects_malformed(tmp_path):
    bad = tmp_path / "bad.tsv"
    bad.write_text("<pad>\t0\n<unk>\t1\ncircle 2\n", encoding="utf-8")
    with pytest.raises(VocabularyError):
        Vocabulary.load(bad)
    gappy = tmp_path / "gappy.tsv"
    gappy.write_text("<pad>\t0\n<unk>\t1\ncircle\t5\n", encoding="utf-8")
    with pytest.raises(VocabularyError, match="dense"):
        Vocabulary.load(gappy)


# ----------------------------------------------------------------------
# Visual encoder / decoder
# ----------------------------------------------------------------------

def test_visual_encoder_shapes(rng):
    encoder = VisualEncoder(16, (2, 4, 8), 8, rng)
    features = encode_image(encoder, np.zeros((2, 1, 16, 16), dtype=np.float32))
    assert features.values.shape == (2, 4, 8)
    assert features.spatial == (2, 2)
    assert [s.shape for s in features.skip_stack] == [(2, 2, 16, 16), (2, 4, 8, 8), (2, 8, 4, 4)]
    assert np.isfinite(features.values.data).all()


def test_visual_encoder_is_sensitive_and_deterministic():
    image = np.random.default_rng(5).uniform(size=(1, 1, 16, 16)).astype(np.float32)
    changed = image.copy()
    changed[0, 0, 7, 7] = 1.0 - changed[0, 0, 7, 7]
    a = VisualEncoder(16, (2, 4, 8), 8, np.random.default_rng(0))
    b = VisualEncoder(16, (2, 4, 8), 8, np.random.default_rng(0))
    np.testing.assert_array_equal(a(image).values.data, b(image).values.data)
    assert not np.array_equal(a(image).values.data, a(changed).values.data)


def test_visual_encoder_rejects_wrong_size(rng):
    encoder = VisualEncoder(16, (2, 4, 8), 8, rng)
    with pytest.raises(DimensionError, match="16"):
        encoder(np.zeros((1, 1, 32, 32)))


@pytest.mark.parametrize("low, high", [(-0.1, 1.0), (0.0, 1.5), (0.0, 255.0)])
def test_visual_encoder_rejects_pixels_outside_unit_range(rng, low, high):
    encoder = VisualEncoder(16, (2, 4, 8), 8, rng)
    images = np.full((1, 1, 16, 16), 0.5, dtype=np.float32)
    images[0, 0, 0, 0], images[0, 0, 15, 15] = low, high
    with pytest.raises(InputError, match=r"\[0, 1\]"):
        encode_image(encoder, images)


def test_visual_encoder_rejects_nan_pixels(rng):
    encoder = VisualEncoder(16, (2, 4, 8), 8, rng)
    images = np.zeros((1, 1, 16, 16))
    images[0, 0, 3, 3] = np.nan
    with pytest.raises(NumericError):
        encoder(images)


def test_visual_encoder_accepts_jittered_dataset_images(rng):
    encoder = VisualEncoder(16, (2, 4, 8), 8, rng)
    base = np.linspace(0.0, 1.0, 256, dtype=np.float32).reshape(16, 16)
    jittered = np.stack([jitter_intensity(base, np.random.default_rng(k)) for k in range(8)])[:, None]
    assert jittered.dtype == np.float32
    features = encode_image(encoder, jittered)
    assert np.isfinite(features.values.data).all()


def test_visual_encoder_rejects_indivisible_size(rng):
    with pytest.raises(ConfigurationError):
        VisualEncoder(20, (2, 4, 8), 8, rng)


def test_decoder_output_matches_image(rng):
    encoder = VisualEncoder(16, (2, 4, 8), 8, rng)
    decoder = MaskDecoder((2, 4, 8), 8, rng)
    features = encoder(rng.uniform(size=(2, 1, 16, 16)))
    logits = decode_mask(decoder, features.values, features)
    assert logits.shape == (2, 1, 16, 16)
    probs = 1 / (1 + np.exp(-logits.data))
    assert np.isfinite(logits.data).all()
    assert ((probs > 0) & (probs < 1)).all()


def test_decoder_rejects_short_skip_stack(rng):
    encoder = VisualEncoder(16, (2, 4, 8), 8, rng)
    decoder = MaskDecoder((2, 4, 8), 8, rng)
    features = encoder(np.zeros((1, 1, 16, 16)))
    with pytest.raises(ConfigurationError, match="skip"):
        decoder(features.values, features.spatial, features.skip_stack[1:])


# ----------------------------------------------------------------------
# Text encoder
# ----------------------------------------------------------------------

def test_text_encoder_shape_with_pads(rng):
    encoder = TextEncoder(10, 4, 8, 1, 2, 2, rng)
    text = encode_text(encoder, np.array([[3, 0, 0, 0]]), np.array([[False, True, True, True]]))
    assert text.values.shape == (1, 4, 8)
    assert text.valid.tolist() == [[True, False, False, False]]


def test_pad_content_does_not_leak(rng):
    encoder = TextEncoder(10, 4, 8, 2, 2, 2, rng)
    pad = np.array([[False, False, True, True]])
    a = encoder(np.array([[3, 4, 0, 0]]), pad).values.data
    b = encoder(np.array([[3, 4, 7, 9]]), pad).values.data
    np.testing.assert_array_equal(a[0, :2], b[0, :2])


def test_text_encoder_rejects_out_of_range_ids(rng):
    encoder = TextEncoder(10, 4, 8, 1, 2, 2, rng)
    with pytest.raises(VocabularyError):
        encoder(np.array([[3, 10, 0, 0]]), np.array([[False, False, True, True]]))
    with pytest.raises(DimensionError):
        encoder(np.array([[3, 4, 0]]), np.array([[False, False, True]]))


def test_text_encoder_accepts_tensor_free_ids(rng):
    encoder = TextEncoder(10, 2, 8, 0, 2, 2, rng)
    out = encoder([[2, 3]], [[False, False]])
    assert isinstance(out.values, Tensor)
