import numpy as np
import pytest

from src.autodiff.tensor import Tensor
from src.errors import CheckpointError, DimensionError
from src.model.layers import FeedForward, LayerNorm, Linear, MultiHeadSelfAttention


def test_linear_shapes_and_error(rng):
    layer = Linear(4, 3, rng)
    assert layer(Tensor(np.ones((2, 5, 4)))).shape == (2, 5, 3)
    with pytest.raises(DimensionError):
        layer(Tensor(np.ones((2, 3))))


def test_named_parameters_are_stable(rng):
    ffn = FeedForward(4, 8, rng)
    assert [name for name, _ in ffn.named_parameters()] == ["inner.weight", "inner.bias", "outer.weight", "outer.bias"]
    assert ffn.num_parameters() == 4 * 8 + 8 + 8 * 4 + 4


def test_bias_free_linear_has_one_parameter(rng):
    assert [name for name, _ in Linear(2, 2, rng, bias=False).named_parameters()] == ["weight"]


def test_state_dict_round_trip(rng):
    a, b = FeedForward(4, 8, rng), FeedForward(4, 8, rng)
    b.load_state_dict(a.state_dict())
    x = Tensor(rng.normal(size=(3, 4)).astype(np.float32))
    np.testing.assert_array_equal(a(x).data, b(x).data)


def test_load_state_dict_rejects_mismatches(rng):
    layer = Linear(2, 3, rng)
    state = layer.state_dict()
    with pytest.raises(CheckpointError, match="missing"):
        layer.load_state_dict({"weight": state["weight"]})
    with pytest.raises(CheckpointError, match="shape"):
        layer.load_state_dict({"weight": np.zeros((3, 2)), "bias": state["bias"]})


def test_to_dtype_casts_parameters_and_grads(rng):
    layer = Linear(2, 2, rng).to_dtype(np.float64)
    assert all(p.dtype == np.float64 and p.grad.dtype == np.float64 for p in layer.parameters())


def test_layer_norm_normalises_rows(rng):
    out = LayerNorm(6).to_dtype(np.float64)(Tensor(rng.normal(3.0, 2.0, size=(4, 6))))
    np.testing.assert_allclose(out.data.mean(axis=-1), 0.0, atol=1e-10)
    np.testing.assert_allclose(out.data.std(axis=-1), 1.0, atol=1e-4)


def test_self_attention_ignores_pad_keys(rng):
    attn = MultiHeadSelfAttention(8, 2, rng)
    x = rng.normal(size=(1, 4, 8)).astype(np.float32)
    pad = np.array([[False, False, True, True]])
    changed = x.copy()
    changed[0, 2:] = rng.normal(size=(2, 8))
    a = attn(Tensor(x), pad).data
    b = attn(Tensor(changed), pad).data
    np.testing.assert_array_equal(a[0, :2], b[0, :2])


def test_self_attention_width_must_split_into_heads(rng):
    with pytest.raises(DimensionError):
        MultiHeadSelfAttention(6, 4, rng)
