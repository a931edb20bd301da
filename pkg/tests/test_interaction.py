import math

import numpy as np
import pytest

from src.autodiff.tensor import Tensor
from src.errors import ConfigurationError, DimensionError
from src.model.interaction import (
    ConditionedInteraction,
    CrossAttention,
    InterestHead,
    aggregate_similarity,
    alignment_matrix,
    contrastive_loss,
    pair_similarity,
    similarity_matrix,
)


def t(values, grad=False):
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=grad)


def softplus(x):
    return math.log1p(math.exp(x))


def brute_force_attention(query, context, wq, wk, wv, key_valid=None):
    """Row-by-row evaluation of softmax(Q·Kᵀ/√D)·V with explicit loops."""
    q, k, v = query @ wq, context @ wk, context @ wv
    d = q.shape[-1]
    out = np.zeros((q.shape[0], v.shape[1]))
    for i in range(q.shape[0]):
        scores = [float(q[i] @ k[j]) / math.sqrt(d) for j in range(k.shape[0])]
        keep = [j for j in range(k.shape[0]) if key_valid is None or key_valid[j]]
        top = max(scores[j] for j in keep)
        weights = {j: math.exp(scores[j] - top) for j in keep}
        total = sum(weights.values())
        for j, w in weights.items():
            out[i] += w / total * v[j]
    return out


@pytest.fixture
def attn(rng):
    return CrossAttention(2, rng).to_dtype(np.float64)


# ----------------------------------------------------------------------
# Cross-attention
# ----------------------------------------------------------------------

def test_single_key_returns_projected_value(attn, rng):
    e = t(rng.normal(size=(1, 3, 2)))
    v = t(rng.normal(size=(1, 1, 2)))
    out = attn(e, v)
    projected = v.data[0, 0] @ attn.wv.weight.data
    np.testing.assert_allclose(out.data[0], np.tile(projected, (3, 1)), atol=1e-12)


def test_zero_query_projection_averages_values(attn, rng):
    attn.wq.weight.data = np.zeros((2, 2))
    e = t(rng.normal(size=(1, 2, 2)))
    v = t(rng.normal(size=(1, 4, 2)))
    out = attn(e, v)
    mean_value = (v.data[0] @ attn.wv.weight.data).mean(axis=0)
    np.testing.assert_allclose(out.data[0], np.tile(mean_value, (2, 1)), atol=1e-12)


def test_hand_sized_case_matches_brute_force(attn):
    e = np.array([[0.3, -1.2], [0.8, 0.5]])
    v = np.array([[1.0, 0.0], [-0.4, 2.0]])
    out = attn(t(e[None]), t(v[None])).data[0]
    expected = brute_force_attention(e, v, attn.wq.weight.data, attn.wk.weight.data, attn.wv.weight.data)
    np.testing.assert_allclose(out, expected, atol=1e-6)


def test_pad_keys_are_excluded(attn, rng):
    v = rng.normal(size=(1, 3, 2))
    e = rng.normal(size=(1, 3, 2))
    valid = np.array([[True, True, False]])
    out = attn(t(v), t(e), valid).data[0]
    expected = brute_force_attention(v[0], e[0], attn.wq.weight.data, attn.wk.weight.data, attn.wv.weight.data, valid[0])
    np.testing.assert_allclose(out, expected, atol=1e-6)
    weights = attn.attention(t(v), t(e), valid).data
    assert (weights[..., 2] == 0).all()


def test_width_mismatch(attn):
    with pytest.raises(DimensionError):
        attn.attention(t(np.ones((1, 2, 2))), t(np.ones((1, 2, 3))))


def test_attention_rows_on_simplex():
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        layer = CrossAttention(4, rng).to_dtype(np.float64)
        weights = layer.attention(t(rng.normal(size=(2, 5, 4))), t(rng.normal(size=(2, 3, 4)))).data
        assert (weights >= 0).all()
        np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-6)


# ----------------------------------------------------------------------
# Interest weights
# ----------------------------------------------------------------------

def test_zeroed_interest_heads_are_uniform(rng):
    interaction = ConditionedInteraction(4, rng).to_dtype(np.float64)
    for head in (interaction.poi_head, interaction.woi_head):
        head.score.weight.data = np.zeros((4, 1))
        head.score.bias.data = np.zeros(1)
    valid = np.array([[True, True, True, False]])
    w_poi, w_woi = interaction.interest_weights(t(rng.normal(size=(1, 6, 4))), t(rng.normal(size=(1, 4, 4))), valid)
    np.testing.assert_allclose(w_poi.data, np.full((1, 6), 1 / 6))
    np.testing.assert_allclose(w_woi.data, [[1 / 3, 1 / 3, 1 / 3, 0.0]])


def test_interest_weights_on_simplex():
    valid = np.array([[True, True, False], [True, True, True]])
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        interaction = ConditionedInteraction(4, rng).to_dtype(np.float64)
        out = interaction(t(rng.normal(size=(2, 4, 4))), t(rng.normal(size=(2, 3, 4))), valid)
        np.testing.assert_allclose(out.w_poi.data.sum(axis=-1), 1.0, atol=1e-6)
        np.testing.assert_allclose(out.w_woi.data.sum(axis=-1), 1.0, atol=1e-6)
        assert (out.w_woi.data[0, 2] == 0).all()


def test_raising_one_logit_raises_its_weight(rng):
    head = InterestHead(4, rng).to_dtype(np.float64)
    direction = head.score.weight.data[:, 0] / np.sum(head.score.weight.data ** 2)
    x = rng.normal(size=(1, 5, 4))
    valid = np.array([[True, True, True, True, False]])
    before = head(t(x), valid).data
    for position in range(4):
        for step in (1e-3, 0.5, 3.0):
            raised = x.copy()
            raised[0, position] += step * direction      # logit of `position` grows by `step`
            after = head(t(raised), valid).data
            assert after[0, position] > before[0, position]
            others = [i for i in range(4) if i != position]
            assert (after[0, others] < before[0, others]).all()
            assert after[0, 4] == 0.0


def test_interest_head_without_mask(rng):
    head = InterestHead(3, rng)
    assert head(t(rng.normal(size=(2, 5, 3)))).shape == (2, 5)


def test_self_attention_mode_shapes(rng):
    interaction = ConditionedInteraction(4, rng, attention="self")
    valid = np.array([[True, False]])
    out = interaction(t(rng.normal(size=(1, 4, 4))), t(rng.normal(size=(1, 2, 4))), valid)
    assert out.v_prime.shape == (1, 4, 4)
    assert out.e_prime.shape == (1, 2, 4)
    assert interaction.mode == "self"


def test_unknown_attention_mode(rng):
    with pytest.raises(ConfigurationError):
        ConditionedInteraction(4, rng, attention="dense")


# ----------------------------------------------------------------------
# Alignment and similarity
# ----------------------------------------------------------------------

def test_alignment_examples():
    assert alignment_matrix(t([[1.0, 2.0]]), t([[1.0, 2.0]])).data[0, 0] == pytest.approx(1.0, abs=1e-6)
    assert alignment_matrix(t([[1.0, 0.0]]), t([[0.0, 3.0]])).data[0, 0] == pytest.approx(0.0, abs=1e-12)
    assert alignment_matrix(t([[1.0, 2.0]]), t([[2.0, 1.0]])).data[0, 0] == pytest.approx(0.8, abs=1e-6)


def test_alignment_entries_are_bounded(rng):
    a = alignment_matrix(t(rng.normal(size=(3, 5, 4))), t(rng.normal(size=(3, 2, 4)))).data
    assert a.shape == (3, 5, 2)
    assert (np.abs(a) <= 1.0).all()


def test_alignment_width_mismatch():
    with pytest.raises(DimensionError):
        alignment_matrix(t(np.ones((2, 3))), t(np.ones((2, 4))))


def test_pair_similarity_examples():
    ones = t(np.ones((3, 2)))
    w_poi, w_woi = t([0.2, 0.3, 0.5]), t([0.6, 0.4])
    assert pair_similarity(ones, w_poi, w_woi).item() == pytest.approx(1.0)
    uniform = t([0.5, 0.5])
    assert pair_similarity(t(np.eye(2)), uniform, uniform).item() == pytest.approx(1.0)


def test_one_hot_patch_weight_selects_row_max():
    a = t([[0.1, 0.7], [0.9, -0.2]])
    vision_only = pair_similarity(a, t([0.0, 1.0]), t([0.0, 0.0]))
    assert vision_only.item() == pytest.approx(0.5 * 0.9)


def test_pair_similarity_brute_force(rng):
    a = rng.uniform(-1, 1, size=(3, 2))
    w_v, w_e = rng.dirichlet(np.ones(3)), rng.dirichlet(np.ones(2))
    expected = 0.5 * (sum(w_v[i] * max(a[i]) for i in range(3)) + sum(w_e[j] * max(a[:, j]) for j in range(2)))
    assert pair_similarity(t(a), t(w_v), t(w_e)).item() == pytest.approx(expected, abs=1e-6)


def test_pair_similarity_skips_pad_words():
    a = t([[0.1, 0.9], [0.3, 0.8]])
    s = pair_similarity(a, t([0.5, 0.5]), t([1.0, 0.0]), np.array([True, False]))
    assert s.item() == pytest.approx(0.5 * (0.5 * 0.1 + 0.5 * 0.3 + 0.3))


def test_similarity_is_scale_invariant(rng):
    v, e = rng.normal(size=(2, 4, 3)), rng.normal(size=(2, 2, 3))
    w_poi, w_woi = rng.dirichlet(np.ones(4), size=2), rng.dirichlet(np.ones(2), size=2)
    valid = np.ones((2, 2), dtype=bool)
    base = similarity_matrix(t(v), t(e), t(w_poi), t(w_woi), valid).data
    scaled = similarity_matrix(t(3.5 * v), t(0.2 * e), t(w_poi), t(w_woi), valid).data
    np.testing.assert_allclose(base, scaled, atol=1e-6)


def test_similarity_matrix_diagonal_matches_pairs(rng):
    v, e = rng.normal(size=(3, 4, 3)), rng.normal(size=(3, 2, 3))
    w_poi, w_woi = rng.dirichlet(np.ones(4), size=3), rng.dirichlet(np.ones(2), size=3)
    valid = np.ones((3, 2), dtype=bool)
    s = similarity_matrix(t(v), t(e), t(w_poi), t(w_woi), valid).data
    assert s.shape == (3, 3)
    for i in range(3):
        pair = pair_similarity(alignment_matrix(t(v[i]), t(e[i])), t(w_poi[i]), t(w_woi[i]))
        assert s[i, i] == pytest.approx(pair.item(), abs=1e-12)


def test_aggregate_similarity():
    a = t([[0.1, 0.9], [0.3, 0.8]])
    assert aggregate_similarity(a, t([0.25, 0.75])).item() == pytest.approx(0.25 * 0.3 + 0.75 * 0.9)


# ----------------------------------------------------------------------
# Contrastive loss
# ----------------------------------------------------------------------

def test_single_pair_loss_is_zero():
    for form in ("standard", "printed"):
        assert contrastive_loss(t([[0.37]]), 0.07, form).item() == pytest.approx(0.0, abs=1e-7)


def test_two_pair_hand_value():
    s = t([[1.0, -1.0], [-1.0, 1.0]])
    assert contrastive_loss(s, 1.0).item() == pytest.approx(softplus(-2.0), abs=1e-6)
    assert softplus(-2.0) == pytest.approx(0.1269, abs=1e-4)


def test_forms_agree_exactly_at_unit_temperature(rng):
    s = t(rng.uniform(-1, 1, size=(4, 4)))
    assert contrastive_loss(s, 1.0, "standard").item() == contrastive_loss(s, 1.0, "printed").item()


def test_forms_differ_at_low_temperature(rng):
    s = t(rng.uniform(-1, 1, size=(4, 4)))
    assert contrastive_loss(s, 0.07, "standard").item() != contrastive_loss(s, 0.07, "printed").item()


def test_contrastive_rejects_bad_input():
    with pytest.raises(ConfigurationError):
        contrastive_loss(t(np.eye(2)), 0.0)
    with pytest.raises(ConfigurationError):
        contrastive_loss(t(np.eye(2)), 1.0, form="other")
    with pytest.raises(DimensionError):
        contrastive_loss(t(np.ones((2, 3))), 1.0)


def test_contrastive_gradient_pulls_diagonal_up():
    s = t([[0.2, 0.1], [0.0, 0.3]], grad=True)
    contrastive_loss(s, 0.5).backward()
    assert (np.diag(s.grad) < 0).all()
    assert s.grad[0, 1] > 0 and s.grad[1, 0] > 0


def test_contrastive_loss_ignores_batch_order(rng):
    v, e = rng.normal(size=(4, 5, 3)), rng.normal(size=(4, 3, 3))
    w_poi = rng.dirichlet(np.ones(5), size=4)
    w_woi = rng.dirichlet(np.ones(3), size=4)
    valid = np.array([[True, True, True], [True, True, False], [True, False, False], [True, True, True]])
    w_woi = np.where(valid, w_woi, 0.0)
    w_woi /= w_woi.sum(axis=1, keepdims=True)

    s = similarity_matrix(t(v), t(e), t(w_poi), t(w_woi), valid)
    order = np.array([2, 0, 3, 1])
    shuffled = similarity_matrix(t(v[order]), t(e[order]), t(w_poi[order]), t(w_woi[order]), valid[order])
    np.testing.assert_allclose(shuffled.data, s.data[np.ix_(order, order)], rtol=1e-12)
    for form in ("standard", "printed"):
        assert contrastive_loss(shuffled, 0.07, form).item() == pytest.approx(contrastive_loss(s, 0.07, form).item(), rel=1e-12)
