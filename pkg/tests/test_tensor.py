import numpy as np
import pytest

from src.autodiff import ops
from src.autodiff.tensor import ComputationRecord, Tensor, is_grad_enabled, no_grad, unbroadcast
from src.errors import DimensionError


def test_scalar_backward_seeds_with_one():
    x = Tensor(np.array([3.0]), requires_grad=True)
    ops.sum(ops.square(x)).backward()
    assert x.grad[0] == pytest.approx(6.0)


def test_leaf_gradients_accumulate_across_passes():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    ops.sum(x * 3.0).backward()
    ops.sum(x * 3.0).backward()
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])
    x.zero_grad()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])


def test_intermediate_gradients_are_fresh_per_pass():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = ops.square(x)
    record = ComputationRecord.trace(ops.sum(y))
    record.backward()
    first = y.grad.copy()
    record.backward()
    np.testing.assert_array_equal(y.grad, first)
    assert x.grad[0] == pytest.approx(8.0)


def test_record_is_topological():
    x = Tensor(np.ones(3), requires_grad=True)
    out = ops.sum(ops.relu(x) * 2.0)
    record = out.backward()
    ops_in_order = [entry.op for entry in record.entries]
    assert ops_in_order == ["leaf", "relu", "mul", "sum"]
    assert len(record) == 4


def test_no_grad_stops_recording():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        assert not is_grad_enabled()
        y = x * 2.0
    assert is_grad_enabled()
    assert not y.requires_grad
    assert y.is_leaf


def test_constant_inputs_do_not_record():
    y = Tensor(np.ones(2)) + Tensor(np.ones(2))
    assert not y.requires_grad


def test_backward_on_vector_needs_seed():
    x = Tensor(np.ones(3), requires_grad=True)
    y = x * 2.0
    with pytest.raises(DimensionError):
        y.backward()
    y.backward(np.array([1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(x.grad, [2.0, 0.0, 4.0])


def test_seed_shape_must_match():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(DimensionError, match=r"\(2,\)"):
        (x * 2.0).backward(np.ones(2))


def test_item_requires_single_element():
    assert Tensor(np.array([[4.0]])).item() == 4.0
    with pytest.raises(DimensionError):
        Tensor(np.ones(2)).item()


def test_detach_cuts_the_graph():
    x = Tensor(np.array([1.0]), requires_grad=True)
    y = (x * 2.0).detach()
    assert not y.requires_grad
    out = ops.sum(x * y)
    out.backward()
    assert x.grad[0] == pytest.approx(2.0)


def test_default_dtype_is_float32_and_float64_is_kept():
    assert Tensor([1.0, 2.0]).dtype == np.float32
    assert Tensor(np.array([1.0])).dtype == np.float64


def test_unbroadcast_sums_expanded_axes():
    g = np.ones((4, 2, 3))
    np.testing.assert_array_equal(unbroadcast(g, (2, 3)), np.full((2, 3), 4.0))
    np.testing.assert_array_equal(unbroadcast(g, (2, 1)), np.full((2, 1), 12.0))
