from __future__ import annotations

import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskmatch import tensor as T
from maskmatch.tensor import Tensor, backward, check_gradients
from maskmatch.utils import ContractError, DimensionError, DomainError

from conftest import leaf


def test_add_broadcast_gradient_sums_over_expanded_axis(rng):
    a = leaf(rng, 3, 4)
    b = leaf(rng, 4)
    backward((a + b).sum())
    np.testing.assert_array_equal(a.grad, np.ones((3, 4)))
    np.testing.assert_array_equal(b.grad, np.full(4, 3.0))


def test_broadcast_expanding_both_operands_is_rejected():
    with pytest.raises(DimensionError):
        Tensor(np.ones((3, 1))) + Tensor(np.ones((1, 4)))


def test_incompatible_shapes_are_rejected():
    with pytest.raises(DimensionError):
        Tensor(np.ones((3, 2))) * Tensor(np.ones((3, 4)))


def test_reused_tensor_accumulates_gradient(rng):
    x = leaf(rng, 5)
    backward((x * x).sum())
    np.testing.assert_allclose(x.grad, 2.0 * x.data)


def test_gradients_accumulate_across_backward_calls(rng):
    x = leaf(rng, 3)
    backward(x.sum())
    backward(x.sum())
    np.testing.assert_array_equal(x.grad, np.full(3, 2.0))


def test_backward_needs_scalar(rng):
    x = leaf(rng, 3)
    with pytest.raises(ContractError):
        backward(x * 2.0)


def test_backward_needs_grad():
    with pytest.raises(ContractError):
        backward(Tensor(1.0) * 2.0)


def test_no_grad_inputs_record_nothing():
    y = Tensor(np.ones(3)) * 2.0
    assert y.is_leaf and not y.requires_grad


def test_no_grad_block_records_nothing(rng):
    x = leaf(rng, 3)
    with T.no_grad():
        assert not T.is_grad_enabled()
        y = (x * x).sum()
    assert y.is_leaf and not y.requires_grad
    assert T.is_grad_enabled()
    assert (x * x).sum().requires_grad


def test_no_grad_is_per_thread(rng):
    x = leaf(rng, 3)
    seen = []
    with T.no_grad():
        worker = threading.Thread(target=lambda: seen.append((x * 2.0).requires_grad))
        worker.start()
        worker.join()
    assert seen == [True]


@pytest.mark.parametrize(
    "fn",
    [
        lambda x: T.log(x - 5.0),
        lambda x: T.sqrt(x - 5.0),
        lambda x: Tensor(1.0) / (x * 0.0),
    ],
)
def test_domain_violations_raise(fn):
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(DomainError):
        fn(x)


def test_non_finite_data_rejected():
    with pytest.raises(DomainError):
        Tensor([1.0, np.inf])


def test_exp_overflow_is_a_domain_error():
    with pytest.raises(DomainError):
        T.exp(Tensor([1000.0]))


def test_sqrt_gradient_at_zero_is_zero():
    x = Tensor([0.0, 4.0], requires_grad=True)
    backward(T.sqrt(x).sum())
    np.testing.assert_allclose(x.grad, [0.0, 0.25])


def test_max_gradient_goes_to_first_extremum():
    x = Tensor([1.0, 3.0, 3.0, 2.0], requires_grad=True)
    backward(x.max())
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0, 0.0])


def test_min_along_axis_gradient():
    x = Tensor([[2.0, 1.0], [0.0, 5.0]], requires_grad=True)
    backward(x.min(axis=1).sum())
    np.testing.assert_array_equal(x.grad, [[0.0, 1.0], [1.0, 0.0]])


def test_softmax_rows_sum_to_one(rng):
    out = T.softmax(Tensor(rng.normal(size=(4, 7)) * 50.0), axis=-1)
    np.testing.assert_allclose(out.data.sum(axis=-1), np.ones(4))


def test_clamp_boundary_passes_gradient():
    x = Tensor([0.0, 0.5, 1.0, 2.0], requires_grad=True)
    backward(T.clamp(x, 0.0, 1.0).sum())
    np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0, 0.0])


def test_matmul_rank_mismatch():
    with pytest.raises(DimensionError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))


def test_reduce_bad_axis():
    with pytest.raises(DimensionError):
        Tensor(np.ones((2, 3))).sum(axis=2)


def test_reshape_mismatch():
    with pytest.raises(DimensionError):
        Tensor(np.ones(6)).reshape(4, 2)


def test_elementwise_dispatch(rng):
    x = Tensor(rng.normal(size=4))
    np.testing.assert_allclose(T.elementwise("sigmoid", x).data, 1.0 / (1.0 + np.exp(-x.data)))
    with pytest.raises(DimensionError):
        T.elementwise("tanh", x)


def test_sigmoid_is_stable_for_large_inputs():
    out = T.sigmoid(Tensor([-800.0, 800.0]))
    np.testing.assert_allclose(out.data, [0.0, 1.0])


def test_getitem_scatter_gradient():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    backward(x[:, 1].sum() + x[1, 2])
    np.testing.assert_array_equal(x.grad, [[0.0, 1.0, 0.0], [0.0, 1.0, 1.0]])


def test_resize_same_size_is_identity(rng):
    x = Tensor(rng.normal(size=(4, 4)))
    assert T.resize_bilinear(x, (4, 4)) is x


def test_interp_matrix_rows_sum_to_one():
    for n_in, n_out in [(8, 4), (4, 8), (5, 3), (1, 4)]:
        np.testing.assert_allclose(T.interp_matrix(n_in, n_out).sum(axis=1), np.ones(n_out))


def test_resize_constant_map_stays_constant():
    out = T.resize_bilinear(Tensor(np.full((16, 16), 0.5)), (4, 4))
    np.testing.assert_allclose(out.data, np.full((4, 4), 0.5))


def test_avg_pool(rng):
    x = rng.normal(size=(2, 4, 4))
    out = T.avg_pool2d(Tensor(x), 2)
    np.testing.assert_allclose(out.data, x.reshape(2, 2, 2, 2, 2).mean(axis=(2, 4)))


def test_detach_cuts_the_graph(rng):
    x = leaf(rng, 3)
    assert not (x * 2.0).detach().requires_grad


def test_graph_visits_each_op_once(rng):
    x = leaf(rng, 3)
    y = x * 2.0
    z = (y + y).sum()
    graph = backward(z)
    assert graph.visits == len(graph) == 3


def test_intermediate_gets_gradient(rng):
    x = leaf(rng, 3)
    y = x * 3.0
    backward(y.sum())
    np.testing.assert_array_equal(y.grad, np.ones(3))


GRAD_CASES = {
    "mul_div": lambda a, b: (a * b / (b * b + 1.0)).sum(),
    "matmul": lambda a, b: (a @ b.T).sum(),
    "softmax": lambda a, b: (T.softmax(a, axis=1) * b).sum(),
    "exp_log": lambda a, b: T.log(T.exp(a) + 1.0).mean() + (b * b).mean(),
    "sigmoid_sqrt": lambda a, b: T.sqrt(T.sigmoid(a) + 0.1).sum() * b.mean(),
    "reductions": lambda a, b: a.mean(axis=0).sum() + b.max(axis=1).sum() + b.min(),
    "shape_ops": lambda a, b: (T.concat([a, b], axis=0).transpose() @ T.stack([a, b]).reshape(6, 4)).sum(),
    "resize": lambda a, b: (T.resize_bilinear(a, (5, 7)) * T.resize_bilinear(b, (5, 7))).sum(),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_gradients_match_central_differences(name):
    rng = np.random.default_rng(7)
    a = leaf(rng, 3, 4)
    b = leaf(rng, 3, 4)
    fn = GRAD_CASES[name]
    assert check_gradients(lambda: fn(a, b), [a, b]) < 1e-5


@settings(max_examples=25, deadline=None)
@given(
    rows=st.integers(1, 4),
    cols=st.integers(1, 4),
    seed=st.integers(0, 2**16),
)
def test_sum_of_squares_gradient_property(rows, cols, seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng, rows, cols)
    backward((x * x).sum())
    np.testing.assert_allclose(x.grad, 2.0 * x.data)
