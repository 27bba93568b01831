import math

import numpy as np
import pytest

from t2l.errors import ContractError, ShapeError
from t2l.tensor import (
    Tensor,
    backward,
    concat,
    cross_entropy,
    dropout,
    gather_rows,
    layer_norm,
    matmul,
    silu,
    softmax,
    stack,
)

from .oracles import check_gradient


def test_matmul_identity():
    m = matmul(Tensor(np.eye(2)), Tensor([[1.0, 2.0], [3.0, 4.0]]))
    assert np.array_equal(m.data, [[1.0, 2.0], [3.0, 4.0]])


def test_matmul_projector():
    m = matmul(Tensor([[1.0, 0.0], [0.0, 0.0]]), Tensor([[5.0], [7.0]]))
    assert np.array_equal(m.data, [[5.0], [0.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as ei:
        matmul(Tensor(np.zeros((3, 4))), Tensor(np.zeros((5, 2))))
    assert "(3, 4)" in str(ei.value) and "(5, 2)" in str(ei.value)


def test_matmul_gradient_vs_finite_differences():
    rng = np.random.default_rng(7)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    worst = check_gradient(
        lambda ts: matmul(ts[0], ts[1]).sum(),
        [a, b],
        n_coords=12,
        rtol=1e-6,
        rng=rng,
    )
    assert worst < 1e-6


@pytest.mark.parametrize("row_stable", [False, True])
def test_matmul_batched_matches_loop(row_stable):
    rng = np.random.default_rng(3)
    a = rng.normal(size=(5, 3, 4))
    b = rng.normal(size=(4, 2))
    out = matmul(Tensor(a), Tensor(b), row_stable=row_stable)
    for i in range(5):
        ref = matmul(Tensor(a[i]), Tensor(b), row_stable=row_stable)
        np.testing.assert_allclose(out.data[i], ref.data, rtol=1e-12)


def test_matmul_row_stable_is_bitwise_under_batching():
    rng = np.random.default_rng(11)
    a = rng.normal(size=(48, 32))
    b = rng.normal(size=(32, 40))
    full = matmul(Tensor(a), Tensor(b), row_stable=True).data
    rows = np.stack(
        [matmul(Tensor(a[i : i + 1]), Tensor(b), row_stable=True).data[0] for i in range(48)]
    )
    assert np.array_equal(full, rows)


def test_batched_matmul_gradients():
    rng = np.random.default_rng(9)
    a = rng.normal(size=(2, 3, 4))
    b = rng.normal(size=(2, 4, 3))
    check_gradient(lambda ts: matmul(ts[0], ts[1]).sum(), [a, b], n_coords=10, rng=rng)
    # shared right operand
    b2 = rng.normal(size=(4, 3))
    check_gradient(lambda ts: matmul(ts[0], ts[1]).sum(), [a, b2], n_coords=10, rng=rng)


def test_silu_values():
    assert silu(Tensor(0.0)).item() == 0.0
    assert abs(silu(Tensor(30.0)).item() - 30.0) < 1e-8
    expected = 1.0 / (1.0 + math.exp(-1.0))
    assert abs(silu(Tensor(1.0)).item() - expected) < 1e-12


def test_silu_gradient():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(6,))
    check_gradient(lambda ts: silu(ts[0]).sum(), [x], n_coords=6, rng=rng)


def test_layer_norm_constant_row_is_zero():
    out = layer_norm(Tensor([[3.0, 3.0, 3.0, 3.0]]), Tensor(np.ones(4)), Tensor(np.zeros(4)))
    np.testing.assert_allclose(out.data, 0.0, atol=1e-12)


def test_layer_norm_already_normalized():
    out = layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
    np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-4)


def test_layer_norm_gradient():
    rng = np.random.default_rng(13)
    x = rng.normal(size=(2, 4))
    gain = rng.normal(size=(4,))
    bias = rng.normal(size=(4,))

    def loss(ts):
        return (layer_norm(ts[0], ts[1], ts[2]) * Tensor(rng2)).sum()

    rng2 = np.random.default_rng(1).normal(size=(2, 4))
    worst = check_gradient(loss, [x, gain, bias], n_coords=8, rtol=1e-5, rng=rng)
    assert worst < 1e-5


def test_cross_entropy_uniform_logits():
    vocab = 16
    logits = Tensor(np.zeros((3, vocab)))
    loss = cross_entropy(logits, [1, 5, 9])
    assert abs(loss.item() - math.log(vocab)) < 1e-12


def test_cross_entropy_saturated():
    logits = np.full((1, 4), -100.0)
    logits[0, 2] = 100.0
    assert cross_entropy(Tensor(logits), [2]).item() < 1e-12


def test_cross_entropy_closed_form():
    loss = cross_entropy(Tensor([[2.0, 0.0]]), [0])
    assert abs(loss.item() - math.log(1.0 + math.exp(-2.0))) < 1e-12


def test_cross_entropy_out_of_range():
    with pytest.raises(IndexError):
        cross_entropy(Tensor(np.zeros((2, 4))), [1, 4])


def test_cross_entropy_mask_excludes_rows():
    rng = np.random.default_rng(2)
    logits = rng.normal(size=(4, 8))
    t = [1, 2, 3, 4]
    masked = cross_entropy(Tensor(logits), t, mask=[1, 0, 1, 0])
    kept = cross_entropy(Tensor(logits[[0, 2]]), [1, 3])
    assert abs(masked.item() - kept.item()) < 1e-12


def test_cross_entropy_empty_mask_rejected():
    with pytest.raises(ContractError):
        cross_entropy(Tensor(np.zeros((2, 4))), [0, 1], mask=[0, 0])


def test_cross_entropy_gradient():
    rng = np.random.default_rng(21)
    logits = rng.normal(size=(5, 7))
    t = rng.integers(0, 7, size=5)
    mask = np.array([1, 1, 0, 1, 1], dtype=float)
    check_gradient(lambda ts: cross_entropy(ts[0], t, mask), [logits], n_coords=20, rng=rng)


def test_softmax_rows_sum_to_one_and_gradient():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(3, 5)) * 2
    y = softmax(Tensor(x))
    np.testing.assert_allclose(y.data.sum(axis=-1), 1.0, rtol=1e-12)
    w = rng.normal(size=(3, 5))
    check_gradient(lambda ts: (softmax(ts[0]) * Tensor(w)).sum(), [x], n_coords=10, rng=rng)


def test_backward_sum_gives_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    backward(x.sum())
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_backward_quadratic_gives_x():
    data = np.arange(5.0)
    x = Tensor(data, requires_grad=True)
    backward(((x * x).sum() / 2.0))
    np.testing.assert_allclose(x.grad, data, rtol=1e-12)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        backward(x * x)


def test_backward_accumulates_without_reset():
    x = Tensor(np.ones(4), requires_grad=True)
    loss = x.sum()
    backward(loss)
    backward(loss)
    assert np.array_equal(x.grad, 2 * np.ones(4))
    x.zero_grad()
    backward(loss)
    assert np.array_equal(x.grad, np.ones(4))


def test_diamond_graph_gradient_counts_both_paths():
    x = Tensor(2.0, requires_grad=True)
    y = x * x  # reused twice below
    backward(y + y)
    assert abs(float(x.grad) - 8.0) < 1e-12


def test_tape_isolation():
    x = Tensor(np.ones(3), requires_grad=True)
    y = Tensor(np.ones(3), requires_grad=True)
    lx = (x * x).sum()
    _ = (y * y).sum()
    backward(lx)
    assert y.grad is None


def test_constants_have_no_tape_node():
    t = Tensor([1.0, 2.0])
    assert t.is_leaf() and not t.requires_grad
    out = t + t
    assert out.is_leaf()


def test_determinism_same_inputs_same_bits():
    def run():
        rng = np.random.default_rng(123)
        a = Tensor(rng.normal(size=(8, 8)), requires_grad=True)
        b = Tensor(rng.normal(size=(8, 8)), requires_grad=True)
        loss = cross_entropy(silu(matmul(a, b)), rng.integers(0, 8, size=8))
        backward(loss)
        return loss.data.copy(), a.grad.copy(), b.grad.copy()

    l1, ga1, gb1 = run()
    l2, ga2, gb2 = run()
    assert np.array_equal(l1, l2) and np.array_equal(ga1, ga2) and np.array_equal(gb1, gb2)


def test_concat_stack_narrow_permute_gradients():
    rng = np.random.default_rng(17)
    a = rng.normal(size=(2, 3))
    b = rng.normal(size=(2, 5))

    def loss(ts):
        c = concat([ts[0], ts[1]], axis=-1)
        return (c * c).sum()

    check_gradient(loss, [a, b], n_coords=10, rng=rng)

    c = rng.normal(size=(3, 4))
    d = rng.normal(size=(3, 4))
    check_gradient(lambda ts: (stack([ts[0], ts[1]]) * 2.0).sum(), [c, d], n_coords=8, rng=rng)
    check_gradient(lambda ts: ts[0].narrow(1, 1, 2).sum(), [c], n_coords=8, rng=rng)
    check_gradient(
        lambda ts: (ts[0].permute(1, 0) * Tensor(d.T)).sum(), [c], n_coords=8, rng=rng
    )


def test_gather_rows_forward_backward():
    table = Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
    out = gather_rows(table, [0, 2, 2])
    assert np.array_equal(out.data, [[0, 1, 2], [6, 7, 8], [6, 7, 8]])
    backward(out.sum())
    expected = np.zeros((4, 3))
    expected[0] = 1
    expected[2] = 2
    assert np.array_equal(table.grad, expected)
    with pytest.raises(IndexError):
        gather_rows(table, [4])


def test_dropout_train_semantics():
    rng = np.random.default_rng(0)
    x = Tensor(np.ones((100, 10)), requires_grad=True)
    y = dropout(x, 0.5, rng)
    kept = y.data != 0
    assert 0.3 < kept.mean() < 0.7
    np.testing.assert_allclose(y.data[kept], 2.0)
    assert dropout(x, 0.0, rng) is x
    backward(y.sum())
    np.testing.assert_allclose(x.grad[kept], 2.0)
    np.testing.assert_allclose(x.grad[~kept], 0.0)


def test_suffix_broadcast_add_and_reject():
    x = Tensor(np.ones((2, 3, 4)), requires_grad=True)
    b = Tensor(np.arange(4.0), requires_grad=True)
    backward((x + b).sum())
    assert np.array_equal(b.grad, np.full(4, 6.0))
    with pytest.raises(ShapeError):
        _ = Tensor(np.ones((2, 3))) + Tensor(np.ones((2, 4)))
