import numpy as np
import pytest

from videosal import ops
from videosal.autograd import (ParameterStore, SelectionTape, Tape, Tensor,
                               backward, finite_diff_grad, frozen_selections,
                               relative_error)
from videosal.errors import ContractError, DimensionError
from videosal.nn import maxpool3d, maxunpool3d
from videosal.rng import SplitMix64


def test_tensor_scalars_get_rank_one():
    t = Tensor(3.0)
    assert t.shape == (1,)
    assert t.dtype == np.float32


def test_tensor_rejects_empty():
    with pytest.raises(DimensionError):
        Tensor(np.zeros((2, 0, 3)))


def test_tensor_keeps_float64():
    assert Tensor(np.zeros(3, dtype=np.float64)).dtype == np.float64


def test_nested_tapes_rejected():
    with Tape():
        with pytest.raises(ContractError):
            Tape().__enter__()


def test_backward_sum_gives_ones():
    w = Tensor(np.arange(6, dtype=np.float64).reshape(2, 3))
    tape = Tape()
    with tape:
        loss = ops.sum_all(w)
    grads = backward(tape, loss)
    assert np.array_equal(grads.of(w), np.ones((2, 3)))


def test_backward_sum_of_squares():
    w = Tensor(np.array([1.0, -2.0, 0.5], dtype=np.float64))
    tape = Tape()
    with tape:
        loss = ops.sum_all(ops.mul(w, w))
    grads = backward(tape, loss)
    assert np.allclose(grads.of(w), 2 * w.data)


def test_backward_requires_scalar_loss():
    w = Tensor(np.ones(3))
    tape = Tape()
    with tape:
        y = ops.mul(w, w)
    with pytest.raises(ContractError):
        backward(tape, y)


def test_backward_accumulates_into_store():
    store = ParameterStore()
    w = store.create("w", np.array([1.0, 2.0], dtype=np.float64))
    for _ in range(2):
        tape = Tape()
        with tape:
            loss = ops.sum_all(ops.mul(w, w))
        backward(tape, loss, store)
    assert np.allclose(store["w"].grad, 2 * (2 * w.data))
    store.zero_grads()
    assert np.array_equal(store["w"].grad, np.zeros(2))


def test_backward_handles_reused_tensor():
    # y enters two ops; contributions must add
    x = Tensor(np.array([3.0], dtype=np.float64))
    tape = Tape()
    with tape:
        y = ops.scale(x, 2.0)
        loss = ops.sum_all(ops.add(y, ops.mul(y, y)))
    grads = backward(tape, loss)
    # d/dx (2x + 4x^2) = 2 + 8x
    assert np.allclose(grads.of(x), 2 + 8 * x.data)


def test_store_rejects_duplicate_names():
    store = ParameterStore()
    store.create("w", np.ones(1))
    with pytest.raises(ContractError):
        store.create("w", np.ones(1))


def test_finite_diff_sum_of_squares():
    x = Tensor(np.array([1.0, 2.0], dtype=np.float64))

    def f(t):
        return float((t.data ** 2).sum())

    fd = finite_diff_grad(f, x, 1e-4)
    assert np.allclose(fd, [2.0, 4.0], atol=1e-7)
    assert np.array_equal(x.data, [1.0, 2.0])  # restored


def test_finite_diff_sigmoid_sum_at_zero():
    x = Tensor(np.zeros(4, dtype=np.float64))

    def f(t):
        return float((1.0 / (1.0 + np.exp(-t.data))).sum())

    assert np.allclose(finite_diff_grad(f, x, 1e-4), 0.25, atol=1e-8)


def test_finite_diff_rejects_bad_step():
    with pytest.raises(ContractError):
        finite_diff_grad(lambda t: 0.0, Tensor(np.ones(1)), 0.0)


def test_relative_error_floor():
    assert relative_error(np.zeros(3), np.full(3, 1e-9)) < 1e-3
    assert relative_error(np.ones(3), np.full(3, 1.001)) == pytest.approx(1e-3, rel=1e-2)


def test_backward_agrees_with_finite_diff_on_small_net():
    rng = SplitMix64(3)
    w1 = Tensor(rng.normal((4, 5)))
    w2 = Tensor(rng.normal((5, 2)))
    x = Tensor(rng.normal((3, 4)))

    def build():
        h = ops.sigmoid(ops.matmul(x, w1))
        return ops.sum_all(ops.mul(ops.matmul(h, w2), ops.matmul(h, w2)))

    tape = Tape()
    with tape:
        loss = build()
    grads = backward(tape, loss)
    for t in (w1, w2, x):
        fd = finite_diff_grad(lambda _: build(), t, 1e-4)
        assert relative_error(grads.of(t), fd) < 1e-3


def test_deterministic_repeat():
    rng = SplitMix64(9)
    a = Tensor(rng.normal((6, 6)))
    b = Tensor(rng.normal((6, 6)))

    def run():
        return ops.softmax_lastdim(ops.matmul(a, b)).data.copy()

    assert np.array_equal(run(), run())


def test_selection_tape_freezes_pool_choice():
    # exact tie in a pool window: replay keeps the recorded argmax even
    # after a perturbation lifts the other cell
    x = np.zeros((1, 1, 1, 2, 2), dtype=np.float64)
    sel = SelectionTape()
    t0 = Tensor(x)
    with frozen_selections(sel):
        _, idx0 = maxpool3d(t0, (1, 2, 2), (1, 2, 2))
    assert idx0.reshape(-1)[0] == 0  # tie broken to the lowest flat index
    sel.start_replay()
    bumped = x.copy()
    bumped[0, 0, 0, 1, 1] = 1.0
    with frozen_selections(sel):
        pooled, idx1 = maxpool3d(Tensor(bumped), (1, 2, 2), (1, 2, 2))
    assert idx1.reshape(-1)[0] == 0  # frozen, ignores the new maximum
    assert pooled.data.reshape(-1)[0] == 0.0


def test_selection_tape_replay_exhaustion():
    sel = SelectionTape()
    sel.start_replay()
    with pytest.raises(ContractError):
        sel.take("relu", lambda: None)
