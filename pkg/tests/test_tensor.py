import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hgarn import tensor as T
from hgarn.gradcheck import check_gradients
from hgarn.tensor import Tape, Tensor, backward


def leaf(shape, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)


def grad_of(fn, *leaves):
    for x in leaves:
        x.zero_grad()
    with Tape() as tape:
        loss = fn()
    backward(tape, loss)
    return [x.grad.copy() for x in leaves]


# ---- forward values


def test_matmul_hand_value():
    a = Tensor([[1, 2], [3, 4]])
    b = Tensor([[5], [6]])
    np.testing.assert_array_equal((a @ b).data, [[17], [39]])


def test_matmul_identity_and_shape_error():
    a = leaf((3, 3))
    np.testing.assert_array_equal((a @ Tensor(np.eye(3))).data, a.data)
    with pytest.raises(ValueError, match=r"\(3, 3\).*\(2, 2\)"):
        a @ Tensor(np.eye(2))


def test_concat_and_slice():
    a, b = leaf((2, 3), 1), leaf((1, 3), 2)
    c = T.concat([a, b], "rows")
    np.testing.assert_array_equal(c.data, np.vstack([a.data, b.data]))
    empty = Tensor(np.zeros((0, 3)))
    np.testing.assert_array_equal(T.concat([a, empty], "rows").data, a.data)
    np.testing.assert_array_equal(T.slice_rows(a, 0, 2).data, a.data)
    parts = [T.slice_rows(c, 0, 1), T.slice_rows(c, 1, 3)]
    np.testing.assert_array_equal(T.concat(parts, "rows").data, c.data)
    with pytest.raises(ValueError):
        T.concat([a, leaf((2, 2))], "rows")
    with pytest.raises((ValueError, IndexError)):
        T.slice_rows(a, 1, 5)


def test_slice_of_concat_routes_gradient_to_one_operand():
    a, b = leaf((2, 3), 1), leaf((1, 3), 2)
    ga, gb = grad_of(lambda: T.slice_rows(T.concat([a, b], "rows"), 2, 3).sum(), a, b)
    assert not ga.any()
    np.testing.assert_array_equal(gb, np.ones((1, 3)))


def test_masked_softmax_examples():
    one = T.masked_softmax_rows(Tensor(np.array([[3.0, 1.0], [2.0, 5.0]])), np.eye(2))
    np.testing.assert_array_equal(one.data, np.eye(2))
    half = T.masked_softmax_rows(Tensor([[1.0, 1.0]]), [[1, 1]])
    np.testing.assert_allclose(half.data, [[0.5, 0.5]], rtol=0, atol=1e-15)
    third = T.masked_softmax_rows(Tensor([[0.0, math.log(2)]]), [[1, 1]])
    np.testing.assert_allclose(third.data, [[1 / 3, 2 / 3]], rtol=0, atol=1e-15)
    with pytest.raises(ValueError, match="no unmasked"):
        T.masked_softmax_rows(Tensor(np.zeros((2, 2))), [[1, 0], [0, 0]])


def test_masked_entries_are_zero_in_value_and_gradient():
    rng = np.random.default_rng(3)
    mask = rng.random((5, 5)) < 0.5
    np.fill_diagonal(mask, True)
    e = leaf((5, 5), 4, scale=3)
    w = Tensor(rng.normal(size=(5, 5)))
    y = T.masked_softmax_rows(e, mask)
    assert (y.data[~mask] == 0).all()
    np.testing.assert_allclose(y.data.sum(axis=1), 1.0, rtol=0, atol=1e-12)
    (g,) = grad_of(lambda: T.hadamard(T.masked_softmax_rows(e, mask), w).sum(), e)
    assert (g[~mask] == 0).all()


def test_activation_values():
    assert T.sigmoid(Tensor([[0.0]])).item() == 0.5
    assert T.tanh(Tensor([[0.0]])).item() == 0.0
    assert T.leaky_relu(Tensor([[-1.0]])).item() == pytest.approx(-0.2, abs=1e-15)
    assert T.elu(Tensor([[-1.0]])).item() == pytest.approx(math.exp(-1) - 1, abs=1e-15)
    with pytest.raises(ValueError):
        T.activation(Tensor([[0.0]]), "relu6")


def test_sigmoid_is_stable_for_large_inputs():
    y = T.sigmoid(Tensor([[-1000.0, 1000.0]])).data
    np.testing.assert_array_equal(y, [[0.0, 1.0]])


def test_elementwise_and_broadcast():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.hadamard(a, Tensor(np.ones((2, 2)))).data, a.data)
    np.testing.assert_array_equal(T.broadcast_add(a, Tensor([[10.0, 20.0]])).data,
                                  [[11, 22], [13, 24]])
    np.testing.assert_array_equal(T.elementwise(a, a, "add").data, 2 * a.data)
    with pytest.raises(ValueError):
        T.hadamard(a, Tensor(np.ones((3, 2))))
    with pytest.raises(ValueError):
        T.elementwise(a, a, "divide")


def test_gather_repeated_ids_accumulate():
    table = leaf((4, 3))
    (g,) = grad_of(lambda: T.gather_rows(table, [2, 2]).sum(), table)
    np.testing.assert_array_equal(g[2], [2.0, 2.0, 2.0])
    assert not np.delete(g, 2, axis=0).any()
    with pytest.raises(IndexError):
        T.gather_rows(table, [4])


def test_backward_examples():
    w = leaf((3, 2))
    (g,) = grad_of(lambda: w.sum(), w)
    np.testing.assert_array_equal(g, np.ones((3, 2)))
    (g,) = grad_of(lambda: T.hadamard(w, w).sum(), w)
    np.testing.assert_array_equal(g, 2 * w.data)
    with Tape() as tape:
        y = w * 2.0
    with pytest.raises(ValueError, match="1x1"):
        backward(tape, y)


def test_leaf_gradients_accumulate_across_backward_calls():
    w = leaf((2, 2))
    for _ in range(2):
        with Tape() as tape:
            loss = w.sum()
        backward(tape, loss)
    np.testing.assert_array_equal(w.grad, 2 * np.ones((2, 2)))


def test_nothing_recorded_outside_a_tape():
    with Tape() as tape:
        (Tensor(np.ones((2, 2))) @ Tensor(np.ones((2, 2)))).sum()
    assert len(tape) == 0


def test_tape_determinism():
    def run():
        a, b = leaf((3, 4), 7), leaf((4, 2), 8)
        with Tape() as tape:
            loss = T.tanh(a @ b).mean()
        backward(tape, loss)
        return loss.item(), a.grad.copy()

    (l1, g1), (l2, g2) = run(), run()
    assert l1 == l2
    np.testing.assert_array_equal(g1, g2)


# ---- finite-difference checks


def test_gradcheck_matmul():
    a, b = leaf((3, 4), 1), leaf((4, 2), 2)
    w = Tensor(np.random.default_rng(9).normal(size=(3, 2)))
    errs = check_gradients(lambda: T.hadamard(a @ b, w).sum(), {"a": a, "b": b})
    assert max(errs.values()) < 1e-6


def test_gradcheck_slice_gather_concat():
    a, table = leaf((5, 3), 1), leaf((4, 3), 2)
    w = Tensor(np.random.default_rng(5).normal(size=(4, 6)))

    def loss():
        x = T.concat([T.slice_rows(a, 1, 4), T.gather_rows(table, [0, 3, 3])], "cols")
        tail = T.concat([T.slice_cols(T.gather_rows(table, [1]), 0, 3), T.slice_rows(a, 4, 5)], "cols")
        x = T.concat([x, tail], "rows")
        return T.hadamard(x, w).sum()

    assert max(check_gradients(loss, {"a": a, "table": table}).values()) < 1e-6


@pytest.mark.parametrize("kind", ["sigmoid", "tanh", "leaky_relu", "elu"])
def test_gradcheck_activations(kind):
    rng = np.random.default_rng(11)
    x = rng.uniform(-3, 3, size=(10, 10))
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
    a = Tensor(x, requires_grad=True)
    w = Tensor(rng.normal(size=(10, 10)))
    errs = check_gradients(lambda: T.hadamard(T.activation(a, kind), w).sum(), {"a": a})
    assert errs["a"] < 1e-6


def test_gradcheck_softmaxes_and_broadcast():
    rng = np.random.default_rng(2)
    e, col, row = leaf((4, 4), 1), leaf((4, 1), 2), leaf((1, 4), 3)
    mask = np.eye(4, dtype=bool) | (rng.random((4, 4)) < 0.5)
    w = Tensor(rng.normal(size=(4, 4)))

    def loss():
        s = T.leaky_relu(e + row)
        return (T.hadamard(T.masked_softmax_rows(s, mask), w).sum() + T.hadamard(e + col, w).sum()
                + T.hadamard(T.log_softmax_rows(e), w).mean())

    assert max(check_gradients(loss, {"e": e, "col": col, "row": row}).values()) < 1e-6


def test_gradcheck_take_per_row_and_scale():
    a = leaf((3, 5), 4)
    errs = check_gradients(lambda: (T.take_per_row(a, [4, 0, 2]) * 3.0 - a.mean()).sum(), {"a": a})
    assert errs["a"] < 1e-6


# ---- properties


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-50, 50)),
       arrays(np.bool_, (3, 4)))
def test_masked_softmax_rows_always_sum_to_one(scores, mask):
    mask[:, 0] = True
    y = T.masked_softmax_rows(Tensor(scores), mask).data
    np.testing.assert_allclose(y.sum(axis=1), 1.0, rtol=0, atol=1e-12)
    assert (y[~mask] == 0).all()
    assert (y >= 0).all()


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (2, 6), elements=st.floats(-30, 30)), st.floats(-100, 100))
def test_log_softmax_shift_invariance(x, c):
    a = T.log_softmax_rows(Tensor(x)).data
    b = T.log_softmax_rows(Tensor(x + c)).data
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-10)


def test_checkpoint_round_trip(tmp_path):
    tensors = {"a": np.arange(6.0).reshape(2, 3), "b": np.array([[np.pi]])}
    T.save_tensors(tmp_path / "ck", tensors, {"note": "x"})
    loaded, meta = T.load_tensors(tmp_path / "ck")
    assert meta == {"note": "x"}
    for k, v in tensors.items():
        np.testing.assert_array_equal(loaded[k], v)
    raw = (tmp_path / "ck.bin").read_bytes()
    assert len(raw) == 7 * 8
    assert np.frombuffer(raw[:8], "<f8")[0] == 0.0
