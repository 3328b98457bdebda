import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from procformer import tensor as T
from procformer.exceptions import AllMasked, BadTargetId, NonScalarLoss, ShapeMismatch

from helpers import gradient_check


def leaf(x):
    return T.Tensor(np.asarray(x, dtype=float), requires_grad=True)


# -- forward values ---------------------------------------------------------------

def test_softmax_equal_logits():
    np.testing.assert_array_equal(T.softmax_last_axis(T.Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_softmax_single_survivor():
    y = T.softmax_last_axis(T.Tensor([1.0, 2.0, 3.0]), [False, False, True])
    np.testing.assert_array_equal(y.data, [0.0, 0.0, 1.0])


def test_softmax_all_masked_raises():
    with pytest.raises(AllMasked):
        T.softmax_last_axis(T.Tensor([[1.0, 2.0], [3.0, 4.0]]), [[True, False], [False, False]])


def test_layer_norm_two_values():
    y = T.layer_norm_last_axis(T.Tensor([1.0, 3.0]), T.Tensor([1.0, 1.0]),
                               T.Tensor([0.0, 0.0]), eps=1e-15)
    np.testing.assert_allclose(y.data, [-1.0, 1.0], rtol=1e-12)


def test_layer_norm_rejects_bad_eps():
    with pytest.raises(ValueError):
        T.layer_norm_last_axis(T.Tensor([1.0, 3.0]), T.Tensor([1.0, 1.0]),
                               T.Tensor([0.0, 0.0]), eps=0.0)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (4, 6), elements=st.floats(-1e3, 1e3)))
def test_layer_norm_moments(x):
    ones, zeros = T.Tensor(np.ones(6)), T.Tensor(np.zeros(6))
    y = T.layer_norm_last_axis(T.Tensor(x), ones, zeros).data
    assert np.all(np.abs(y.mean(axis=-1)) <= 1e-9)
    # unit variance holds once eps is negligible against the row variance
    ok = x.std(axis=-1) > 1e-3
    y = T.layer_norm_last_axis(T.Tensor(x), ones, zeros, eps=1e-14).data
    np.testing.assert_allclose(y[ok].var(axis=-1), 1.0, atol=1e-6)


@settings(max_examples=80, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)),
       arrays(np.bool_, (3, 5)))
def test_softmax_rows_sum_to_one(x, mask):
    mask[:, 0] = True
    y = T.softmax_last_axis(T.Tensor(x), mask).data
    assert np.all((y >= 0) & (y <= 1))
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(y[~mask] == 0.0)


def test_dropout_identity_when_not_training():
    x = T.Tensor(np.arange(6.0))
    assert T.dropout(x, 0.5, False, T.make_rng(0)) is x


def test_dropout_preserves_expectation():
    rng = T.make_rng(7)
    y = T.dropout(T.Tensor(np.ones(100_000)), 0.1, True, rng).data
    assert abs(y.mean() - 1.0) <= 0.01
    assert set(np.unique(y)) <= {0.0, 1.0 / 0.9}


def test_embedding_lookup_and_range():
    table = T.Tensor(np.arange(12.0).reshape(4, 3))
    np.testing.assert_array_equal(T.embedding_lookup(table, [[3, 0]]).data,
                                  [[[9, 10, 11], [0, 1, 2]]])
    with pytest.raises(ShapeMismatch):
        T.embedding_lookup(table, [4])


def test_max_over_axis_respects_mask():
    x = T.Tensor([[[1.0], [9.0], [3.0]]])
    out = T.max_over_axis(x, axis=1, mask=[[[True], [False], [True]]])
    np.testing.assert_array_equal(out.data, [[3.0]])


def test_shape_mismatch_messages_carry_shapes():
    with pytest.raises(ShapeMismatch, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeMismatch):
        T.add(T.Tensor(np.ones(3)), T.Tensor(np.ones(4)))


# -- losses -----------------------------------------------------------------------------

def test_cross_entropy_values():
    assert T.cross_entropy(T.Tensor([[0.0, 0.0, 0.0, 0.0]]), [2]).item() == pytest.approx(
        math.log(4), abs=1e-12)
    assert T.cross_entropy(T.Tensor([[1.0, 0.0]]), [0]).item() == pytest.approx(
        0.313261687518223, abs=1e-12)
    assert T.cross_entropy(T.Tensor([[60.0, 0.0, 0.0]]), [0]).item() < 1e-25


def test_cross_entropy_bad_target():
    with pytest.raises(BadTargetId):
        T.cross_entropy(T.Tensor([[1.0, 0.0]]), [2])


def test_cross_entropy_equal_weights_match_unweighted():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(9, 5))
    y = rng.integers(0, 5, size=9)
    plain = T.cross_entropy(T.Tensor(z), y).item()
    weighted = T.cross_entropy(T.Tensor(z), y, np.full(5, 2.5)).item()
    assert abs(plain - weighted) <= 1e-12


def test_cross_entropy_weighted_mean_normalised_by_weights():
    z = np.array([[2.0, 0.0], [0.0, 1.0]])
    y = np.array([0, 1])
    nll = -np.log(np.exp(z[[0, 1], y]) / np.exp(z).sum(axis=1))
    w = np.array([3.0, 1.0])
    expected = (w[y] * nll).sum() / w[y].sum()
    assert T.cross_entropy(T.Tensor(z), y, w).item() == pytest.approx(expected, abs=1e-14)


def test_log_cosh_values():
    assert T.log_cosh(T.Tensor([2.0]), T.Tensor([2.0])).item() == 0.0
    assert T.log_cosh(T.Tensor([1.0]), T.Tensor([0.0])).item() == pytest.approx(
        math.log(math.cosh(1.0)), abs=1e-15)
    assert T.log_cosh(T.Tensor([1.0]), T.Tensor([0.0])).item() == pytest.approx(0.433781, abs=1e-6)
    big = T.log_cosh(T.Tensor([100.0, -1e6]), T.Tensor([0.0, 0.0])).item()
    assert big == pytest.approx(((100 - math.log(2)) + (1e6 - math.log(2))) / 2, rel=1e-15)


# -- backward -------------------------------------------------------------------------

def test_backward_linear_and_quadratic():
    x = leaf([1.0, 2.0, 3.0])
    T.backward(T.sum(x))
    np.testing.assert_array_equal(x.grad, [1, 1, 1])
    x = leaf([2.0, -1.0])
    T.backward(T.sum(T.mul(x, x)))
    np.testing.assert_array_equal(x.grad, [4.0, -2.0])


def test_backward_accumulates_across_losses():
    x = leaf([2.0, -1.0])
    T.backward(T.sum(x))
    T.backward(T.sum(T.mul(x, x)))
    np.testing.assert_array_equal(x.grad, [5.0, -1.0])


def test_backward_requires_scalar_and_clears_tape():
    x = leaf([1.0, 2.0])
    with T.Tape() as tape:
        y = T.mul_scalar(x, 3.0)
        with pytest.raises(NonScalarLoss):
            T.backward(y)
        T.backward(T.sum(y))
        assert len(tape) == 0
    np.testing.assert_array_equal(x.grad, [3.0, 3.0])


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with T.Tape() as tape, T.no_grad():
        T.sum(T.mul(x, x))
        assert len(tape) == 0


def test_tape_nodes_in_topological_order():
    x = leaf([1.0, 2.0])
    with T.Tape() as tape:
        a = T.relu(x)
        b = T.mul_scalar(a, 2.0)
        T.sum(b)
        outs = [n.out for n in tape.nodes]
        assert outs.index(a) < outs.index(b)


def _op_cases(rng):
    a = leaf(rng.normal(size=(2, 3, 4)))
    b = leaf(rng.normal(size=(4, 5)))
    c = leaf(rng.normal(size=(3, 4)))
    g = leaf(rng.uniform(0.5, 1.5, size=4))
    h = leaf(rng.normal(size=4))
    table = leaf(rng.normal(size=(6, 4)))
    mask = np.array([[True, True, False, True], [True, False, False, False], [True] * 4])
    w = rng.normal(size=(2, 3, 4))
    ids = np.array([[1, 2, 2], [5, 0, 1]])
    logits = leaf(rng.normal(size=(5, 4)))
    pred = leaf(rng.normal(size=7))
    tgt = leaf(rng.normal(size=7) * 3)
    return {
        "matmul": (lambda: T.sum(T.mul(T.matmul(a, b), T.Tensor(rng_fixed(2, 3, 5)))), [a, b]),
        "add_broadcast": (lambda: T.sum(T.mul(T.add(a, c), T.Tensor(w))), [a, c]),
        "mul_scalar": (lambda: T.sum(T.mul(T.mul_scalar(a, -1.7), T.Tensor(w))), [a]),
        "relu": (lambda: T.sum(T.mul(T.relu(a), T.Tensor(w))), [a]),
        "softmax_mask": (lambda: T.sum(T.mul(T.softmax_last_axis(c, mask), T.Tensor(w[0]))), [c]),
        "layer_norm": (lambda: T.sum(T.mul(T.layer_norm_last_axis(a, g, h), T.Tensor(w))),
                       [a, g, h]),
        "embedding": (lambda: T.sum(T.mul(T.embedding_lookup(table, ids), T.Tensor(w))), [table]),
        "max_pool": (lambda: T.sum(T.mul(T.max_over_axis(a, 1), T.Tensor(w[:, 0]))), [a]),
        "concat": (lambda: T.sum(T.mul(T.concat_last_axis(c, T.mul_scalar(c, 2.0)),
                                       T.Tensor(rng_fixed(3, 8)))), [c]),
        "transpose": (lambda: T.sum(T.mul(T.transpose_last_two(a), T.Tensor(rng_fixed(2, 4, 3)))),
                      [a]),
        "reshape_mean": (lambda: T.mean(T.mul(T.reshape(a, (6, 4)), T.Tensor(w.reshape(6, 4)))),
                         [a]),
        "cross_entropy": (lambda: T.cross_entropy(logits, [0, 3, 1, 1, 2],
                                                  np.array([1.0, 2.0, 0.5, 1.5])), [logits]),
        "log_cosh": (lambda: T.log_cosh(pred, tgt), [pred, tgt]),
    }


def rng_fixed(*shape):
    return np.random.default_rng(99).normal(size=shape)


@pytest.mark.parametrize("op", list(_op_cases(np.random.default_rng(0))))
def test_op_gradients_match_finite_differences(op):
    rng = np.random.default_rng(0)
    fn, tensors = _op_cases(rng)[op]
    rows = gradient_check(fn, [(str(i), t) for i, t in enumerate(tensors)], rng)
    worst = max(r[-1] for r in rows)
    assert worst <= 1e-4, f"{op}: worst relative error {worst:.2e}"


def test_dropout_gradient_uses_same_mask():
    x = leaf(np.random.default_rng(3).normal(size=(4, 5)))

    def fn():
        return T.sum(T.mul(T.dropout(x, 0.3, True, T.make_rng(11)), T.Tensor(rng_fixed(4, 5))))

    rows = gradient_check(fn, [("x", x)], np.random.default_rng(0))
    assert max(r[-1] for r in rows) <= 1e-4


def test_make_rng_is_reproducible_and_stream_separated():
    a = T.make_rng(5, 1).random(4)
    np.testing.assert_array_equal(a, T.make_rng(5, 1).random(4))
    assert not np.array_equal(a, T.make_rng(5, 2).random(4))
