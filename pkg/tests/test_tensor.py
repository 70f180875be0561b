"""Oracle and property tests for the autodiff kernel.

Every closed-form value here is computed by hand (or by an explicit
independent formula inside the test), never by calling the code under test.
"""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lamate import tensor as T
from lamate.errors import (
    ArgumentError,
    DegenerateInputError,
    DimensionError,
    NumericError,
    StateError,
)


def params_of(*arrays):
    return [T.Parameter(np.asarray(a, dtype=np.float64), name=f"p{i}") for i, a in enumerate(arrays)]


# ---------------------------------------------------------------- forward oracles


def test_matmul_hand_value():
    a = T.Tensor([[1.0, 2.0]])
    b = T.Tensor([[3.0], [4.0]])
    out = T.matmul(a, b)
    assert out.data.shape == (1, 1)
    assert out.data[0, 0] == pytest.approx(11.0)


def test_matmul_batched_against_numpy(rng):
    a = T.Tensor(rng.normal(size=(3, 2, 4)))
    b = T.Tensor(rng.normal(size=(4, 5)))
    out = T.matmul(a, b)
    np.testing.assert_allclose(out.data, np.matmul(a.data, b.data), rtol=1e-6)


def test_matmul_shape_errors():
    with pytest.raises(DimensionError):
        T.matmul(T.Tensor([1.0, 2.0]), T.Tensor([[1.0], [2.0]]))
    with pytest.raises(DimensionError):
        T.matmul(T.Tensor([[1.0, 2.0]]), T.Tensor([[1.0, 2.0]]))


def test_softmax_hand_value():
    x = T.Tensor([math.log(1.0), math.log(2.0), math.log(3.0)])
    out = T.softmax(x)
    np.testing.assert_allclose(out.data, [1 / 6, 2 / 6, 3 / 6], atol=1e-6)


def test_layer_norm_hand_value():
    x = T.Tensor([[1.0, 3.0]])
    gamma = T.Tensor([1.0, 1.0])
    beta = T.Tensor([0.0, 0.0])
    out = T.layer_norm(x, gamma, beta)
    # mean 2, variance 1, eps 1e-5 -> +/- 1/sqrt(1 + 1e-5)
    expect = 1.0 / math.sqrt(1.0 + 1e-5)
    np.testing.assert_allclose(out.data, [[-expect, expect]], atol=1e-6)


def test_layer_norm_affine_params_applied():
    x = T.Tensor([[1.0, 3.0]])
    gamma = T.Tensor([2.0, 2.0])
    beta = T.Tensor([0.5, 0.5])
    out = T.layer_norm(x, gamma, beta)
    expect = 2.0 / math.sqrt(1.0 + 1e-5)
    np.testing.assert_allclose(out.data, [[0.5 - expect, 0.5 + expect]], atol=1e-6)


def test_gelu_reference_values():
    with T.use_dtype(np.float64):
        out = T.gelu(T.Tensor([0.0, 1.0, -1.0]))
    # x * Phi(x) with the exact normal CDF: Phi(1) = 0.8413447460685429
    np.testing.assert_allclose(
        out.data, [0.0, 0.8413447460685429, -(1.0 - 0.8413447460685429)], atol=1e-12
    )


def test_cross_entropy_hand_value():
    with T.use_dtype(np.float64):
        logits = T.Tensor([[math.log(3.0), 0.0]])
        loss = T.cross_entropy(logits, np.array([0]))
    assert loss.item() == pytest.approx(math.log(4.0 / 3.0), abs=1e-12)


def test_cross_entropy_mask_drops_positions():
    with T.use_dtype(np.float64):
        logits = T.Tensor([[0.0, 1.0], [5.0, -3.0]])
        targets = np.array([0, 1])
        full = T.cross_entropy(logits, targets, mask=np.array([True, False]))
        alone = T.cross_entropy(T.Tensor([[0.0, 1.0]]), np.array([0]))
    assert full.item() == pytest.approx(alone.item(), abs=1e-12)


def test_cross_entropy_all_masked_raises():
    with pytest.raises(DegenerateInputError):
        T.cross_entropy(T.Tensor([[0.0, 1.0]]), np.array([0]), mask=np.array([False]))


def test_cross_entropy_target_out_of_range():
    with pytest.raises(ArgumentError):
        T.cross_entropy(T.Tensor([[0.0, 1.0]]), np.array([2]))


def test_cross_entropy_label_smoothing_formula(rng):
    with T.use_dtype(np.float64):
        raw = rng.normal(size=(3, 5))
        targets = np.array([0, 3, 2])
        eps = 0.1
        loss = T.cross_entropy(T.Tensor(raw), targets, label_smoothing=eps)
    shifted = raw - raw.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    nll = -logp[np.arange(3), targets]
    expect = ((1 - eps) * nll - eps * logp.mean(axis=-1)).mean()
    assert loss.item() == pytest.approx(expect, abs=1e-12)


def test_take_scalar_and_errors():
    x = T.Tensor([3.0, 7.0, 1.0])
    assert T.take_scalar(x, 1).item() == pytest.approx(7.0)
    with pytest.raises(DimensionError):
        T.take_scalar(T.Tensor([[1.0]]), 0)


def test_narrow_concat_repeat_roundtrip(rng):
    x = rng.normal(size=(2, 6)).astype(np.float32)
    t = T.Tensor(x)
    left = T.narrow(t, 1, 0, 2)
    right = T.narrow(t, 1, 2, 4)
    back = T.concat([left, right], axis=1)
    np.testing.assert_array_equal(back.data, x)
    rep = T.repeat(T.Tensor([[1.0], [2.0]]), 3, axis=1)
    np.testing.assert_array_equal(rep.data, [[1, 1, 1], [2, 2, 2]])
    with pytest.raises(DimensionError):
        T.narrow(t, 1, 5, 3)
    with pytest.raises(ArgumentError):
        T.concat([], axis=0)


def test_embedding_gather_and_range_check():
    table = T.Tensor([[0.0, 1.0], [2.0, 3.0], [4.0, 5.0]])
    out = T.embedding(table, np.array([[2, 0]]))
    np.testing.assert_array_equal(out.data, [[[4.0, 5.0], [0.0, 1.0]]])
    with pytest.raises(ArgumentError):
        T.embedding(table, np.array([3]))
    with pytest.raises(ArgumentError):
        T.embedding(table, np.array([0.5]))


def test_broadcast_rules():
    a = T.Tensor(np.ones((2, 3)))
    assert T.add(a, T.Tensor(np.ones(3))).shape == (2, 3)
    assert T.add(a, T.Tensor(2.0)).shape == (2, 3)
    with pytest.raises(DimensionError):
        T.add(a, T.Tensor(np.ones(2)))


def test_masked_softmax_hides_cells_exactly():
    x = T.Parameter(np.array([[1.0, 50.0, 2.0]]), name="x")
    visible = np.array([[True, False, True]])
    out = T.masked_softmax(x, visible)
    assert out.data[0, 1] == 0.0
    assert out.data.sum() == pytest.approx(1.0, abs=1e-6)
    loss = T.tsum(T.mul(out, out))
    T.backward(loss)
    assert x.grad[0, 1] == 0.0


def test_masked_softmax_fully_hidden_row_raises():
    with pytest.raises(DegenerateInputError):
        T.masked_softmax(T.Tensor([[1.0, 2.0]]), np.array([[False, False]]))


def test_dropout_identity_and_scaling(rng):
    x = T.Tensor(np.ones((4, 4)))
    assert T.dropout(x, 0.0, rng) is x
    out = T.dropout(x, 0.5, np.random.default_rng(1))
    vals = np.unique(out.data)
    assert set(vals.tolist()) <= {0.0, 2.0}
    with pytest.raises(ArgumentError):
        T.dropout(x, 1.0, rng)


def test_finite_checks_flag():
    big = T.Tensor([3e38])
    with T.finite_checks():
        with pytest.raises(NumericError):
            T.add(big, big)
    # off by default: the same op silently overflows
    assert np.isinf(T.add(big, big).data).all()


# ---------------------------------------------------------------- graph mechanics


def test_backward_twice_raises():
    p = T.Parameter(np.array([1.0]), name="p")
    loss = T.tsum(T.mul(p, p))
    T.backward(loss)
    with pytest.raises(StateError):
        T.backward(loss)


def test_backward_requires_scalar_and_grad():
    p = T.Parameter(np.array([1.0, 2.0]), name="p")
    with pytest.raises(DimensionError):
        T.backward(T.mul(p, p))
    with T.no_grad():
        loss = T.tsum(T.mul(p, p))
    with pytest.raises(StateError):
        T.backward(loss)


def test_leaf_grads_accumulate_across_backward_calls():
    p = T.Parameter(np.array([3.0]), name="p")
    T.backward(T.tsum(T.mul(p, p)))
    first = p.grad.copy()
    T.backward(T.tsum(T.mul(p, p)))
    np.testing.assert_allclose(p.grad, 2 * first)


def test_frozen_parameter_leaves_graph():
    p = T.Parameter(np.array([2.0]), name="p")
    p.freeze()
    assert p.frozen
    out = T.mul(p, p)
    assert not out.requires_grad
    p.unfreeze()
    assert T.mul(p, p).requires_grad


# ---------------------------------------------------------------- gradient oracles


def test_grad_matmul_hand_value():
    a = T.Parameter(np.array([[1.0, 2.0]]), name="a")
    b = T.Parameter(np.array([[3.0], [4.0]]), name="b")
    out = T.matmul(a, b)
    T.backward(T.tsum(out))
    np.testing.assert_allclose(a.grad, [[3.0, 4.0]])
    np.testing.assert_allclose(b.grad, [[1.0], [2.0]])


def test_grad_check_composite_network(rng):
    with T.use_dtype(np.float64):
        w1, w2, g, b = params_of(
            rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), np.ones(4), np.zeros(4)
        )
        x = rng.normal(size=(2, 3))
        targets = np.array([0, 1])

        def f():
            h = T.gelu(T.matmul(T.Tensor(x), w1))
            h = T.layer_norm(h, g, b)
            return T.cross_entropy(T.matmul(h, w2), targets)

        worst = T.grad_check(f, [w1, w2, g, b])
    assert worst < 1e-7


def test_grad_check_masked_attention_pattern(rng):
    with T.use_dtype(np.float64):
        (q,) = params_of(rng.normal(size=(3, 4)))
        k = rng.normal(size=(3, 4))
        visible = np.tril(np.ones((3, 3), dtype=bool))

        def f():
            scores = T.matmul(q, T.Tensor(k.T))
            w = T.masked_softmax(scores, visible)
            return T.tsum(T.mul(w, w))

        assert T.grad_check(f, [q]) < 1e-7


def test_grad_check_rejects_float32():
    p = T.Parameter(np.zeros(2, dtype=np.float32), name="p")
    with pytest.raises(ArgumentError):
        T.grad_check(lambda: T.tsum(p), [p])


# ---------------------------------------------------------------- properties


@given(
    st.lists(st.floats(-30, 30), min_size=2, max_size=8),
    st.floats(-100, 100),
)
def test_softmax_shift_invariance(xs, shift):
    with T.use_dtype(np.float64):
        a = T.softmax(T.Tensor(np.array(xs))).data
        b = T.softmax(T.Tensor(np.array(xs) + shift)).data
    np.testing.assert_allclose(a, b, atol=1e-9)
    assert a.sum() == pytest.approx(1.0, abs=1e-9)


@given(
    st.lists(st.floats(-5, 5), min_size=2, max_size=8).filter(lambda v: max(v) - min(v) > 1e-3),
    st.floats(0.1, 10),
    st.floats(-5, 5),
)
def test_layer_norm_input_affine_invariance(xs, a, c):
    d = len(xs)
    gamma, beta = T.Tensor(np.ones(d)), T.Tensor(np.zeros(d))
    x = np.array(xs, dtype=np.float64)
    with T.use_dtype(np.float64):
        base = T.layer_norm(T.Tensor(x), gamma, beta).data
        moved = T.layer_norm(T.Tensor(a * x + c), gamma, beta).data
    np.testing.assert_allclose(base, moved, atol=1e-4)


@given(st.integers(2, 6), st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_sum_mean_consistency(rows, cols, seed):
    x = np.random.default_rng(seed).normal(size=(rows, cols))
    t = T.Tensor(x)
    assert T.tsum(t).item() == pytest.approx(x.sum(), rel=1e-5, abs=1e-5)
    assert T.tmean(t).item() == pytest.approx(x.mean(), rel=1e-5, abs=1e-5)


@given(st.integers(0, 2**32 - 1))
def test_transpose_reshape_grads_are_permutations(seed):
    rng = np.random.default_rng(seed)
    p = T.Parameter(rng.normal(size=(2, 3, 4)), name="p")
    weights = rng.normal(size=(4, 3, 2))
    out = T.transpose(p, (2, 1, 0))
    loss = T.tsum(T.mul(out, T.Tensor(weights.astype(out.dtype))))
    T.backward(loss)
    np.testing.assert_allclose(p.grad, weights.transpose(2, 1, 0), rtol=1e-5, atol=1e-6)
