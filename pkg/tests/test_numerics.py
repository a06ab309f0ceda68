import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pen4rec.numerics import (
    AdamState,
    ContractViolation,
    ModelParams,
    NumericalInstabilityError,
    Tape,
    adam_step,
    grad_check,
    ops,
)


def fd_grad(f, x, eps=1e-6):
    """Central differences of a scalar numpy function, entry by entry."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for j in range(flat.size):
        o = flat[j]
        flat[j] = o + eps
        up = f(x)
        flat[j] = o - eps
        down = f(x)
        flat[j] = o
        gflat[j] = (up - down) / (2 * eps)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b))))


def check_unary(op, x, weights):
    """Gradient of sum(weights * op(x)) against finite differences."""
    t = ops.Tensor(x.copy(), requires_grad=True)
    with Tape() as tape:
        loss = ops.sum(ops.mul(op(t), weights))
    tape.backward(loss)

    def f(arr):
        return float((op(ops.Tensor(arr)).data * weights).sum())

    return rel_err(tape.grad(t), fd_grad(f, x.copy()))


@pytest.fixture
def rng():
    return np.random.default_rng(7)


# ---------------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------------


def test_softmax_uniform():
    p = ops.softmax(ops.Tensor([0.0, 0.0, 0.0])).data
    np.testing.assert_allclose(p, [1 / 3] * 3, atol=1e-15)


def test_softmax_ln2():
    p = ops.softmax(ops.Tensor([0.0, math.log(2.0)])).data
    np.testing.assert_allclose(p, [1 / 3, 2 / 3], atol=1e-15)


def test_softmax_no_overflow():
    p = ops.softmax(ops.Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(p))
    assert p[0] == pytest.approx(1.0) and p[1] == pytest.approx(0.0, abs=1e-300)


def test_softmax_empty_rejected():
    with pytest.raises(ValueError):
        ops.softmax(ops.Tensor(np.zeros(0)))


def test_softmax_mask_gives_exact_zero():
    p = ops.softmax(ops.Tensor([3.0, 1.0, 2.0]), mask=np.array([1, 0, 1])).data
    assert p[1] == 0.0
    assert abs(p.sum() - 1.0) <= 1e-12


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(-50, 50), min_size=1, max_size=12),
    st.floats(-100, 100),
)
def test_softmax_shift_invariance_and_normalisation(logits, shift):
    x = np.array(logits)
    p = ops.softmax(ops.Tensor(x)).data
    q = ops.softmax(ops.Tensor(x + shift)).data
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) <= 1e-12
    assert np.max(np.abs(p - q)) <= 1e-12


# ---------------------------------------------------------------------------
# primitive gradients on random 3x4 inputs
# ---------------------------------------------------------------------------


def test_grad_sigmoid(rng):
    x, w = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    assert check_unary(ops.sigmoid, x, w) <= 1e-6


def test_grad_tanh(rng):
    x, w = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    assert check_unary(ops.tanh, x, w) <= 1e-6


def test_grad_softmax(rng):
    x, w = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    assert check_unary(lambda t: ops.softmax(t, axis=-1), x, w) <= 1e-6
    assert check_unary(lambda t: ops.softmax(t, axis=0), x, w) <= 1e-6


def test_grad_log(rng):
    x, w = rng.uniform(0.5, 2.0, size=(3, 4)), rng.normal(size=(3, 4))
    assert check_unary(ops.log, x, w) <= 1e-6


def test_grad_slicing(rng):
    x, w = rng.normal(size=(3, 4)), rng.normal(size=(2, 2))
    assert check_unary(lambda t: t[1:, ::2], x, w) <= 1e-6


def test_grad_binary_ops(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    w = rng.normal(size=(3, 4))
    for op in (ops.add, ops.sub, ops.mul):
        assert check_unary(lambda t: op(t, b), a, w) <= 1e-6
        assert check_unary(lambda t: op(a, t), b, w) <= 1e-6


def test_grad_broadcast_add(rng):
    a, bias = rng.normal(size=(3, 4)), rng.normal(size=(4,))
    w = rng.normal(size=(3, 4))
    assert check_unary(lambda t: ops.add(a, t), bias, w) <= 1e-6


def test_grad_matmul(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 5))
    w = rng.normal(size=(3, 5))
    assert check_unary(lambda t: ops.matmul(t, b), a, w) <= 1e-6
    assert check_unary(lambda t: ops.matmul(a, t), b, w) <= 1e-6


def test_grad_linear(rng):
    x, W, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(5, 4)), rng.normal(size=5)
    w = rng.normal(size=(2, 3, 5))
    assert check_unary(lambda t: ops.linear(t, W, b), x, w) <= 1e-6
    assert check_unary(lambda t: ops.linear(x, t, b), W, w) <= 1e-6
    assert check_unary(lambda t: ops.linear(x, W, t), b, w) <= 1e-6


def test_grad_concat(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 2))
    w = rng.normal(size=(3, 6))
    assert check_unary(lambda t: ops.concat([t, b], axis=1), a, w) <= 1e-6
    assert check_unary(lambda t: ops.concat([a, t], axis=1), b, w) <= 1e-6


def test_grad_gathers(rng):
    table = rng.normal(size=(3, 4))
    idx = np.array([[0, 2, 2], [1, 1, 0]])
    w = rng.normal(size=(2, 3, 4))
    assert check_unary(lambda t: ops.take_rows(t, idx), table, w) <= 1e-6
    batch = rng.normal(size=(2, 3, 4))
    assert check_unary(lambda t: ops.gather_batch(t, idx), batch, w) <= 1e-6


def test_grad_two_layer_composition(rng):
    x = rng.normal(size=(3, 4))
    W1, b1 = rng.normal(size=(5, 4)), rng.normal(size=5)
    W2 = rng.normal(size=(2, 5))

    def net(t):
        h = ops.tanh(ops.linear(t, W1, b1))
        return ops.softmax(ops.linear(ops.sigmoid(h), W2), axis=-1)

    assert check_unary(net, x, rng.normal(size=(3, 2))) <= 1e-6


@pytest.mark.parametrize("reverse", [False, True])
def test_grad_gru_sequence(rng, reverse):
    B, L, d = 2, 4, 3
    X = rng.normal(size=(B, L, 3 * d))
    U = rng.normal(size=(3 * d, d)) * 0.5
    G = rng.uniform(size=(B, L))
    w = rng.normal(size=(B, L, d))
    assert check_unary(lambda t: ops.gru_sequence(t, U, G, reverse), X, w) <= 1e-6
    assert check_unary(lambda t: ops.gru_sequence(X, t, G, reverse), U, w) <= 1e-6
    assert check_unary(lambda t: ops.gru_sequence(X, U, t, reverse), G, w) <= 1e-6


def test_gru_sequence_matches_stepwise_reference(rng):
    d, L = 3, 5
    W, U, b = rng.normal(size=(3 * d, 2)), rng.normal(size=(3 * d, d)), rng.normal(size=3 * d)
    x = rng.normal(size=(1, L, 2))
    H = ops.gru_sequence(ops.linear(x, W, b), U, np.ones((1, L))).data
    h = np.zeros((1, d))
    for t in range(L):
        h = ops.gru_cell_reference(x[:, t], h, W, U, b)
        np.testing.assert_allclose(H[:, t], h, atol=1e-14)


# ---------------------------------------------------------------------------
# grad_check
# ---------------------------------------------------------------------------


def test_grad_check_quadratic():
    params = ModelParams({"x": np.array([3.0])})
    err = grad_check(lambda: ops.mul(params["x"], params["x"]), params, eps=1e-5)
    assert err < 1e-9


def test_grad_check_sigmoid_sum():
    params = ModelParams({"x": np.zeros(5)})
    err = grad_check(lambda: ops.sum(ops.sigmoid(params["x"])), params, eps=1e-5)
    assert err < 1e-8


def test_grad_check_detects_wrong_gradient():
    params = ModelParams({"x": np.array([1.5])})

    def broken():
        # value x^2, but the recorded vjp claims derivative 1
        x = params["x"]
        return ops._emit(x.data**2, (x,), lambda g: (g,))

    assert grad_check(broken, params) > 0.1


def test_grad_check_reports_instability():
    params = ModelParams({"x": np.array([0.0])})

    def blowup():
        x = params["x"]
        if x.data[0] != 0.0:
            return ops.Tensor(np.inf)
        return ops.mul(x, x)

    with pytest.raises(NumericalInstabilityError, match=r"x\[0\]"):
        grad_check(blowup, params)


def test_grad_check_eps_range():
    params = ModelParams({"x": np.array([1.0])})
    with pytest.raises(ValueError):
        grad_check(lambda: params["x"], params, eps=1e-2)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


def test_adam_first_step_moves_by_lr():
    params = ModelParams({"w": np.full((2, 3), 0.5)})
    params["w"].grad[...] = 1.0
    state = adam_step(params, AdamState(), lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
    assert state.t == 1
    np.testing.assert_allclose(params["w"].data, 0.5 - 0.1 / (1 + 1e-8), rtol=0, atol=1e-15)
    assert np.all(params["w"].grad == 1.0)


def test_adam_zero_gradient():
    params = ModelParams({"w": np.arange(4.0)})
    state = adam_step(params, AdamState())
    np.testing.assert_array_equal(params["w"].data, np.arange(4.0))
    assert state.t == 1
    adam_step(params, state)
    assert state.t == 2
    assert np.all(state.v["w"] >= 0)


def test_adam_deterministic():
    results = []
    for _ in range(2):
        params = ModelParams({"w": np.linspace(-1, 1, 6)})
        state = AdamState()
        for k in range(5):
            params["w"].grad[...] = np.sin(np.arange(6) + k)
            adam_step(params, state, lr=0.01)
        results.append(params["w"].data.copy())
    assert results[0].tobytes() == results[1].tobytes()


def test_adam_shape_mismatch():
    params = ModelParams({"w": np.zeros(3)})
    params["w"].grad = np.zeros(4)
    with pytest.raises(ContractViolation):
        adam_step(params, AdamState())


def test_tape_grad_isolated_between_tapes():
    params = ModelParams({"x": np.array([2.0])})
    with Tape() as t1:
        l1 = ops.mul(params["x"], 3.0)
    with Tape() as t2:
        l2 = ops.mul(params["x"], params["x"])
    t1.backward(l1)
    t2.backward(l2)
    assert t1.grad(params["x"])[0] == 3.0
    assert t2.grad(params["x"])[0] == 4.0
