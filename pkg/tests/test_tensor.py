import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vqblocks.tensor import (
    NumericError,
    Rng,
    ShapeError,
    Tensor,
    broadcast_to,
    concat,
    cross_entropy,
    cross_entropy_per_position,
    exp,
    gelu,
    grad_check,
    init_embedding,
    init_linear,
    layer_norm,
    matmul,
    no_grad,
    relu,
    softmax,
    take0,
    tanh,
)


def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = matmul(Tensor(np.eye(2)), Tensor(a))
    assert np.allclose(out.data, a)


def test_matmul_orthogonal_pick():
    out = matmul(Tensor(np.array([[1.0, 0.0]])), Tensor(np.array([[0.0], [5.0]])))
    assert np.allclose(out.data, [[0.0]])


def test_matmul_matches_triple_loop():
    rng = Rng(11)
    a, b = rng.normal((3, 3)), rng.normal((3, 3))
    want = np.zeros((3, 3))
    for i in range(3):
        for j in range(3):
            for k in range(3):
                want[i, j] += a[i, k] * b[k, j]
    got = matmul(Tensor(a), Tensor(b)).data
    assert np.allclose(got, want, atol=1e-12)


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_softmax_symmetry_and_stability():
    assert np.allclose(softmax(Tensor(np.array([0.0, 0.0]))).data, [0.5, 0.5])
    assert np.allclose(softmax(Tensor(np.array([1000.0, 1000.0]))).data, [0.5, 0.5])


def test_softmax_closed_form():
    out = softmax(Tensor(np.array([0.0, math.log(3.0)]))).data
    assert np.allclose(out, [0.25, 0.75], atol=1e-7)


def test_softmax_nan_rejected():
    with pytest.raises(NumericError):
        softmax(Tensor(np.array([0.0, np.nan])))


@settings(deadline=None, max_examples=40)
@given(st.lists(st.floats(-60, 60), min_size=2, max_size=8))
def test_softmax_rows_sum_to_one(vals):
    out = softmax(Tensor(np.array(vals, dtype=np.float64))).data
    assert abs(out.sum() - 1.0) < 1e-6
    assert (out >= 0).all() and (out <= 1).all()


def test_cross_entropy_closed_form():
    assert abs(float(cross_entropy(Tensor(np.zeros((1, 2))), [0]).data) - math.log(2)) < 1e-6


def test_cross_entropy_confident():
    assert float(cross_entropy(Tensor(np.array([[30.0, -30.0]])), [0]).data) < 1e-6


def test_cross_entropy_matches_scalar_loop():
    rng = Rng(5)
    logits = rng.normal((4, 5))
    targets = np.array([0, 3, 2, 4])
    total = 0.0
    for i in range(4):
        row = logits[i]
        denom = sum(math.exp(v) for v in row)
        total += -math.log(math.exp(row[targets[i]]) / denom)
    got = float(cross_entropy(Tensor(logits), targets).data)
    assert abs(got - total / 4) < 1e-9


def test_cross_entropy_target_out_of_range():
    with pytest.raises(IndexError):
        cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


def test_grad_check_quadratic():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    out = (x**2).sum()
    out.backward()
    assert np.allclose(x.grad, [2.0, 4.0])
    assert grad_check(lambda t: (t**2).sum(), x) < 1e-6


def test_grad_check_softmax_cross_entropy():
    rng = Rng(3)
    err = grad_check(lambda t: cross_entropy(t, np.array([1, 0, 2])), Tensor(rng.normal((3, 4))))
    assert err < 1e-4


def test_grad_check_constant_is_zero():
    x = Tensor(np.array([3.0, -1.0]), requires_grad=True)
    out = (x * 0.0).sum()
    out.backward()
    assert (x.grad == 0).all()
    assert grad_check(lambda t: (t * 0.0).sum(), x) == 0.0


CASES = {
    "add": lambda t, c: (t + Tensor(c)).sum(),
    "add_broadcast": lambda t, c: (t + Tensor(c[0])).sum(),
    "sub": lambda t, c: (Tensor(c) - t).mean(),
    "mul": lambda t, c: (t * Tensor(c)).sum(),
    "mul_scalar": lambda t, c: (t * 1.7).sum(),
    "pow": lambda t, c: ((t * t + 1.0) ** 1.5).sum(),
    "div": lambda t, c: (t / (Tensor(np.abs(c)) + 2.0)).sum(),
    "exp": lambda t, c: exp(t * 0.3).sum(),
    "tanh": lambda t, c: tanh(t).sum(),
    "gelu": lambda t, c: gelu(t).sum(),
    "relu": lambda t, c: relu(t + 0.05).sum(),
    "sum_axis": lambda t, c: t.sum(axis=1).mean(),
    "mean_keep": lambda t, c: (t.mean(axis=0, keepdims=True) * Tensor(c[:1])).sum(),
    "reshape": lambda t, c: (t.reshape(t.size) ** 2).sum(),
    "transpose": lambda t, c: (t.transpose(1, 0) * Tensor(c.T)).sum(),
    "concat": lambda t, c: concat([t, t * 2.0], axis=0).sum(),
    "getitem": lambda t, c: (t[1:, :2] ** 2).sum(),
    "take0": lambda t, c: take0(t, np.array([1, 0, 1])).sum(),
    "broadcast_to": lambda t, c: broadcast_to(t.reshape((3, 1, 4)), (3, 2, 4)).sum(),
    "matmul": lambda t, c: matmul(t, Tensor(c.T)).sum(),
    "softmax": lambda t, c: (softmax(t, axis=-1) * Tensor(c)).sum(),
    "layer_norm": lambda t, c: (layer_norm(t, Tensor(np.ones(4)), Tensor(np.zeros(4))) * Tensor(c)).sum(),
    "cross_entropy_vec": lambda t, c: (cross_entropy_per_position(t, np.array([0, 1, 3])) * Tensor(np.array([1.0, 0.5, 2.0]))).sum(),
}


@pytest.mark.parametrize("name", sorted(CASES))
def test_each_op_grad_checks_over_random_inputs(name):
    fn = CASES[name]
    worst = 0.0
    for i in range(10):
        rng = Rng(1000 + 17 * i)
        c = rng.normal((3, 4))
        x = Tensor(rng.normal((3, 4)))
        worst = max(worst, grad_check(lambda t: fn(t, c), x))
    assert worst < 1e-4, f"{name}: worst relative error {worst}"


def test_batched_matmul_grad():
    rng = Rng(21)
    w = rng.normal((4, 2))
    err = grad_check(lambda t: matmul(t, Tensor(w)).sum(), Tensor(rng.normal((2, 3, 4))))
    assert err < 1e-4
    err = grad_check(lambda t: matmul(t, t.transpose(0, 2, 1)).sum(), Tensor(rng.normal((2, 3, 4))))
    assert err < 1e-4


def test_init_determinism_bit_identical():
    a = init_linear(Rng(123), 16, (16, 8))
    b = init_linear(Rng(123), 16, (16, 8))
    assert a.data.tobytes() == b.data.tobytes()
    e1 = init_embedding(Rng(9), (10, 4))
    e2 = init_embedding(Rng(9), (10, 4))
    assert e1.data.tobytes() == e2.data.tobytes()


def test_rng_spawn_deterministic_and_independent():
    kids1 = [r.random(3) for r in Rng(7).spawn(3)]
    kids2 = [r.random(3) for r in Rng(7).spawn(3)]
    for a, b in zip(kids1, kids2):
        assert np.array_equal(a, b)
    assert not np.array_equal(kids1[0], kids1[1])


def test_no_grad_blocks_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = (x * 2.0).sum()
    assert y._backward_fn is None and not y.requires_grad


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        (x * 2.0).backward()


def test_take0_out_of_range():
    with pytest.raises(IndexError):
        take0(Tensor(np.zeros((2, 3))), np.array([2]))


def test_gradient_shape_matches_data():
    rng = Rng(2)
    x = Tensor(rng.normal((2, 5)), requires_grad=True)
    (softmax(x) * Tensor(rng.normal((2, 5)))).sum().backward()
    assert x.grad.shape == x.data.shape
