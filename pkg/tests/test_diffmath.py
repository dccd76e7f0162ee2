"""Unit and gradient tests for the tensor engine."""

import math

import numpy as np
import pytest

from splatdistill import diffmath as dm
from splatdistill.exceptions import DegenerateInputError, DimensionError

from fdcheck import check_grads, numeric_grad, rel_err


def test_affine_identity():
    x = dm.tensor([[1.0, 2.0]])
    w = dm.tensor([[1.0, 0.0], [0.0, 1.0]])
    b = dm.tensor([0.0, 0.0])
    out = dm.affine(x, w, b)
    np.testing.assert_allclose(out.data, [[1.0, 2.0]])


def test_affine_zero_input_passes_bias():
    x = dm.tensor([[0.0, 0.0]])
    w = dm.tensor([[3.0, -1.0], [2.0, 5.0]])
    b = dm.tensor([3.0, 4.0])
    np.testing.assert_allclose(dm.affine(x, w, b).data, [[3.0, 4.0]])


def test_affine_shape_mismatch():
    with pytest.raises(DimensionError):
        dm.affine(dm.tensor(np.zeros((2, 3))), dm.tensor(np.zeros((4, 2))),
                  dm.tensor(np.zeros(2)))


def test_affine_grad_wrt_w_matches_fd():
    rng = np.random.default_rng(1)
    x = dm.tensor(rng.normal(size=(3, 4)))
    w = dm.param(rng.normal(size=(4, 2)), name="w")
    b = dm.param(rng.normal(size=2), name="b")
    check_grads(lambda: dm.affine(x, w, b), [w, b])


def test_affine_sum_grad_is_column_broadcast_of_input_sums():
    rng = np.random.default_rng(2)
    x = dm.tensor(rng.normal(size=(5, 4)))
    w = dm.param(rng.normal(size=(4, 2)), name="w")
    with dm.Tape() as t:
        loss = dm.sum_all(dm.matmul(x, w))
    t.backward(loss)
    expect = np.repeat(x.data.sum(axis=0)[:, None], 2, axis=1)
    np.testing.assert_allclose(w.grad, expect, rtol=1e-5)
    num = numeric_grad(
        lambda: (x.data.astype(np.float64) @ w.data.astype(np.float64)).sum(), w
    )
    assert rel_err(w.grad, num) < 1e-3


def test_gelu_values():
    assert dm.gelu(dm.tensor([0.0])).data[0] == 0.0
    assert abs(dm.gelu(dm.tensor([10.0])).data[0] - 10.0) < 1e-3


def test_gelu_grad_at_half():
    x = dm.param(np.array([0.5]), name="x")
    with dm.Tape() as t:
        y = dm.sum_all(dm.gelu(x))
    t.backward(y)
    num = numeric_grad(lambda: float(dm.gelu(x).data.sum(dtype=np.float64)), x)
    assert rel_err(x.grad, num) < 1e-4


def test_softplus_sigmoid_normalize_values():
    assert abs(dm.softplus(dm.tensor([0.0])).data[0] - math.log(2.0)) < 1e-6
    assert dm.sigmoid(dm.tensor([0.0])).data[0] == pytest.approx(0.5)
    out = dm.l2_normalize(dm.tensor([[0.0, 0.0, 0.0, 2.0]]))
    np.testing.assert_allclose(out.data, [[0.0, 0.0, 0.0, 1.0]])


def test_softplus_stable_large_inputs():
    out = dm.softplus(dm.tensor([100.0, -100.0]))
    assert out.data[0] == pytest.approx(100.0)
    assert out.data[1] == pytest.approx(0.0, abs=1e-6)


def test_l2_normalize_rejects_near_zero():
    with pytest.raises(DegenerateInputError):
        dm.l2_normalize(dm.tensor([[0.0, 0.0, 0.0, 0.0]]))


@pytest.mark.parametrize("seed", range(8))
def test_elementwise_grads_random(seed):
    rng = np.random.default_rng(seed)
    a = dm.param(rng.normal(size=(3, 5)), name="a")
    b = dm.param(rng.normal(size=(3, 5)) + 3.0, name="b")

    def out():
        t1 = dm.mul(a, b)
        t2 = dm.div(a, b)
        t3 = dm.exp(dm.mul(a, 0.3))
        t4 = dm.sub(t1, t3)
        return dm.add(dm.add(t4, t2), dm.square(a))

    check_grads(out, [a, b])


@pytest.mark.parametrize("op", ["gelu", "softplus", "sigmoid", "absolute"])
def test_activation_grads_random(op):
    rng = np.random.default_rng(hash(op) % 2**31)
    x = dm.param(rng.normal(size=(4, 7)) + 0.2, name="x")
    f = getattr(dm, op)
    check_grads(lambda: f(x), [x])


def test_l2_normalize_grad():
    rng = np.random.default_rng(5)
    x = dm.param(rng.normal(size=(6, 4)) + 0.5, name="x")
    w = rng.normal(size=(6, 4))
    check_grads(lambda: dm.l2_normalize(x), [x], weights=w)


def test_concat_slice_reshape_grads():
    rng = np.random.default_rng(7)
    a = dm.param(rng.normal(size=(3, 2)), name="a")
    b = dm.param(rng.normal(size=(3, 4)), name="b")

    def out():
        cat = dm.concat([a, b], axis=-1)
        part = dm.slice_last(cat, 1, 5)
        return dm.square(dm.reshape(part, (12,)))

    check_grads(out, [a, b])


def test_chain_rule_matches_scalar_product_of_jacobians():
    # 3-op scalar chain: y = sigmoid(exp(0.5 * x))
    x = dm.param(np.array([0.3]), name="x")
    with dm.Tape() as t:
        u = dm.mul(x, 0.5)
        v = dm.exp(u)
        y = dm.sum_all(dm.sigmoid(v))
    t.backward(y)
    xv = 0.3
    v_ = math.exp(0.5 * xv)
    s = 1.0 / (1.0 + math.exp(-v_))
    expect = s * (1 - s) * v_ * 0.5
    assert rel_err(x.grad, np.array([expect])) < 1e-4


def test_backward_accumulates_shared_input_once_per_use():
    x = dm.param(np.array([2.0]), name="x")
    with dm.Tape() as t:
        y = dm.sum_all(dm.mul(x, x))  # d/dx x^2 = 2x
    t.backward(y)
    assert x.grad[0] == pytest.approx(4.0)


def test_no_recording_outside_tape():
    x = dm.param(np.array([1.0]))
    y = dm.mul(x, 3.0)
    assert y.requires_grad is False
    tape = dm.Tape()
    assert len(tape) == 0
