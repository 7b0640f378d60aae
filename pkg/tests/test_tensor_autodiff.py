"""Tape recording, backward traversal, and the finite-difference checker."""

import numpy as np
import pytest

from cascn import ops
from cascn.errors import ContractError, NumericalError
from cascn.tensor import (Tape, Tensor, backward, grad_check, scope,
                          set_debug_checks)


def test_sum_gradient_is_ones(rng):
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    with Tape() as tape:
        loss = x.sum()
    grads = backward(tape, loss)
    assert np.array_equal(grads[x], np.ones((3, 4)))


def test_sum_of_squares_gradient_is_2x(rng):
    x = Tensor(rng.normal(size=(5,)), requires_grad=True)
    with Tape() as tape:
        loss = (x * x).sum()
    grads = backward(tape, loss)
    assert np.allclose(grads[x], 2 * x.data, rtol=0, atol=0)


def test_fanout_gradients_accumulate(rng):
    x = Tensor(rng.normal(size=(4,)), requires_grad=True)
    with Tape() as tape:
        loss = (x + x).sum() + (x * 3.0).sum()
    grads = backward(tape, loss)
    assert np.allclose(grads[x], np.full(4, 5.0))


def test_non_scalar_loss_rejected(rng):
    x = Tensor(rng.normal(size=(4,)), requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ContractError):
        backward(tape, y)


def test_tape_nodes_in_execution_order(rng):
    x = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
    with Tape() as tape:
        y = (x * x).sum().exp()
    names = [n.op for n in tape.nodes]
    assert names == ["mul", "sum", "exp"]
    produced = set()
    for node in tape.nodes:
        for inp in node.inputs:
            assert inp is x or id(inp) in produced
        produced.add(id(node.output))


def test_no_recording_outside_tape(rng):
    x = Tensor(rng.normal(size=(3,)), requires_grad=True)
    y = x * 2.0
    assert not y.requires_grad


def test_constant_branch_gets_no_gradient(rng):
    x = Tensor(rng.normal(size=(3,)), requires_grad=True)
    c = Tensor(rng.normal(size=(3,)))
    with Tape() as tape:
        loss = (x * c).sum()
    grads = backward(tape, loss)
    assert c not in grads
    assert np.allclose(grads[x], c.data)


def test_gradient_unused_tensor_absent(rng):
    x = Tensor(rng.normal(size=(3,)), requires_grad=True)
    unused = Tensor(rng.normal(size=(3,)), requires_grad=True)
    with Tape() as tape:
        _ = unused * 1.0
        loss = x.sum()
    grads = backward(tape, loss)
    assert x in grads and unused not in grads


def test_ndarray_operand_is_treated_as_constant(rng):
    x = Tensor(rng.normal(size=(3,)), requires_grad=True)
    c = rng.normal(size=(3,))
    with Tape() as tape:
        loss = (x * c + c).sum()
    grads = backward(tape, loss)
    assert np.allclose(grads[x], c)


def test_mismatched_shapes_rejected(rng):
    with pytest.raises(ContractError):
        Tensor(np.zeros((2, 3))) + Tensor(np.zeros((3, 2)))


def test_clip_gradient_masks_outside_range():
    x = Tensor(np.array([-1.0, 0.2, 0.8, 2.0]), requires_grad=True)
    with Tape() as tape:
        loss = x.clip(0.0, 1.0).sum()
    grads = backward(tape, loss)
    assert grads[x].tolist() == [0.0, 1.0, 1.0, 0.0]


def test_division_gradients(rng):
    a = Tensor(rng.uniform(1.0, 2.0, size=(4,)), requires_grad=True)
    b = Tensor(rng.uniform(1.0, 2.0, size=(4,)), requires_grad=True)
    with Tape() as tape:
        loss = (a / b).sum()
    grads = backward(tape, loss)
    assert np.allclose(grads[a], 1.0 / b.data)
    assert np.allclose(grads[b], -a.data / b.data ** 2)


def test_grad_check_sum_of_squares(rng):
    x = Tensor(rng.normal(size=(6,)))
    assert grad_check(lambda t: (t * t).sum(), x) < 1e-8


def test_grad_check_conv_weights(rng):
    x = Tensor(rng.normal(size=(1, 2, 5, 5)))
    w = Tensor(rng.normal(size=(3, 2, 3, 3)))
    err = grad_check(lambda t: ops.conv2d(x, t, padding=1).sum(), w)
    assert err < 1e-6


def test_grad_check_sigmoid_chain(rng):
    x = Tensor(rng.normal(size=(4, 4)))
    err = grad_check(lambda t: ops.sigmoid(ops.sigmoid(t) * 2.0).sum(), x)
    assert err < 1e-6


def test_grad_check_sampled_coordinates(rng):
    x = Tensor(rng.normal(size=(10, 10)))
    err = grad_check(lambda t: (t * t).sum(), x, sample=20, seed=1)
    assert err < 1e-8


def test_debug_checks_name_the_scope():
    set_debug_checks(True)
    try:
        with scope("stage7"):
            with pytest.raises(NumericalError, match="stage7"):
                Tensor(np.array([-1.0])).log()
    finally:
        set_debug_checks(False)


def test_determinism_same_inputs_same_bits(rng):
    x = rng.normal(size=(2, 3, 8, 8))
    w = rng.normal(size=(4, 3, 3, 3))
    a = ops.conv2d(Tensor(x), Tensor(w), padding=1).data
    b = ops.conv2d(Tensor(x.copy()), Tensor(w.copy()), padding=1).data
    assert np.array_equal(a, b)
