import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradcheck import check_inputs
from precipsr.tensor import (AxisError, DomainError, ShapeError, Tape, Tensor, add, backward, concat,
                             elementwise, matmul, mean, mul, no_grad, reduce, relu, sum_, window2d)


def test_elementwise_examples():
    assert elementwise("relu", Tensor([-1, 0, 2])).data.tolist() == [0, 0, 2]
    assert elementwise("sigmoid", Tensor([0.0])).data.tolist() == [0.5]
    np.testing.assert_allclose(elementwise("log1p", Tensor([0, math.e - 1])).data, [0, 1], atol=1e-7)
    np.testing.assert_allclose(elementwise("expm1", Tensor([0.0, 1.0])).data, [0, math.e - 1], rtol=1e-6)


def test_elementwise_errors():
    with pytest.raises(DomainError):
        elementwise("log1p", Tensor([-2.0]))
    with pytest.raises(ShapeError):
        elementwise("add", Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))
    with pytest.raises(ValueError):
        elementwise("nope", Tensor([1.0]))


def test_broadcast_add_keeps_a_shape():
    a = Tensor(np.ones((2, 3, 4)))
    b = Tensor(np.arange(4.0).reshape(1, 1, 4))
    assert add(a, b).shape == a.shape


@pytest.mark.parametrize(
    "kind,axes,expected",
    [
        ("mean", [0, 1], [[4.0]]),
        ("max", [0], [[5.0, 7.0]]),
        ("sum", [1], [[4.0], [12.0]]),
    ],
)
def test_reduce_examples(kind, axes, expected):
    x = Tensor([[1, 3], [5, 7]])
    assert reduce(kind, x, axes).data.tolist() == expected


def test_reduce_sum_of_ones():
    assert reduce("sum", Tensor(np.ones((2, 2))), [1]).data.tolist() == [[2], [2]]


def test_reduce_errors():
    x = Tensor(np.ones((2, 2)))
    with pytest.raises(AxisError):
        reduce("sum", x, [2])
    with pytest.raises(AxisError):
        reduce("sum", x, [0, 0])


def test_matmul_examples():
    assert matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11]]
    m = np.array([[2.0, -1.0], [0.5, 3.0]])
    np.testing.assert_array_equal(matmul(Tensor(np.eye(2)), Tensor(m)).data, m)
    assert matmul(Tensor([[1, 0], [0, 2]]), Tensor([[1, 1], [1, 1]])).data.tolist() == [[1, 1], [2, 2]]
    with pytest.raises(ShapeError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_concat_examples():
    assert concat([Tensor(np.ones((1, 2, 2, 3))), Tensor(np.ones((1, 2, 2, 1)))], axis=3).shape == (1, 2, 2, 4)
    t = Tensor(np.arange(6.0).reshape(2, 3))
    np.testing.assert_array_equal(concat([t], axis=0).data, t.data)
    assert concat([Tensor([[1], [2]]), Tensor([[3], [4]])], axis=1).data.tolist() == [[1, 3], [2, 4]]
    with pytest.raises(ShapeError):
        concat([Tensor(np.ones((2, 2))), Tensor(np.ones((3, 3)))], axis=1)


def test_backward_examples():
    w = Tensor([3.0], requires_grad=True)
    backward(sum_(mul(w, w)))
    assert w.grad.tolist() == [6.0]

    w = Tensor(np.ones(4), requires_grad=True)
    backward(mean(w))
    np.testing.assert_array_equal(w.grad, np.full(4, 0.25))


def test_backward_accumulates_and_rejects_nonscalar():
    w = Tensor([3.0], requires_grad=True)
    backward(sum_(mul(w, w)))
    backward(sum_(mul(w, w)))
    assert w.grad.tolist() == [12.0]
    with pytest.raises(ShapeError):
        backward(mul(Tensor(np.ones(2), requires_grad=True), Tensor(np.ones(2))))


def test_tape_records_in_order_and_matches_graph_walk():
    rng = np.random.default_rng(1)
    xa = rng.normal(size=(3, 4))
    wa = rng.normal(size=(4, 2))

    grads = []
    for use_tape in (True, False):
        x, w = Tensor(xa), Tensor(wa, requires_grad=True)
        with Tape() as tape:
            loss = mean(relu(matmul(x, w)))
        assert [n.op for n in tape.nodes] == ["matmul", "relu", "mean"]
        backward(loss, tape if use_tape else None)
        grads.append(w.grad.copy())
    np.testing.assert_array_equal(grads[0], grads[1])


def test_tape_inputs_precede_nodes():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        y = mul(add(x, x), x)
        sum_(y)
    produced = set()
    for node in tape.nodes:
        for t in node.inputs:
            assert t._node is None or id(t) in produced
        produced.add(id(node.output))


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape, no_grad():
        y = mul(x, x)
    assert len(tape) == 0 and not y.requires_grad


def test_three_layer_mlp_matches_finite_differences():
    rng = np.random.default_rng(0)
    arrays = [rng.normal(size=(5, 4)), rng.normal(size=(4, 6)), rng.normal(size=(6,)),
              rng.normal(size=(6, 3)), rng.normal(size=(3, 2))]

    def mlp(x, w1, b1, w2, w3):
        h = elementwise("sigmoid", add(matmul(x, w1), b1))
        h = elementwise("sigmoid", matmul(h, w2))
        return matmul(h, w3)

    assert check_inputs(mlp, arrays) < 1e-2


@pytest.mark.parametrize("kind", ["add", "sub", "mul"])
def test_binary_gradients_with_broadcast(kind):
    rng = np.random.default_rng(2)
    a = rng.normal(size=(2, 3, 4, 5))
    b = rng.normal(size=(1, 1, 4, 1))
    err = check_inputs(lambda x, y: elementwise(kind, x, y), [a, b])
    assert err < 1e-2


@pytest.mark.parametrize("kind", ["relu", "sigmoid", "log1p", "expm1"])
def test_unary_gradients(kind):
    rng = np.random.default_rng(3)
    a = rng.uniform(0.1, 1.5, size=(2, 3, 4, 4)) * rng.choice([-1, 1], size=(2, 3, 4, 4))
    if kind == "log1p":
        a = np.abs(a)
    assert check_inputs(lambda x: elementwise(kind, x), [a]) < 1e-2


@pytest.mark.parametrize("kind", ["sum", "mean", "max"])
@pytest.mark.parametrize("axes", [[1, 2], [3], [0, 1, 2, 3]])
def test_reduce_gradients(kind, axes):
    rng = np.random.default_rng(4)
    a = rng.normal(size=(2, 4, 5, 3))
    assert check_inputs(lambda x: reduce(kind, x, axes), [a]) < 1e-2


def test_matmul_concat_window_gradients():
    rng = np.random.default_rng(5)
    assert check_inputs(matmul, [rng.normal(size=(4, 3)), rng.normal(size=(3, 5))]) < 1e-2
    assert check_inputs(lambda a, b: concat([a, b], axis=3),
                        [rng.normal(size=(1, 2, 3, 2)), rng.normal(size=(1, 2, 3, 1))]) < 1e-2
    assert check_inputs(lambda a: window2d(a, -1, 2, 5, 3), [rng.normal(size=(2, 4, 6, 2))]) < 1e-2


def test_window_pads_and_crops():
    x = Tensor(np.arange(12.0).reshape(1, 3, 4, 1))
    out = window2d(x, -1, 1, 4, 2).data[0, ..., 0]
    np.testing.assert_array_equal(out, [[0, 0], [1, 2], [5, 6], [9, 10]])


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(1, 3), st.data())
def test_broadcast_gradient_recovers_operand_shape(n, h, w, c, data):
    b_shape = tuple(data.draw(st.sampled_from([1, s])) for s in (n, h, w, c))
    a = Tensor(np.ones((n, h, w, c)))
    b = Tensor(np.ones(b_shape), requires_grad=True)
    backward(sum_(mul(a, b)))
    assert b.grad.shape == b_shape
    np.testing.assert_allclose(b.grad.sum(), n * h * w * c)


def test_forward_is_bit_deterministic():
    rng = np.random.default_rng(9)
    xa, wa = rng.normal(size=(6, 5)), rng.normal(size=(5, 4))
    outs = [mean(relu(matmul(Tensor(xa), Tensor(wa)))).data.tobytes() for _ in range(2)]
    assert outs[0] == outs[1]


def test_nonfinite_results_are_rejected():
    with pytest.raises(FloatingPointError):
        elementwise("expm1", Tensor([100.0]))
