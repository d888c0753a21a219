import numpy as np
import pytest

from portionmtl.autodiff import OPS, Graph, GraphError, ShapeError, Tensor, grad_check


def test_matmul_and_sum_by_hand():
    g = Graph()
    a = g.leaf(Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True))
    b = g.leaf(Tensor([[1.0], [-1.0]], requires_grad=True))
    loss = g.sum(g.matmul(a, b))
    assert g.value(loss) == -2.0
    grads = g.backward(loss)
    np.testing.assert_array_equal(grads[a], [[1.0, -1.0], [1.0, -1.0]])
    np.testing.assert_array_equal(grads[b], [[4.0], [6.0]])


def test_leaf_grad_is_written_and_reused_leaf_accumulates():
    t = Tensor([3.0], requires_grad=True)
    g = Graph()
    x = g.leaf(t)
    assert g.leaf(t) == x
    loss = g.sum(g.mul(x, x))
    g.backward(loss)
    np.testing.assert_array_equal(t.grad, [6.0])


def test_unreached_leaf_gets_zero_grad():
    g = Graph()
    t = Tensor(np.ones(3), requires_grad=True)
    g.leaf(t)
    x = g.leaf(Tensor([2.0], requires_grad=True))
    g.backward(g.sum(x))
    np.testing.assert_array_equal(t.grad, np.zeros(3))


def test_detach_blocks_gradient():
    g = Graph()
    x = g.leaf(Tensor([1.0, 2.0], requires_grad=True))
    loss = g.sum(g.add(x, g.detach(g.square(x))))
    grads = g.backward(loss)
    np.testing.assert_array_equal(grads[x], [1.0, 1.0])


def test_no_implicit_broadcast_except_scalars():
    g = Graph()
    a = g.const(np.ones((2, 3)))
    with pytest.raises(ShapeError):
        g.add(a, g.const(np.ones(3)))
    out = g.mul(a, g.const(np.array(2.0)))
    np.testing.assert_array_equal(g.value(out), 2 * np.ones((2, 3)))


def test_backward_needs_scalar():
    g = Graph()
    x = g.leaf(Tensor(np.ones(3), requires_grad=True))
    with pytest.raises(GraphError):
        g.backward(g.square(x))


def test_unknown_node_and_op():
    g = Graph()
    with pytest.raises(GraphError):
        g.value(5)
    with pytest.raises(GraphError):
        g.op("softplus", g.const(1.0))


def test_logsumexp_is_stable_for_large_logits():
    g = Graph()
    x = g.leaf(Tensor([[1000.0, 1000.0]], requires_grad=True))
    out = g.logsumexp(x, axis=1)
    assert g.value(out)[0] == pytest.approx(1000.0 + np.log(2.0))
    grads = g.backward(g.sum(out))
    np.testing.assert_allclose(grads[x], [[0.5, 0.5]])


def test_var_is_biased():
    g = Graph()
    v = g.value(g.var(g.const(np.array([1.0, 2.0, 3.0, 4.0]))))
    assert v == 1.25


def test_conv2d_matches_direct_sum(rng):
    x = rng.standard_normal((2, 3, 5, 5))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    g = Graph()
    out = g.value(g.conv2d(g.const(x), g.const(w), g.const(b), padding=1))
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 5, 5))
    for i in range(5):
        for j in range(5):
            ref[:, :, i, j] = np.einsum("nchw,fchw->nf", xp[:, :, i:i + 3, j:j + 3], w) + b
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_conv2d_shape_errors():
    g = Graph()
    with pytest.raises(ShapeError):
        g.conv2d(g.const(np.ones((1, 2, 4, 4))), g.const(np.ones((3, 1, 3, 3))))
    with pytest.raises(ShapeError):
        g.conv2d(g.const(np.ones((1, 1, 2, 2))), g.const(np.ones((1, 1, 3, 3))))


def test_maxpool_routes_gradient_to_first_max():
    x = np.array([[[[1.0, 1.0], [0.0, -1.0]]]])
    g = Graph()
    xi = g.leaf(Tensor(x, requires_grad=True))
    grads = g.backward(g.sum(g.maxpool2d(xi, 2)))
    np.testing.assert_array_equal(grads[xi], [[[[1.0, 0.0], [0.0, 0.0]]]])


def test_maxpool_rejects_non_divisible():
    g = Graph()
    with pytest.raises(ShapeError):
        g.maxpool2d(g.const(np.ones((1, 1, 5, 4))), 2)


def test_replay_reproduces_values():
    g = Graph()
    x = g.leaf(Tensor(np.arange(4.0).reshape(2, 2), requires_grad=True))
    y = g.sum(g.exp(g.matmul(x, x)))
    vals, _ = g.replay()
    assert vals[y] == g.value(y)
    vals2, _ = g.replay({x: np.zeros((2, 2))})
    assert vals2[y] == 4.0


def test_grad_check_passes_and_detects_wrong_gradient(rng):
    g = Graph()
    x = g.leaf(Tensor(rng.standard_normal((3, 3)), requires_grad=True))
    loss = g.sum(g.mul(g.exp(x), g.const(rng.standard_normal((3, 3)))))
    res = grad_check(g, loss, x)
    assert res.passed and res.n_checked == 9
    bad = grad_check(g, loss, x, analytic=np.zeros((3, 3)))
    assert not bad.passed


def test_grad_check_flags_relu_kink():
    g = Graph()
    x = g.leaf(Tensor(np.array([1e-6, 1.0, -1.0]), requires_grad=True))
    loss = g.sum(g.relu(x))
    res = grad_check(g, loss, x, epsilon=1e-4)
    assert res.flagged == [0]
    assert res.passed


def test_grad_check_restores_leaf_and_validates_epsilon(rng):
    v = rng.standard_normal(4)
    g = Graph()
    x = g.leaf(Tensor(v.copy(), requires_grad=True))
    loss = g.sum(g.square(x))
    grad_check(g, loss, x)
    np.testing.assert_array_equal(g.value(x), v)
    with pytest.raises(ValueError):
        grad_check(g, loss, x, epsilon=0.5)


def test_every_op_registered_has_forward_and_backward():
    for kind, spec in OPS.items():
        assert callable(spec.forward) and callable(spec.backward), kind
