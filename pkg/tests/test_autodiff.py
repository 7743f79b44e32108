import numpy as np
import pytest

from tmegraph import autodiff as ad
from tmegraph.autodiff import Tensor


def rng_for(i):
    return np.random.default_rng(1000 + i)


def leaf(rng, *shape, positive=False, away_from_zero=False):
    data = rng.normal(size=shape)
    if positive:
        data = np.abs(data) + 0.5
    if away_from_zero:
        data = data + 0.2 * np.sign(data) + (data == 0) * 0.3
    return Tensor(data, requires_grad=True)


def check(fn, inputs, instance):
    worst = ad.gradcheck(fn, inputs)
    assert worst < 1e-4, f"instance {instance}: relative error {worst:.3e}"


@pytest.mark.parametrize("i", range(10))
def test_gradcheck_add_mul_broadcast(i):
    rng = rng_for(i)
    a = leaf(rng, 3, 4)
    b = leaf(rng, 3, 1)
    c = leaf(rng, 4)
    check(lambda a, b, c: ad.tensor_sum(ad.mul(ad.add(a, b), c)), [a, b, c], i)


@pytest.mark.parametrize("i", range(10))
def test_gradcheck_matmul_shapes(i):
    rng = rng_for(i)
    a = leaf(rng, 3, 4)
    b = leaf(rng, 4, 2)
    v = leaf(rng, 3)
    w = leaf(rng, 2)
    check(lambda a, b: ad.tensor_sum(ad.matmul(a, b)), [a, b], i)
    check(lambda v, a: ad.tensor_sum(ad.matmul(v, a)), [v, a], i)
    check(lambda a, b, w: ad.tensor_sum(ad.matmul(ad.matmul(a, b), w)), [a, b, w], i)
    check(lambda v: ad.matmul(v, v), [v], i)


@pytest.mark.parametrize("i", range(10))
def test_gradcheck_unary_ops(i):
    rng = rng_for(i)
    x = leaf(rng, 5, 3, away_from_zero=True)
    p = leaf(rng, 6, positive=True)
    check(lambda x: ad.tensor_sum(ad.relu(x)), [x], i)
    check(lambda x: ad.tensor_sum(ad.tanh(x)), [x], i)
    check(lambda x: ad.tensor_sum(ad.sigmoid(x)), [x], i)
    check(lambda p: ad.tensor_sum(ad.log(p)), [p], i)
    check(lambda x: ad.tensor_sum(ad.exp(x)), [x], i)


@pytest.mark.parametrize("i", range(10))
def test_gradcheck_reductions_and_shape_ops(i):
    rng = rng_for(i)
    x = leaf(rng, 4, 3)
    y = leaf(rng, 2, 3)
    z = leaf(rng, 3)
    check(lambda x: ad.tensor_sum(ad.tensor_mean(x, axis=0)), [x], i)
    check(lambda x: ad.tensor_mean(x), [x], i)
    check(lambda x, y: ad.tensor_sum(ad.concat([x, y], axis=0)), [x, y], i)
    check(lambda x, z: ad.tensor_sum(ad.concat([x, ad.stack([z, z, z, z])], axis=1)), [x, z], i)
    check(lambda x: ad.tensor_sum(ad.softmax(ad.tensor_sum(x, axis=1)) * np.arange(4.0)), [x], i)


@pytest.mark.parametrize("i", range(10))
def test_gradcheck_column_max(i):
    rng = rng_for(i)
    # distinct entries per column so the max is locally smooth
    data = rng.permuted(np.arange(20.0).reshape(5, 4), axis=0) + rng.normal(scale=0.01, size=(5, 4))
    x = Tensor(data, requires_grad=True)
    check(lambda x: ad.tensor_sum(ad.column_max(x) * np.array([1.0, -2.0, 3.0, 0.5])), [x], i)


@pytest.mark.parametrize("i", range(10))
def test_gradcheck_edge_aggregate(i):
    rng = rng_for(i)
    n = 6
    x = leaf(rng, n, 3)
    edges = np.array([[0, 1], [0, 2], [1, 3], [2, 4], [3, 5], [1, 2]])
    w = Tensor(rng.uniform(0.2, 1.0, size=len(edges)), requires_grad=True)
    coef = rng.normal(size=(n, 3))
    check(lambda x, w: ad.tensor_sum(ad.edge_aggregate(x, edges, w) * coef), [x, w], i)


def test_edge_aggregate_hand_case():
    x = Tensor([[1.0, 10.0], [2.0, 20.0], [4.0, 40.0]])
    edges = np.array([[0, 1], [1, 2]])
    w = Tensor([0.5, 2.0])
    out = ad.edge_aggregate(x, edges, w)
    np.testing.assert_allclose(out.data, [[1.0, 10.0], [8.5, 85.0], [4.0, 40.0]])


def test_edge_aggregate_empty_edges():
    x = Tensor(np.ones((3, 2)), requires_grad=True)
    out = ad.edge_aggregate(x, np.zeros((0, 2), dtype=np.int64), Tensor(np.zeros(0)))
    assert np.array_equal(out.data, np.zeros((3, 2)))
    ad.tensor_sum(out).backward()
    assert np.array_equal(x.grad, np.zeros((3, 2)))


def test_tensor_reuse_accumulates_gradient():
    x = Tensor([3.0], requires_grad=True)
    y = ad.add(ad.mul(x, x), x)  # x^2 + x -> dy/dx = 2x + 1
    y.backward(np.ones(1))
    np.testing.assert_allclose(x.grad, [7.0])


def test_backward_accumulates_across_calls():
    x = Tensor([2.0], requires_grad=True)
    ad.mul(x, 3.0).backward(np.ones(1))
    ad.mul(x, 4.0).backward(np.ones(1))
    np.testing.assert_allclose(x.grad, [7.0])


def test_column_max_tie_goes_to_lowest_row():
    x = Tensor(np.array([[5.0, 1.0], [5.0, 2.0], [3.0, 2.0]]), requires_grad=True)
    ad.tensor_sum(ad.column_max(x)).backward()
    np.testing.assert_array_equal(x.grad, [[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])


def test_untracked_graph_is_pruned():
    a = Tensor([1.0, 2.0])
    b = Tensor([3.0, 4.0])
    out = ad.mul(a, b)
    assert not out.requires_grad
    assert out._parents == ()


def test_constants_are_absorbed():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = ad.tensor_sum((x * 2.0 + 1.0) / 4.0 - 0.5)
    y.backward()
    np.testing.assert_allclose(x.grad, [0.5, 0.5])


def test_backward_shape_mismatch_rejected():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ValueError):
        ad.tensor_sum(x, axis=0).backward(np.ones(3))


def test_finite_checks_flag():
    bad = np.array([1.0, np.inf])
    Tensor(bad)  # fine outside the guard
    with ad.finite_checks():
        with pytest.raises(FloatingPointError):
            Tensor(bad)
        with pytest.raises(FloatingPointError):
            ad.log(Tensor([0.0]))  # -inf intermediate is caught at creation
    Tensor(bad)  # flag restored on exit


def test_gradcheck_rejects_nonscalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        ad.gradcheck(lambda t: ad.mul(t, 2.0), [x])


def test_matmul_rejects_3d():
    with pytest.raises(ValueError):
        ad.matmul(Tensor(np.ones((2, 2, 2))), Tensor(np.ones((2, 2))))
