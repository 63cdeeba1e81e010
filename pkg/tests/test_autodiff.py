import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pimcancel import autodiff as ad
from pimcancel.autodiff import GraphError, ShapeError, Tensor


def leaf(a):
    return Tensor(a, requires_grad=True)


def test_add_values():
    assert np.array_equal(ad.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4.0, 6.0])


def test_matmul_identity():
    a = np.random.default_rng(0).normal(size=(3, 3))
    assert np.array_equal(ad.matmul(Tensor(np.eye(3)), Tensor(a)).data, a)


def test_sum_symmetric():
    assert ad.sum_(Tensor([0.5, -0.5])).data == 0.0


def test_shape_mismatch_names_op():
    with pytest.raises(ShapeError, match=r"add.*\[2\].*\[3\]"):
        ad.add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))
    with pytest.raises(ShapeError, match="matmul"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_scalar_broadcast_allowed():
    w = leaf([1.0, 2.0])
    s = leaf(3.0)
    ad.backward(ad.sum_(ad.mul(w, s)))
    assert np.array_equal(w.grad, [3.0, 3.0])
    assert s.grad == 3.0


def test_grad_of_sum_of_squares():
    w = leaf([1.0, 2.0, 3.0])
    ad.backward(ad.sum_(ad.mul(w, w)))
    assert np.array_equal(w.grad, [2.0, 4.0, 6.0])


def test_sigmoid_grad_at_zero():
    x = leaf([0.0])
    ad.backward(ad.sum_(ad.sigmoid(x)))
    assert x.grad[0] == 0.25


def test_non_scalar_loss_rejected():
    w = leaf([1.0, 2.0])
    with pytest.raises(GraphError, match="scalar"):
        ad.backward(ad.mul(w, w))


def test_double_backward_rejected():
    w = leaf([1.0, 2.0])
    loss = ad.sum_(ad.square(w))
    ad.backward(loss)
    with pytest.raises(GraphError, match="consumed"):
        ad.backward(loss)


def test_multiple_paths_accumulate():
    w = leaf([2.0])
    y = ad.add(ad.mul(w, w), ad.mul(w, 3.0))  # w^2 + 3w
    ad.backward(ad.sum_(y))
    assert w.grad[0] == 7.0


def test_grads_accumulate_across_backward_calls():
    w = leaf([1.0])
    ad.backward(ad.sum_(ad.mul(w, 2.0)))
    ad.backward(ad.sum_(ad.mul(w, 5.0)))
    assert w.grad[0] == 7.0


def test_finite_diff_quadratic_exact():
    rng = np.random.default_rng(1)
    err = ad.finite_diff_check(lambda x: ad.sum_(ad.square(x)), Tensor(rng.normal(size=(4, 3))))
    assert err < 1e-8


def test_crop_gradient_zero_outside():
    x = leaf(np.arange(10.0).reshape(1, 10))
    ad.backward(ad.sum_(ad.crop(x, 2, 7)))
    assert np.array_equal(x.grad[0], [0, 0, 1, 1, 1, 1, 1, 0, 0, 0])


def test_activation_values():
    assert np.array_equal(ad.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])
    assert ad.sigmoid(Tensor(0.0)).data == 0.5
    assert ad.leaky_relu(Tensor([-10.0]), 0.01).data[0] == pytest.approx(-0.1, abs=1e-15)
    assert ad.centered_sigmoid(Tensor(0.0)).data == 0.0


def _kink_free(rng, shape, margin=1e-3):
    x = rng.normal(size=shape)
    x[np.abs(x) < margin] += 2 * margin
    return x


OPS = {
    "add": (2, lambda a, b: ad.sum_(ad.mul(ad.add(a, b), ad.add(a, b)))),
    "sub": (2, lambda a, b: ad.sum_(ad.square(ad.sub(a, b)))),
    "mul": (2, lambda a, b: ad.sum_(ad.mul(a, b))),
    "neg": (1, lambda a: ad.sum_(ad.mul(ad.neg(a), a))),
    "mean": (1, lambda a: ad.mean(ad.square(a))),
    "relu": (1, lambda a: ad.sum_(ad.square(ad.relu(a)))),
    "leaky_relu": (1, lambda a: ad.sum_(ad.square(ad.leaky_relu(a, 0.1)))),
    "sigmoid": (1, lambda a: ad.sum_(ad.square(ad.sigmoid(a)))),
    "centered_sigmoid": (1, lambda a: ad.sum_(ad.square(ad.centered_sigmoid(a)))),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_elementwise_ops_finite_difference(name):
    arity, fn = OPS[name]
    rng = np.random.default_rng(sorted(OPS).index(name))
    for _ in range(20):
        shape = tuple(rng.integers(1, 9, size=rng.integers(1, 3)))
        pts = [Tensor(_kink_free(rng, shape)) for _ in range(arity)]
        assert ad.finite_diff_check(fn, pts) < 1e-4


def test_matmul_finite_difference():
    rng = np.random.default_rng(3)
    for _ in range(20):
        n, k, m = rng.integers(1, 9, size=3)
        a, b = Tensor(rng.normal(size=(n, k))), Tensor(rng.normal(size=(k, m)))
        assert ad.finite_diff_check(lambda p, q: ad.sum_(ad.square(ad.matmul(p, q))), [a, b]) < 1e-4


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31))
def test_backward_is_linear(ca, cb, seed):
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=5)

    def l1(x):
        return ad.sum_(ad.square(x))

    def l2(x):
        return ad.sum_(ad.sigmoid(x))

    grads = []
    for f in (l1, l2, lambda x: ad.add(ad.mul(l1(x), ca), ad.mul(l2(x), cb))):
        x = leaf(x0)
        ad.backward(f(x))
        grads.append(x.grad)
    np.testing.assert_allclose(grads[2], ca * grads[0] + cb * grads[1], rtol=0, atol=1e-12)


def test_deterministic_gradients():
    rng = np.random.default_rng(4)
    x0, w0 = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))

    def run():
        x, w = leaf(x0), leaf(w0)
        ad.backward(ad.sum_(ad.sigmoid(ad.matmul(x, w))))
        return x.grad.tobytes() + w.grad.tobytes()

    assert run() == run()


def test_tensor_invariants():
    t = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    assert t.data.flags.c_contiguous and t.data.dtype == np.float64
    assert t.grad.shape == t.shape and t.data.size == 6
    assert Tensor([1.0]).grad is None


def test_finite_diff_fourth_order_stencil():
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(size=5))

    def quartic(t):
        return ad.sum_(ad.square(ad.square(t)))

    # the 5-point formula is exact for polynomials up to degree 4
    assert ad.finite_diff_check(quartic, x, h=1e-2, stencil=4) < 1e-10
    assert ad.finite_diff_check(quartic, x, h=1e-2, stencil=2) > 1e-6
    with pytest.raises(ValueError):
        ad.finite_diff_check(quartic, x, stencil=3)
