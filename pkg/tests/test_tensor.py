import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from abg import tensor as T
from abg.errors import NonFiniteError, NonFiniteEvaluation, NotScalar, ShapeMismatch
from abg.tensor import Tensor

finite = st.floats(-5, 5, allow_nan=False, width=64)


def leaf(a):
    return Tensor(np.asarray(a, dtype=float), requires_grad=True)


def test_square_sum_gradient():
    x = leaf([1.0, -2.0, 3.0])
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0, -4.0, 6.0])


def test_constant_loss_gives_zero_gradient():
    x = leaf([1.0, 2.0])
    loss = x.sum() * 0.0 + 3.0
    loss.backward()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])


def test_backward_accumulates_without_reset():
    x = leaf([1.0, 2.0])
    (x * 3.0).sum().backward()
    (x * 3.0).sum().backward()
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])
    x.zero_grad()
    assert x.grad is None


def test_backward_needs_scalar():
    x = leaf([1.0, 2.0])
    with pytest.raises(NotScalar):
        (x * 2.0).backward()


def test_vector_seed_is_a_vjp():
    x = leaf([1.0, 2.0])
    T.backward(x * x, seed=np.array([1.0, 10.0]))
    np.testing.assert_array_equal(x.grad, [2.0, 40.0])


def test_item_requires_single_value():
    with pytest.raises(NotScalar):
        Tensor([1.0, 2.0]).item()
    assert Tensor([[4.5]]).item() == 4.5


def test_nonfinite_values_are_rejected():
    with pytest.raises(NonFiniteError):
        T.log(Tensor([0.0]))
    with pytest.raises(NonFiniteError):
        Tensor([np.nan])


def test_matmul_shape_check():
    with pytest.raises(ShapeMismatch):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_shared_subexpression_gradient():
    # y = x*x used twice: d/dx (y + 2y) = 6x
    x = leaf([0.5, -1.5])
    y = x * x
    (y + 2.0 * y).sum().backward()
    np.testing.assert_allclose(x.grad, 6 * x.data, rtol=0, atol=1e-15)


def test_three_layer_composite_matches_finite_differences(rng):
    x = rng.normal(size=(4, 3))
    w1, w2, w3 = rng.normal(size=(3, 5)), rng.normal(size=(5, 4)), rng.normal(size=(4, 1))

    def loss(x_, w1_):
        h = T.sigmoid(T.tanh(x_ @ w1_) @ Tensor(w2))
        return (h @ Tensor(w3)).sum()

    xt, w1t = leaf(x), leaf(w1)
    loss(xt, w1t).backward()
    fd_w = T.finite_difference_gradient(lambda a: loss(Tensor(x), Tensor(a)).item(), w1)
    fd_x = T.finite_difference_gradient(lambda a: loss(Tensor(a), Tensor(w1)).item(), x)
    assert T.relative_error(w1t.grad, fd_w) < 1e-5
    assert T.relative_error(xt.grad, fd_x) < 1e-5


def test_finite_difference_of_square():
    g = T.finite_difference_gradient(lambda a: float(a[0] ** 2), np.array([3.0]), h=1e-5)
    assert abs(g.data[0] - 6.0) < 1e-6


def test_finite_difference_of_constant():
    g = T.finite_difference_gradient(lambda a: 7.0, np.zeros(4))
    np.testing.assert_array_equal(g.data, np.zeros(4))


def test_finite_difference_reports_nonfinite():
    with pytest.raises(NonFiniteEvaluation), np.errstate(invalid="ignore", divide="ignore"):
        T.finite_difference_gradient(lambda a: float(np.log(a[0])), np.array([0.0]))
    with pytest.raises(ValueError):
        T.finite_difference_gradient(lambda a: 0.0, np.zeros(1), h=0.0)


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad
    y2 = x * 2.0
    assert y2.requires_grad


def test_detach_blocks_gradient():
    x = leaf([2.0])
    (T.detach(x) * x).sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0])


def test_reverse_gradient_is_identity_forward_and_flips_backward():
    x = leaf([1.0, -2.0])
    y = T.reverse_gradient(x, 0.5)
    np.testing.assert_array_equal(y.data, x.data)
    (y * 3.0).sum().backward()
    np.testing.assert_array_equal(x.grad, [-1.5, -1.5])


def test_reverse_gradient_scale_zero_blocks():
    x = leaf([1.0])
    T.reverse_gradient(x, 0.0).sum().backward()
    assert np.all(x.grad == 0.0)


def test_getitem_repeated_index_accumulates():
    x = leaf([1.0, 2.0, 3.0])
    x[[0, 0, 2]].sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0, 0.0, 1.0])


def test_clamp_passes_gradient_inside_only():
    x = leaf([-1.0, 0.5, 2.0])
    T.clamp(x, 0.0, 1.0).sum().backward()
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


def test_pairwise_absdiff_affine_matches_loop(rng):
    vs, vt = rng.normal(size=(3, 4)), rng.normal(size=(5, 4))
    w, b = rng.normal(size=(4, 2)), rng.normal(size=2)
    out = T.pairwise_absdiff_affine(vs, vt, w, b, chunk=2).data
    for i in range(3):
        for j in range(5):
            np.testing.assert_allclose(out[i * 5 + j], np.abs(vs[i] - vt[j]) @ w + b, rtol=0, atol=1e-12)


@given(st.integers(1, 4))
def test_pairwise_chunking_does_not_change_values_or_grads(chunk):
    rng = np.random.default_rng(chunk)
    ins = [leaf(rng.normal(size=s)) for s in [(4, 3), (2, 3), (3, 2), (2,)]]
    ref = [leaf(t.data.copy()) for t in ins]
    wt = rng.normal(size=(8, 2))
    T.backward(T.pairwise_absdiff_affine(*ins, chunk=chunk), seed=wt)
    T.backward(T.pairwise_absdiff_affine(*ref, chunk=4), seed=wt)
    for a, b in zip(ins, ref):
        np.testing.assert_allclose(a.grad, b.grad, rtol=1e-12, atol=1e-12)


@given(arrays(np.float64, (3, 4), elements=finite))
def test_softmax_rows_are_simplex(a):
    p = T.softmax(Tensor(a), axis=1).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=0, atol=1e-12)


@given(arrays(np.float64, (2, 5, 3), elements=finite), st.randoms(use_true_random=False))
def test_order_free_mean_is_bit_invariant_to_permutation(a, r):
    perm = list(range(5))
    r.shuffle(perm)
    m1 = T.order_free_mean(Tensor(a), 1).data
    m2 = T.order_free_mean(Tensor(a[:, perm]), 1).data
    assert np.array_equal(m1, m2)
    np.testing.assert_allclose(m1, a.mean(axis=1), rtol=0, atol=1e-12)


@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (4,), elements=finite))
def test_broadcast_add_gradient_sums_over_rows(a, b):
    x, y = leaf(a), leaf(b)
    (x + y).sum().backward()
    np.testing.assert_array_equal(y.grad, np.full(4, 3.0))
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_relative_error_floor():
    assert T.relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert T.relative_error([1.0, 0.0], [1.0, 1e-9]) == pytest.approx(1e-9)
