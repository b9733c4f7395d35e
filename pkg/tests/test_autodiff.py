import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hugat import autodiff as ad
from hugat.autodiff import AdamState, Tensor, adam_step, backward, gradient_check
from hugat.errors import NonFiniteValue, NotScalar, ShapeMismatch


def param(rng, *shape, low=-1.0, high=1.0, name=None):
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True, name=name)


def check(f, params, tol=1e-5):
    # the floor keeps exactly-zero gradients from comparing against round-off
    report = gradient_check(f, params, h=1e-5, tol=tol, floor=1e-5)
    assert report.passed, report.worst
    return report


UNARY = {
    "exp": ad.exp,
    "tanh": ad.tanh,
    "square": ad.square,
    "elu": ad.elu,
    "leaky_relu": ad.leaky_relu,
    "neg": lambda a: -a,
    "scale": lambda a: ad.scale(a, 2.5),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name, rng):
    a = param(rng, 3, 4)
    # keep leaky_relu / elu away from their kink
    a.data[np.abs(a.data) < 1e-2] = 0.3
    w = rng.normal(size=(3, 4))
    check(lambda: ad.sum(ad.mul(UNARY[name](a), w)), [a])


def test_log_and_sqrt_on_positive_inputs(rng):
    a = param(rng, 5, low=0.5, high=2.0)
    check(lambda: ad.sum(ad.add(ad.log(a), ad.sqrt(a))), [a])


def test_sqrt_derivative_at_zero_is_zero():
    a = Tensor(np.array([0.0, 4.0]), requires_grad=True)
    backward(ad.sum(ad.sqrt(a)))
    np.testing.assert_array_equal(a.grad, [0.0, 0.25])


def test_broadcasting_binary_ops(rng):
    a = param(rng, 3, 4)
    b = param(rng, 4)
    c = param(rng, 3, 1)
    w = rng.normal(size=(3, 4))
    check(lambda: ad.sum(ad.mul(ad.sub(ad.add(a, b), c), ad.mul(w, b))), [a, b, c])


def test_matmul_batched(rng):
    a = param(rng, 2, 3, 4)
    b = param(rng, 4, 5)
    check(lambda: ad.sum(ad.square(ad.matmul(a, b))), [a, b])


def test_shape_ops(rng):
    a = param(rng, 2, 3, 4)
    b = param(rng, 2, 3, 2)

    def f():
        t = ad.transpose(a, (2, 0, 1))
        r = ad.reshape(t, (4, 6))
        cat = ad.concat([ad.reshape(a, (2, 3, 4)), b], axis=2)
        return ad.add(ad.sum(ad.square(ad.getitem(r, (slice(1, 3), slice(None))))),
                      ad.mean(ad.mul(cat, cat)))

    check(f, [a, b])


def test_gather_rows_accumulates_duplicates(rng):
    a = param(rng, 4, 2)
    idx = [0, 2, 0, 3]
    check(lambda: ad.sum(ad.square(ad.gather_rows(a, idx))), [a])
    backward(ad.sum(ad.gather_rows(a, idx)))
    np.testing.assert_array_equal(a.grad[:, 0], [2, 0, 1, 1])


@pytest.mark.parametrize("axis", [0, 1])
def test_softmax_and_log_softmax(axis, rng):
    a = param(rng, 4, 5, low=-3, high=3)
    w = rng.normal(size=(4, 5))
    check(lambda: ad.sum(ad.mul(ad.softmax(a, axis=axis), w)), [a])
    check(lambda: ad.sum(ad.mul(ad.log_softmax(a, axis=axis), w)), [a])
    s = ad.softmax(a, axis=axis).data
    np.testing.assert_allclose(s.sum(axis=axis), 1.0, atol=1e-12)
    np.testing.assert_allclose(ad.log_softmax(a, axis=axis).data, np.log(s), atol=1e-12)


def test_masked_softmax(rng):
    a = param(rng, 3, 4)
    mask = np.array([[1, 0, 1, 0], [1, 1, 1, 1], [0, 0, 0, 1]], dtype=bool)
    s = ad.softmax(a, axis=1, mask=mask).data
    assert np.all(s[~mask] == 0)
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)
    with pytest.raises(ShapeMismatch):
        ad.softmax(a, axis=1, mask=np.zeros((3, 4), bool))


def composed_attention(src, dst, mask, slope):
    """Reference: broadcast add, leaky relu and masked softmax as separate ops."""
    K, n = src.shape
    e = ad.add(ad.reshape(src, (K, n, 1)), ad.reshape(dst, (K, 1, n)))
    return ad.softmax(ad.leaky_relu(e, slope), axis=-1, mask=mask)


def random_mask(rng, n, p=0.4):
    mask = rng.random((n, n)) < p
    np.fill_diagonal(mask, True)
    return mask


def test_fused_attention_matches_composition(rng):
    src, dst = param(rng, 3, 7, low=-2, high=2), param(rng, 3, 7, low=-2, high=2)
    mask = random_mask(rng, 7)
    w = rng.normal(size=(3, 7, 7))
    fused = ad.attention_softmax(src, dst, mask, 0.2)
    ref = composed_attention(src, dst, mask, 0.2)
    np.testing.assert_allclose(fused.data, ref.data, atol=1e-14)
    backward(ad.sum(ad.mul(fused, w)))
    g_fused = src.grad.copy(), dst.grad.copy()
    backward(ad.sum(ad.mul(ref, w)))
    np.testing.assert_allclose(g_fused[0], src.grad, atol=1e-12)
    np.testing.assert_allclose(g_fused[1], dst.grad, atol=1e-12)
    check(lambda: ad.sum(ad.mul(ad.attention_softmax(src, dst, mask, 0.2), w)), [src, dst])


def test_segment_attention_matches_dense(rng):
    n, K = 9, 2
    src, dst = param(rng, K, n, low=-2, high=2), param(rng, K, n, low=-2, high=2)
    h = param(rng, n, 3)
    mask = random_mask(rng, n, 0.3)
    rows, cols = np.nonzero(mask)
    indptr = np.concatenate([[0], np.cumsum(mask.sum(1))])
    alpha = ad.segment_attention(src, dst, rows, cols, indptr, 0.2)
    dense = ad.attention_softmax(src, dst, mask, 0.2)
    np.testing.assert_allclose(alpha.data, dense.data[:, rows, cols], atol=1e-14)
    agg = ad.segment_aggregate(alpha, h, rows, cols, indptr)
    np.testing.assert_allclose(agg.data, dense.data @ h.data, atol=1e-13)
    w = rng.normal(size=(K, n, 3))
    check(lambda: ad.sum(ad.mul(ad.segment_aggregate(
        ad.segment_attention(src, dst, rows, cols, indptr, 0.2), h, rows, cols, indptr), w)),
        [src, dst, h])


def test_attention_rejects_empty_rows(rng):
    mask = np.eye(3, dtype=bool)
    mask[1, 1] = False
    with pytest.raises(ShapeMismatch):
        ad.attention_softmax(np.zeros((1, 3)), np.zeros((1, 3)), mask)


def test_gradients_reset_between_calls(rng):
    a = param(rng, 3)
    backward(ad.sum(a))
    backward(ad.sum(a))
    np.testing.assert_array_equal(a.grad, np.ones(3))


def test_shared_subexpression_accumulates(rng):
    a = param(rng, 3)
    b = ad.mul(a, a)
    backward(ad.sum(ad.add(b, b)))
    np.testing.assert_allclose(a.grad, 4 * a.data)


def test_backward_needs_scalar(rng):
    with pytest.raises(NotScalar):
        backward(param(rng, 2) * 2.0)


def test_non_finite_values_raise():
    with pytest.raises(NonFiniteValue):
        ad.log(Tensor([0.0, 1.0], requires_grad=True))
    with pytest.raises(NonFiniteValue):
        ad.exp(Tensor([1000.0]))


def test_shape_errors():
    with pytest.raises(ShapeMismatch):
        ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4,))))
    with pytest.raises(ShapeMismatch):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_adam_matches_hand_computation():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    state = AdamState(lr=0.1)
    g1, g2 = np.array([0.5, -1.0]), np.array([0.2, 0.3])
    adam_step({"p": p}, {"p": g1}, state)
    # first step of bias-corrected Adam moves each coordinate by lr * sign(g)
    np.testing.assert_allclose(p.data, [1.0 - 0.1, -2.0 + 0.1], atol=1e-7)
    adam_step({"p": p}, {"p": g2}, state)
    m = 0.9 * (0.1 * g1) + 0.1 * g2
    v = 0.999 * (0.001 * g1 ** 2) + 0.001 * g2 ** 2
    step = 0.1 * (m / (1 - 0.9 ** 2)) / (np.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
    np.testing.assert_allclose(p.data, np.array([0.9, -1.9]) - step, atol=1e-12)


def test_adam_minimises_quadratic():
    p = Tensor(np.array([3.0, -4.0]), requires_grad=True)
    state = AdamState(lr=0.05)
    for _ in range(2000):
        loss = ad.sum(ad.square(p))
        backward(loss)
        adam_step({"p": p}, {"p": p.grad}, state)
    assert np.abs(p.data).max() < 1e-2


def test_gradient_check_detects_a_wrong_derivative(rng):
    a = param(rng, 4)

    def bad_square(x):
        return ad._result("bad", x.data ** 2, (x,), lambda g: (g * x.data,))  # off by 2

    report = gradient_check(lambda: ad.sum(bad_square(a)), [a])
    assert not report.passed
    assert report.max_rel_error > 0.3


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10 ** 6), n=st.integers(1, 6), K=st.integers(1, 3))
def test_attention_rows_sum_to_one(seed, n, K):
    rng = np.random.default_rng(seed)
    mask = random_mask(rng, n, rng.uniform(0, 1))
    alpha = ad.attention_softmax(rng.normal(size=(K, n)) * 5, rng.normal(size=(K, n)) * 5, mask)
    np.testing.assert_allclose(alpha.data.sum(-1), 1.0, atol=1e-12)
    assert np.all(alpha.data[:, ~mask] == 0)
    assert np.all(alpha.data >= 0)
