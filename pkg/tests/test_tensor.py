import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ghostpose import tensor as T
from ghostpose.gradcheck import grad_check, op_suite
from ghostpose.tensor import Tensor, no_grad


def loop_matmul(a, b):
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def test_matmul_matches_triple_loop(rng):
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
    np.testing.assert_allclose(T.matmul(a, b).data, loop_matmul(a, b), rtol=1e-13, atol=1e-13)


def test_batched_matmul_with_shared_weight_matches_loop(rng):
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))
    out = T.matmul(a, b).data
    for i in range(2):
        np.testing.assert_allclose(out[i], loop_matmul(a[i], b), rtol=1e-13, atol=1e-13)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(np.zeros((2, 3)), np.zeros((4, 5)))


def test_broadcast_gradient_is_reduced():
    a = Tensor(np.ones((3, 4)), requires_grad=True)
    b = Tensor(np.ones(4), requires_grad=True)
    (a * b).sum().backward()
    assert b.grad.shape == (4,)
    np.testing.assert_array_equal(b.grad, np.full(4, 3.0))


def test_second_backward_raises():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = (x * x).sum()
    y.backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])
    with pytest.raises(RuntimeError):
        y.backward()


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = (x * 3.0).sum()
    assert not y.requires_grad
    z = (x * 3.0).sum()
    assert z.requires_grad


def test_scalar_results_stay_zero_dimensional():
    x = Tensor(np.ones(5), requires_grad=True)
    m = x.mean()
    assert m.shape == ()
    m.backward()
    np.testing.assert_allclose(x.grad, np.full(5, 0.2))


def test_gradient_accumulates_across_uses():
    x = Tensor(np.array(3.0), requires_grad=True)
    (x * x + x).backward()
    assert x.grad == pytest.approx(7.0)


def test_advanced_index_gradient_accumulates_repeats():
    x = Tensor(np.arange(4.0), requires_grad=True)
    x[np.array([1, 1, 3])].sum().backward()
    np.testing.assert_array_equal(x.grad, [0.0, 2.0, 0.0, 1.0])


def test_conv2d_matches_direct_loop(rng):
    x = rng.normal(size=(1, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    out = T.conv2d(x, w, b, stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((1, 3, 3, 3))
    for o in range(3):
        for i in range(3):
            for j in range(3):
                ref[0, o, i, j] = (xp[0, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * w[o]).sum() + b[o]
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_layer_norm_matches_formula(rng):
    x, g, b = rng.normal(size=(4, 6)), rng.normal(size=6), rng.normal(size=6)
    mu = x.mean(-1, keepdims=True)
    var = x.var(-1, keepdims=True)
    np.testing.assert_allclose(T.layer_norm(x, g, b).data, (x - mu) / np.sqrt(var + 1e-5) * g + b, rtol=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_every_op_gradient(seed):
    errors = op_suite(seed)
    worst = max(errors, key=errors.get)
    assert errors[worst] < 1e-4, (worst, errors[worst])


def test_grad_check_detects_wrong_gradient():
    def bad_square(x):
        out = T._make(x.data**2, (x,), lambda g: (g * x.data,), "bad")
        return out.sum()

    assert grad_check(bad_square, [np.array([1.0, 2.0])]) > 0.1


finite = st.floats(-30, 30, allow_nan=False)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 5), elements=finite))
def test_softmax_is_a_distribution(x):
    p = T.softmax(x, axis=-1).data
    np.testing.assert_allclose(p.sum(-1), 1.0, rtol=1e-12)
    assert np.all(p >= 0)
    np.testing.assert_allclose(np.exp(T.log_softmax(x, axis=-1).data), p, rtol=1e-9, atol=1e-300)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (2, 6), elements=st.floats(-1e3, 1e3, allow_nan=False)), st.floats(-50, 50))
def test_softmax_shift_invariant(x, c):
    np.testing.assert_allclose(T.softmax(x + c).data, T.softmax(x).data, rtol=1e-9, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 3), elements=st.floats(-5, 5, allow_nan=False)))
def test_transpose_reshape_round_trip(x):
    t = Tensor(x, requires_grad=True)
    y = t.transpose(1, 0).reshape(12).reshape(3, 4).transpose(1, 0)
    np.testing.assert_array_equal(y.data, x)
    (y * 2.0).sum().backward()
    np.testing.assert_array_equal(t.grad, np.full_like(x, 2.0))
