import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from jomold import tensorcore as tc
from jomold.errors import DimensionError, NumericError

import oracles

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def test_matmul_identity_and_hand_case():
    m = np.arange(12.0).reshape(3, 4)
    np.testing.assert_array_equal(tc.matmul(np.eye(3), m), m)
    assert tc.matmul([[1, 2]], [[3], [4]]).tolist() == [[11.0]]


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
    np.testing.assert_allclose(tc.matmul(a, b), oracles.matmul(a.tolist(), b.tolist()), rtol=0, atol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        tc.matmul(np.ones((2, 3)), np.ones((2, 3)))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_matmul_oracle_property(n, k, m, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(n, k)), rng.normal(size=(k, m))
    ref = np.array(oracles.matmul(a.tolist(), b.tolist()))
    np.testing.assert_allclose(tc.matmul(a, b), ref, rtol=1e-12, atol=1e-12)


def test_softmax_rows_examples():
    np.testing.assert_array_equal(tc.softmax_rows(np.array([[3.0], [-7.0]])), [[1.0], [1.0]])
    np.testing.assert_array_equal(tc.softmax_rows(np.zeros((1, 2))), [[0.5, 0.5]])
    out = tc.softmax_rows(np.array([[1000.0, 0.0]]), scale=1.0)
    assert np.all(np.isfinite(out))
    assert out[0, 0] == pytest.approx(1.0) and out[0, 1] == pytest.approx(0.0, abs=1e-300)


def test_softmax_rows_rejects_bad_input():
    with pytest.raises(NumericError):
        tc.softmax_rows(np.array([[np.nan, 0.0]]))
    with pytest.raises(ValueError):
        tc.softmax_rows(np.zeros((1, 2)), scale=0.0)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=finite),
       st.floats(0.1, 10))
def test_softmax_rows_sum_to_one(m, scale):
    out = tc.softmax_rows(m, scale)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)
    assert np.all((out > 0) | (m / scale - m.max(axis=1, keepdims=True) / scale < -700))
    assert np.all(out <= 1.0)
    for row_in, row_out in zip(m, out):
        np.testing.assert_allclose(row_out, oracles.softmax((row_in / scale).tolist()), atol=1e-12)


def test_sigmoid_examples():
    assert tc.sigmoid(np.array(0.0)) == 0.5
    x = np.linspace(-30, 30, 61)
    np.testing.assert_allclose(tc.sigmoid(x) + tc.sigmoid(-x), 1.0, atol=1e-15)
    assert tc.sigmoid(np.array([-100.0]))[0] > 0.0
    # documented underflow far below the clamp range
    assert tc.sigmoid(np.array([-800.0]))[0] == 0.0


@settings(max_examples=100, deadline=None)
@given(st.floats(-700, 700))
def test_sigmoid_matches_scalar_oracle(x):
    assert tc.sigmoid(np.array([x]))[0] == pytest.approx(oracles.sigmoid(x), rel=1e-14, abs=1e-300)


def test_bce_examples():
    assert tc.bce_elementwise(np.array(0.5), np.array(1.0)) == pytest.approx(math.log(2))
    assert tc.bce_elementwise(np.array(1 - 1e-7), np.array(1.0)) == pytest.approx(0.0, abs=1e-6)
    assert tc.bce_elementwise(np.array(0.9), np.array(0.0)) == pytest.approx(oracles.bce(0.9, 0))
    assert tc.bce_elementwise(np.array(0.9), np.array(0.0)) == pytest.approx(2.302585, abs=1e-6)


def test_bce_clamps_and_positive_only():
    assert np.isfinite(tc.bce_elementwise(np.array([0.0, 1.0]), np.array([1.0, 0.0]))).all()
    assert tc.bce_elementwise(np.array(0.3), np.array(0.0), positive_only=True) == 0.0
    with pytest.raises(DimensionError):
        tc.bce_elementwise(np.ones(2), np.ones(3))


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 1), st.sampled_from([0.0, 1.0]))
def test_bce_nonnegative_and_matches_oracle(p, y):
    loss = tc.bce_elementwise(np.array(p), np.array(y))
    assert loss >= 0
    assert loss == pytest.approx(oracles.bce(p, y), rel=1e-12, abs=1e-15)


def test_bce_grad_matches_finite_differences():
    rng = np.random.default_rng(1)
    p = rng.uniform(0.05, 0.95, size=8)
    y = (rng.random(8) < 0.5).astype(float)
    f = lambda x: float(tc.bce_elementwise(x, y).sum())  # noqa: E731
    assert tc.finite_diff_check(f, p, tc.bce_grad(p, y)) < 1e-6


def test_finite_diff_check_examples():
    assert tc.finite_diff_check(lambda x: float(x[0] ** 2), np.array([3.0]), np.array([6.0])) < 1e-6
    x = np.random.default_rng(2).normal(size=6)
    s = tc.sigmoid(x)
    f = lambda z: float(tc.sigmoid(z).sum())  # noqa: E731
    assert tc.finite_diff_check(f, x, s * (1 - s)) < 1e-6
    # a gradient scaled by two is caught
    err = tc.finite_diff_check(lambda z: float(z[0] ** 2), np.array([3.0]), np.array([12.0]))
    assert err == pytest.approx(0.5, abs=1e-6)


def test_finite_diff_check_non_finite_objective():
    with pytest.raises(NumericError):
        tc.finite_diff_check(lambda z: float("nan"), np.zeros(2), np.zeros(2))


@pytest.mark.parametrize("seed", range(20))
def test_attention_gradients(seed):
    rng = np.random.default_rng(seed)
    t, s, d = rng.integers(1, 5, size=3)
    q, k, v = rng.normal(size=(t, d)), rng.normal(size=(s, d)), rng.normal(size=(s, d))
    g = rng.normal(size=(t, d))
    _, w = tc.attention(q, k, v, float(d))
    gq, gk, gv = tc.attention_backward(q, k, v, w, float(d), g)
    for idx, grad in ((0, gq), (1, gk), (2, gv)):
        args = [q, k, v]
        shape = args[idx].shape

        def f(x, idx=idx, shape=shape):
            a = list(args)
            a[idx] = x.reshape(shape)
            return float((tc.attention(*a, float(d))[0] * g).sum())

        assert tc.finite_diff_check(f, args[idx], grad) < 1e-3


@pytest.mark.parametrize("seed", range(20))
def test_softmax_backward(seed):
    rng = np.random.default_rng(100 + seed)
    x, g = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    w = tc.softmax(x, axis=0)
    f = lambda z: float((tc.softmax(z.reshape(3, 4), axis=0) * g).sum())  # noqa: E731
    assert tc.finite_diff_check(f, x, tc.softmax_backward(w, g, axis=0)) < 1e-3


def test_rng_is_reproducible_and_split():
    a = tc.make_rng(42).random(5)
    np.testing.assert_array_equal(a, tc.make_rng(42).random(5))
    c1, c2 = tc.spawn_rngs(42, 2)
    assert not np.array_equal(c1.random(5), c2.random(5))
    np.testing.assert_array_equal(tc.spawn_rngs(42, 2)[1].random(3), tc.spawn_rngs(42, 2)[1].random(3))
    # pinned draw guards against silent algorithm changes
    assert isinstance(tc.make_rng(0).bit_generator, np.random.Philox)
    assert tc.make_rng(0).integers(0, 2**32, 3).tolist() == [582496169, 60417458, 4027530181]
