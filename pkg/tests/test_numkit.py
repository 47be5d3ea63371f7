import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scmoelab import numkit
from scmoelab.numkit import NEG_INF, Rng, ShapeError


def test_rng_is_reproducible():
    a = Rng(7).normal((3, 4))
    b = Rng(7).normal((3, 4))
    np.testing.assert_array_equal(a, b)


def test_rng_spawn_streams_are_independent_and_stable():
    root = Rng(3)
    a1 = root.spawn(0).normal(5)
    a2 = Rng(3).spawn(0).normal(5)
    b = Rng(3).spawn(1).normal(5)
    np.testing.assert_array_equal(a1, a2)
    assert not np.array_equal(a1, b)


def test_as_matrix_rejects_non_2d():
    with pytest.raises(ShapeError):
        numkit.as_matrix(np.zeros(3))
    with pytest.raises(ShapeError):
        numkit.as_matrix(np.zeros((2, 2, 2)))


def test_matmul_shape_check():
    with pytest.raises(ShapeError):
        numkit.matmul(np.zeros((2, 3)), np.zeros((4, 2)))


def test_row_softmax_uniform():
    out = numkit.row_softmax(np.zeros((2, 4)))
    np.testing.assert_allclose(out, 0.25, atol=1e-15)


def test_row_softmax_masks_neg_inf_to_zero():
    row = np.array([[1.0, NEG_INF, 2.0]])
    out = numkit.row_softmax(row)
    assert out[0, 1] == 0.0
    np.testing.assert_allclose(out.sum(), 1.0, atol=1e-15)
    # surviving entries renormalize among themselves
    expected = np.exp([1.0, 2.0]) / np.exp([1.0, 2.0]).sum()
    np.testing.assert_allclose(out[0, [0, 2]], expected, atol=1e-15)


def test_row_softmax_all_masked_row_raises():
    with pytest.raises(ValueError):
        numkit.row_softmax(np.full((1, 3), NEG_INF))


def test_row_softmax_large_logits_stable():
    out = numkit.row_softmax(np.array([[1000.0, 1000.0, -1000.0]]))
    assert np.isfinite(out).all()
    np.testing.assert_allclose(out[0, :2], 0.5, atol=1e-15)


@given(st.floats(-80, 80))
def test_softplus_matches_reference(x):
    expected = np.logaddexp(0.0, x)
    assert abs(float(numkit.softplus(np.array(x))) - expected) < 1e-12


def test_softplus_linear_branch_no_overflow():
    assert float(numkit.softplus(np.array(1e4))) == 1e4


@given(st.floats(-700, 700))
def test_sigmoid_stable_and_bounded(x):
    v = float(numkit.sigmoid(np.array(x)))
    assert 0.0 <= v <= 1.0
    if abs(x) < 30:
        assert abs(v - 1.0 / (1.0 + np.exp(-x))) < 1e-14


def test_gelu_values():
    # gelu(0) = 0, gelu is odd around its erf core: x*Phi(x)
    assert float(numkit.gelu(np.array(0.0))) == 0.0
    x = np.array(1.3)
    from scipy.stats import norm
    np.testing.assert_allclose(float(numkit.gelu(x)), 1.3 * norm.cdf(1.3),
                               atol=1e-12)


@settings(max_examples=50)
@given(st.floats(-5, 5))
def test_gelu_grad_matches_finite_difference(x):
    eps = 1e-6
    fd = (numkit.gelu(np.array(x + eps)) - numkit.gelu(np.array(x - eps))) / (2 * eps)
    assert abs(float(numkit.gelu_grad(np.array(x))) - fd) < 1e-8


def test_assert_finite():
    numkit.assert_finite(np.ones((2, 2)))
    with pytest.raises(FloatingPointError):
        numkit.assert_finite(np.array([1.0, np.nan]))
