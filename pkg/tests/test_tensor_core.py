import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from ctxnorm.errors import DomainError, ShapeError
from ctxnorm.tensor_core import (as_tensor, channel_moments, channel_vectors, elementwise_affine,
                                 flatten_spatial, from_channel_vectors, to_ncl,
                                 weighted_channel_moments)

finite = st.floats(-1e3, 1e3, allow_nan=False)


def test_flatten_shape():
    assert flatten_spatial(np.zeros((2, 3, 4, 5))).shape == (2, 3, 20)


def test_flatten_single_element():
    out = flatten_spatial(np.full((1, 1, 1, 1), 7.0))
    assert out.shape == (1, 1, 1) and out[0, 0, 0] == 7.0


def test_flatten_matches_loop_enumeration(rng):
    x = rng.normal(size=(2, 2, 2, 2))
    out = flatten_spatial(x)
    for n in range(2):
        for c in range(2):
            seq = [x[n, c, h, w] for h in range(2) for w in range(2)]
            assert out[n, c].tolist() == seq


def test_flatten_round_trip_is_exact(rng):
    x = rng.normal(size=(3, 2, 4, 5))
    assert np.array_equal(flatten_spatial(x).reshape(x.shape), x)


def test_flatten_rejects_other_ranks():
    with pytest.raises(ShapeError):
        flatten_spatial(np.zeros((2, 3, 4)))


def test_to_ncl_layouts():
    assert to_ncl(np.zeros((4, 3))).shape == (4, 3, 1)
    assert to_ncl(np.zeros((4, 3, 6))).shape == (4, 3, 6)
    with pytest.raises(ShapeError):
        to_ncl(np.zeros(5))


def test_as_tensor_rejects_nan_and_empty():
    with pytest.raises(DomainError):
        as_tensor([[1.0, np.nan]])
    with pytest.raises(ShapeError):
        as_tensor(np.zeros((0, 3)))


def test_channel_vectors_round_trip(rng):
    x = rng.normal(size=(3, 4, 5))
    rows = channel_vectors(x)
    assert rows.shape == (15, 4)
    assert np.array_equal(rows[1 * 5 + 2], x[1, :, 2])
    assert np.array_equal(from_channel_vectors(rows, x.shape), x)


def test_constant_moments():
    m = channel_moments(np.full((2, 3, 4), 5.0))
    assert np.all(m.mean == 5.0) and np.all(m.var == 0.0) and m.count == 8


def test_moments_hand_values():
    m = channel_moments(np.array([1.0, 2.0, 3.0]).reshape(3, 1))
    assert m.mean[0] == pytest.approx(2.0, abs=1e-15)
    assert m.var[0] == pytest.approx(2 / 3, abs=1e-15)


def test_moments_permutation_invariant(rng):
    x = rng.normal(size=(6, 3, 4))
    rows = channel_vectors(x)
    perm = from_channel_vectors(rows[rng.permutation(24)], (24, 3, 1))
    a, b = channel_moments(x), channel_moments(perm)
    np.testing.assert_allclose(a.mean, b.mean, atol=1e-12)
    np.testing.assert_allclose(a.var, b.var, atol=1e-12)


def test_weighted_uniform_equals_unweighted(rng):
    x = rng.normal(size=(4, 3, 5))
    w = np.full((4, 5), 1 / 20)
    a, b = weighted_channel_moments(x, w), channel_moments(x)
    np.testing.assert_allclose(a.mean, b.mean, atol=1e-12, rtol=0)
    np.testing.assert_allclose(a.var, b.var, atol=1e-12, rtol=0)


def test_weighted_point_mass(rng):
    x = rng.normal(size=(3, 2, 1))
    w = np.zeros((3, 1))
    w[1, 0] = 1.0
    m = weighted_channel_moments(x, w)
    np.testing.assert_array_equal(m.mean, x[1, :, 0])
    np.testing.assert_allclose(m.var, 0.0, atol=1e-15)


def test_weighted_hand_values():
    m = weighted_channel_moments(np.array([[0.0], [4.0]]), np.array([0.25, 0.75]))
    assert m.mean[0] == pytest.approx(3.0) and m.var[0] == pytest.approx(3.0)


def test_weighted_rejects_bad_weights():
    x = np.zeros((2, 1))
    with pytest.raises(DomainError):
        weighted_channel_moments(x, np.array([1.5, -0.5]))
    with pytest.raises(DomainError):
        weighted_channel_moments(x, np.array([0.5, 0.6]))
    with pytest.raises(ShapeError):
        weighted_channel_moments(x, np.ones(3) / 3)


def test_affine_identity_and_arithmetic(rng):
    x = rng.normal(size=(2, 3, 2, 2))
    np.testing.assert_array_equal(elementwise_affine(x, np.ones(3), np.zeros(3)), x)
    assert elementwise_affine(np.array([[3.0]]), [0.5], [-1.0])[0, 0] == 1.0


def test_affine_inverse_pair(rng):
    x = rng.normal(size=(5, 3))
    s, t = rng.uniform(0.5, 2, 3), rng.normal(size=3)
    y = elementwise_affine(x, s, t)
    np.testing.assert_allclose(elementwise_affine(y, 1 / s, np.zeros(3)) - t, x, atol=1e-12)


def test_affine_shape_mismatch():
    with pytest.raises(ShapeError):
        elementwise_affine(np.zeros((2, 3)), np.ones(2), np.zeros(3))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 4), st.integers(1, 6)),
              elements=finite))
def test_standardizing_affine_property(x):
    eps = 1e-5
    m = channel_moments(x)
    out = channel_moments(elementwise_affine(x, 1 / np.sqrt(m.var + eps), -m.mean))
    assert np.all(np.abs(out.mean) <= 1e-9)
    np.testing.assert_allclose(out.var, m.var / (m.var + eps), atol=1e-6, rtol=0)
    assert np.all(m.var >= 0) and m.count == x.shape[0] * x.shape[2]


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 3), st.integers(1, 5)),
              elements=finite))
def test_uniform_weights_property(x):
    n, _, l = x.shape
    a = weighted_channel_moments(x, np.full((n, l), 1 / (n * l)))
    b = channel_moments(x)
    np.testing.assert_allclose(a.mean, b.mean, atol=1e-9 * (1 + np.abs(b.mean).max()), rtol=0)
