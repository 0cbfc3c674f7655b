import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smckit.errors import DimensionMismatch, InvalidInput
from smckit.linalg import RngStream, centered_cross_covariance, gaussian, svd


@pytest.mark.parametrize("shape", [(5, 3), (3, 5), (40, 40), (1, 7), (64, 2)])
def test_svd_reconstructs(shape):
    a = np.random.default_rng(1).standard_normal(shape)
    u, s, vt = svd(a)
    assert np.abs(u @ np.diag(s) @ vt - a).max() <= 1e-9
    assert np.all(s >= 0) and np.all(np.diff(s) <= 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_svd_reconstruction_property(m, n, seed):
    a = np.random.default_rng(seed).standard_normal((m, n)) * 10
    u, s, vt = svd(a)
    assert np.abs(u @ np.diag(s) @ vt - a).max() <= 1e-9 * max(1.0, np.abs(a).max())
    np.testing.assert_allclose(u.T @ u, np.eye(len(s)), atol=1e-10)


def test_svd_rejects_bad_input():
    with pytest.raises(InvalidInput):
        svd(np.zeros((0, 3)))
    with pytest.raises(InvalidInput):
        svd(np.array([[1.0, np.nan]]))


def test_cross_covariance_matches_numpy():
    rng = np.random.default_rng(2)
    x, y = rng.standard_normal((3, 50)), rng.standard_normal((4, 50))
    full = np.cov(np.vstack([x, y]))
    np.testing.assert_allclose(centered_cross_covariance(x, y), full[:3, 3:], atol=1e-12)


def test_cross_covariance_errors():
    with pytest.raises(DimensionMismatch):
        centered_cross_covariance(np.ones((2, 5)), np.ones((2, 6)))
    with pytest.raises(InvalidInput):
        centered_cross_covariance(np.ones((2, 1)), np.ones((2, 1)))


def test_streams_are_deterministic_and_distinct():
    a = RngStream(42).child("x", 3)
    assert np.array_equal(a.uniform(10), RngStream(42).child("x", 3).uniform(10))
    assert not np.array_equal(a.uniform(10), RngStream(42).child("x", 4).uniform(10))
    assert not np.array_equal(RngStream(1).uniform(10), RngStream(2).uniform(10))
    u = a.uniform(10_000)
    assert u.min() >= 0 and u.max() < 1


def test_stream_rejects_negative_seed():
    with pytest.raises(InvalidInput):
        RngStream(-1)


def test_gaussian_moments():
    z = gaussian(RngStream(7), 200_001, 2.5)
    assert z.shape == (200_001,)
    assert abs(z.mean()) < 0.02
    assert abs(z.std() - 2.5) < 0.02
    # tails roughly match a normal distribution
    assert abs(np.mean(np.abs(z) > 2 * 2.5) - 0.0455) < 0.003


def test_gaussian_edge_cases():
    assert np.array_equal(gaussian(RngStream(0), 5, 0.0), np.zeros(5))
    assert gaussian(RngStream(0), 0, 1.0).shape == (0,)
    with pytest.raises(InvalidInput):
        gaussian(RngStream(0), 3, -1.0)
    # prefix stability: a longer draw starts with the shorter one
    np.testing.assert_array_equal(gaussian(RngStream(3), 7, 1.0), gaussian(RngStream(3), 8, 1.0)[:7])
