import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nudgeforge.observation import ObservationOperator, Rng, gaussian_vector, observe, subsample


def test_half_sparsity_keeps_first_of_each_pair():
    u = np.arange(1.0, 11.0)
    np.testing.assert_array_equal(subsample(u, ObservationOperator((10,), 2)), u[::2])


def test_full_observation_is_identity():
    u = np.random.default_rng(0).standard_normal(12)
    np.testing.assert_array_equal(subsample(u, ObservationOperator((12,), 1)), u)


def test_quarter_sparsity():
    np.testing.assert_array_equal(subsample(np.arange(1.0, 9.0), ObservationOperator((8,), 4)),
                                  [1.0, 5.0])


def test_2d_sparsity_semantics():
    H = ObservationOperator.from_sparsity((8, 8), 6.25)
    assert H.factor == 4 and H.obs_dim == 4
    field = np.arange(64.0).reshape(8, 8)
    np.testing.assert_array_equal(subsample(field.ravel(), H), field[::4, ::4].ravel())
    assert ObservationOperator.from_sparsity((8, 8), 25).obs_dim == 16
    with pytest.raises(ValueError):
        ObservationOperator.from_sparsity((40,), 30)


@settings(max_examples=30, deadline=None)
@given(st.sampled_from([1, 2, 4]), st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 1000))
def test_subsample_is_linear(r, a, b, seed):
    rng = np.random.default_rng(seed)
    H = ObservationOperator((16,), r)
    u, v = rng.standard_normal(16), rng.standard_normal(16)
    np.testing.assert_allclose(subsample(a * u + b * v, H), a * subsample(u, H) + b * subsample(v, H),
                               rtol=1e-12, atol=1e-12)
    np.testing.assert_array_equal(H.matrix() @ u, subsample(u, H))


def test_gaussian_vector_reproducible_and_empty():
    np.testing.assert_array_equal(gaussian_vector(Rng(5, 3), 11), gaussian_vector(Rng(5, 3), 11))
    assert gaussian_vector(Rng(5), 0).shape == (0,)


def test_gaussian_moments_over_a_million_draws():
    x = gaussian_vector(Rng(123), 1_000_000)
    assert abs(x.mean()) < 0.005
    assert abs(x.var() - 1) < 0.01


def test_substreams_differ_and_are_stable():
    a = gaussian_vector(Rng(1).substream("noise"), 5)
    b = gaussian_vector(Rng(1).substream("init"), 5)
    assert not np.array_equal(a, b)
    np.testing.assert_array_equal(a, gaussian_vector(Rng(1).substream("noise"), 5))


def test_observe_noiseless_and_reproducible():
    u = np.random.default_rng(0).standard_normal(40)
    H = ObservationOperator((40,), 2)
    np.testing.assert_array_equal(observe(u, H, 0.0, Rng(0)), subsample(u, H))
    np.testing.assert_array_equal(observe(u, H, 0.3640, Rng(9)), observe(u, H, 0.3640, Rng(9)))


def test_observation_noise_statistics():
    sigma = 0.3640
    H = ObservationOperator((100,), 1)
    u = np.zeros((1000, 100))
    rng = Rng(4)
    noise = (observe(u, H, sigma, rng) - subsample(u, H)).ravel()
    assert 0.99 * sigma <= noise.std() <= 1.01 * sigma
    x = noise - noise.mean()
    assert abs(np.dot(x[:-1], x[1:]) / np.dot(x, x)) < 0.01
    # consecutive calls draw fresh noise
    assert not np.array_equal(observe(u[:1], H, sigma, rng), observe(u[:1], H, sigma, rng))
