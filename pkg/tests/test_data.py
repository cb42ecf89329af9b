import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedsketch.data import dirichlet_partition, gaussian_mixture, log_uniform, simulate_profiles
from fedsketch.errors import ConfigError


def test_mixture_shapes_and_balance():
    x, y = gaussian_mixture(300, 5, 3, np.random.default_rng(0))
    assert x.shape == (300, 5)
    np.testing.assert_array_equal(np.bincount(y), [100, 100, 100])


def test_mixture_conditioning_scales_features():
    rng = np.random.default_rng(0)
    x, _ = gaussian_mixture(5000, 4, 2, rng, condition=1000.0)
    spread = x.std(axis=0)
    assert np.all(np.diff(spread) < 0)
    assert spread[0] / spread[-1] == pytest.approx(1000.0, rel=0.2)
    with pytest.raises(ConfigError):
        gaussian_mixture(10, 2, 2, rng, condition=0.5)


def test_single_client_gets_everything():
    labels = np.arange(50) % 5
    parts, a = dirichlet_partition(labels, 1, 0.1, np.random.default_rng(0))
    np.testing.assert_array_equal(parts[0], np.arange(50))
    np.testing.assert_array_equal(a, [1.0])


@given(st.integers(1, 20), st.floats(0.3, 100.0), st.integers(0, 10_000))
def test_partition_is_a_partition(N, alpha, seed):
    labels = np.random.default_rng(seed).integers(0, 4, 400)
    parts, a = dirichlet_partition(labels, N, alpha, np.random.default_rng(seed))
    joined = np.sort(np.concatenate(parts))
    np.testing.assert_array_equal(joined, np.arange(400))
    assert all(p.size > 0 for p in parts)
    assert abs(a.sum() - 1.0) < 1e-12
    np.testing.assert_allclose(a, [p.size / 400 for p in parts])


def test_small_concentration_is_more_skewed():
    labels = np.arange(1000) % 10
    rng = np.random.default_rng(0)

    def skew(parts):
        # Mean over clients of the largest class share.
        return np.mean([np.bincount(labels[p], minlength=10).max() / p.size for p in parts])

    wins = 0
    for _ in range(1000):
        low, _ = dirichlet_partition(labels, 10, 0.1, rng)
        high, _ = dirichlet_partition(labels, 10, 100.0, rng)
        wins += skew(low) > skew(high)
    assert wins >= 950


def test_partition_errors():
    labels = np.zeros(5, dtype=int)
    rng = np.random.default_rng(0)
    with pytest.raises(ConfigError):
        dirichlet_partition(labels, 2, 0.0, rng)
    with pytest.raises(ConfigError):
        dirichlet_partition(labels, 6, 1.0, rng)
    with pytest.raises(ConfigError):
        dirichlet_partition(labels, 0, 1.0, rng)


def test_profiles_within_ranges():
    rng = np.random.default_rng(4)
    a = rng.dirichlet(np.ones(40))
    profiles = simulate_profiles(a, (0.5, 20.0), (10.0, 200.0), rng)
    assert [p.a for p in profiles] == pytest.approx(a.tolist())
    assert all(0.5 <= p.tau_full <= 20.0 and 10.0 <= p.t_full <= 200.0 for p in profiles)


def test_log_uniform_errors():
    with pytest.raises(ConfigError):
        log_uniform(0.0, 1.0, 3, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        log_uniform(2.0, 1.0, 3, np.random.default_rng(0))
