import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from hrflow.distributions import Moons
from hrflow.errors import ConfigError
from hrflow.metrics import distance, histogram, random_directions, sliced_w2, wasserstein1_1d

finite = st.floats(-100, 100, allow_nan=False)


def test_w1_identical_is_zero(rng):
    a = rng.standard_normal(1000)
    assert wasserstein1_1d(a, a.copy()) == 0.0


def test_w1_single_points():
    assert wasserstein1_1d([0.0], [1.0]) == 1.0


def test_w1_translation(rng):
    a = rng.standard_normal(100_000)
    b = 0.5 + rng.standard_normal(100_000)
    assert wasserstein1_1d(a, b) == pytest.approx(0.5, abs=0.02)


@given(arrays(np.float64, st.integers(1, 50), elements=finite))
def test_w1_matches_scipy_equal_counts(a):
    b = a[::-1] * 0.5 + 1.0
    assert wasserstein1_1d(a, b) == pytest.approx(stats.wasserstein_distance(a, b), rel=1e-9, abs=1e-12)


def test_w1_unequal_counts_close_to_scipy(rng):
    a = rng.standard_normal(30_000)
    b = 0.3 + 1.2 * rng.standard_normal(20_000)
    assert wasserstein1_1d(a, b) == pytest.approx(stats.wasserstein_distance(a, b), abs=2e-3)


@given(arrays(np.float64, 20, elements=finite), arrays(np.float64, 20, elements=finite))
def test_w1_symmetric(a, b):
    assert wasserstein1_1d(a, b) == pytest.approx(wasserstein1_1d(b, a), abs=1e-12)


@given(arrays(np.float64, 20, elements=finite), arrays(np.float64, 20, elements=finite), finite)
def test_w1_translation_covariance(a, b, delta):
    # the same shift applied to both sets leaves sorted gaps unchanged up to rounding
    shifted = wasserstein1_1d(a + delta, b + delta)
    assert shifted == pytest.approx(wasserstein1_1d(a, b), abs=1e-11)


def test_w1_translation_covariance_exact_for_representable_shift(rng):
    a = np.round(rng.standard_normal(500) * 64) / 64
    b = np.round(rng.standard_normal(500) * 64) / 64
    assert wasserstein1_1d(a + 0.5, b + 0.5) == wasserstein1_1d(a, b)


def test_w1_triangle_with_noise_floor():
    rng = np.random.default_rng(0)
    n = 20_000
    floor = 0.02
    for _ in range(5):
        mu = rng.normal(size=3)
        a, b, c = (m + rng.standard_normal(n) for m in mu)
        assert wasserstein1_1d(a, c) <= wasserstein1_1d(a, b) + wasserstein1_1d(b, c) + 2 * floor


def test_w1_empty_rejected():
    with pytest.raises(ConfigError):
        wasserstein1_1d([], [1.0])


def test_sliced_identical_is_zero(rng):
    a = rng.standard_normal((500, 2))
    assert sliced_w2(a, a.copy(), 64, rng) == 0.0


def test_sliced_translation():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((5000, 2))
    assert sliced_w2(a, a + [1.0, 0.0], 512, rng) == pytest.approx(1 / math.sqrt(2), abs=0.05)


def test_sliced_translation_exact_with_fixed_directions():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((300, 2))
    dirs = random_directions(512, 2, rng)
    expected = math.sqrt(np.mean(dirs[:, 0] ** 2))
    assert sliced_w2(a, a + [1.0, 0.0], directions=dirs) == pytest.approx(expected, rel=1e-10)


def test_sliced_moons_noise_floor():
    moons = Moons(0.1)
    a = moons.sample(100_000, np.random.default_rng(2))
    b = moons.sample(100_000, np.random.default_rng(3))
    assert sliced_w2(a, b, 512, np.random.default_rng(0)) <= 0.02


def test_sliced_symmetric_with_shared_seed(rng):
    a, b = rng.standard_normal((400, 2)), 1 + rng.standard_normal((400, 2))
    assert sliced_w2(a, b, 128, np.random.default_rng(5)) == pytest.approx(
        sliced_w2(b, a, 128, np.random.default_rng(5)), abs=1e-12)


def test_sliced_errors(rng):
    with pytest.raises(ConfigError):
        sliced_w2(np.zeros((0, 2)), np.zeros((3, 2)), 8, rng)
    with pytest.raises(ConfigError):
        sliced_w2(np.zeros((3, 2)), np.zeros((3, 2)), 0, rng)


def test_directions_are_unit(rng):
    np.testing.assert_allclose(np.linalg.norm(random_directions(100, 2, rng), axis=1), 1.0)


def test_histogram_single_bin(rng):
    x = rng.uniform(2, 5, 1000)
    density, edges = histogram(x, 1, (2.0, 5.0))
    assert density[0] == pytest.approx(1 / 3)


def test_histogram_uniform(rng):
    density, _ = histogram(rng.uniform(0, 1, 100_000), 10, (0.0, 1.0))
    assert np.all(np.abs(density - 1) <= 0.05)


def test_histogram_integrates_to_one(rng):
    density, edges = histogram(rng.standard_normal(1000), 17, (-5.0, 5.0))
    assert np.sum(density * np.diff(edges)) == pytest.approx(1.0)


def test_distance_dispatch(rng):
    r1 = distance(rng.standard_normal(100), rng.standard_normal(100))
    assert r1.metric == "w1" and r1.value >= 0 and r1.n_projections is None
    r2 = distance(rng.standard_normal((100, 2)), rng.standard_normal((100, 2)), seed=3)
    assert r2.metric == "sw2" and r2.n_projections == 512 and r2.seed == 3
    with pytest.raises(ConfigError):
        distance(rng.standard_normal((5, 1)), rng.standard_normal((5, 2)))
