import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hrflow.coupling import couple_for_training, independent_coupling, ot_coupling
from hrflow.errors import ConfigError


def _brute_force_min(x0, x1):
    best = np.inf
    for perm in itertools.permutations(range(len(x0))):
        best = min(best, float(np.mean(np.sum((x1[list(perm)] - x0) ** 2, axis=1))))
    return best


def test_independent_identity(rng):
    x0, x1 = rng.standard_normal((3, 1)), rng.standard_normal((3, 1))
    c = independent_coupling(x0, x1)
    assert c.permutation.tolist() == [0, 1, 2]
    assert c.transport_cost == pytest.approx(np.mean(np.sum((x1 - x0) ** 2, axis=1)))


def test_independent_cost_moment():
    rng = np.random.default_rng(0)
    x0, x1 = rng.standard_normal((10_000, 1)), 2 * rng.standard_normal((10_000, 1))
    # E|x1 - x0|^2 = Var x0 + Var x1 = 5
    assert independent_coupling(x0, x1).transport_cost == pytest.approx(5.0, rel=0.05)


def test_size_mismatch():
    with pytest.raises(ConfigError):
        independent_coupling(np.zeros((3, 1)), np.zeros((2, 1)))


def test_ot_swaps_crossed_pair():
    c = ot_coupling(np.array([[0.0], [1.0]]), np.array([[1.0], [0.0]]))
    assert c.permutation.tolist() == [1, 0]
    assert c.transport_cost == 0.0


def test_ot_matches_brute_force():
    rng = np.random.default_rng(1)
    for trial in range(100):
        B = int(rng.integers(1, 9))
        dim = int(rng.integers(1, 3))
        x0, x1 = rng.standard_normal((B, dim)), rng.standard_normal((B, dim))
        best = _brute_force_min(x0, x1)
        for solver in ("auto", "assignment"):
            assert ot_coupling(x0, x1, solver=solver).transport_cost == pytest.approx(best, rel=1e-12, abs=1e-15)


@given(st.integers(1, 64), st.integers(1, 2), st.integers(0, 2**32 - 1))
def test_ot_not_worse_than_independent_and_bijective(B, dim, seed):
    rng = np.random.default_rng(seed)
    x0, x1 = rng.standard_normal((B, dim)), rng.standard_normal((B, dim))
    ot = ot_coupling(x0, x1)
    assert sorted(ot.permutation.tolist()) == list(range(B))
    assert ot.transport_cost <= independent_coupling(x0, x1).transport_cost + 1e-12
    assert ot.transport_cost >= 0


@given(st.integers(1, 200), st.integers(0, 2**32 - 1))
def test_sorted_1d_matches_assignment_solver(B, seed):
    rng = np.random.default_rng(seed)
    x0, x1 = rng.standard_normal((B, 1)), rng.standard_normal((B, 1))
    fast = ot_coupling(x0, x1).transport_cost
    assert fast == pytest.approx(ot_coupling(x0, x1, solver="assignment").transport_cost, rel=1e-12, abs=1e-15)


def test_ot_cap():
    with pytest.raises(ConfigError, match="ot_chunk"):
        ot_coupling(np.zeros((9, 1)), np.zeros((9, 1)), cap=8)


def test_couple_independent_passthrough(rng):
    x0, x1 = rng.standard_normal((5, 1)), rng.standard_normal((5, 1))
    assert np.array_equal(couple_for_training("independent", x0, x1), x1)


def test_couple_ot_degenerate_identity(rng):
    x = rng.standard_normal((50, 2))
    assert np.array_equal(couple_for_training("ot", x, x.copy()), x)


def test_couple_ot_chunks_are_optimal_within_chunk(rng):
    x0, x1 = rng.standard_normal((40, 1)), rng.standard_normal((40, 1))
    out = couple_for_training("ot", x0, x1, chunk=16)
    for sl in (slice(0, 16), slice(16, 32), slice(32, 40)):
        assert sorted(out[sl, 0].tolist()) == sorted(x1[sl, 0].tolist())
        # in 1D the optimal matching is monotone
        order = np.argsort(x0[sl, 0])
        assert np.all(np.diff(out[sl][order, 0]) >= 0)


def test_couple_unknown_mode(rng):
    with pytest.raises(ConfigError):
        couple_for_training("sinkhorn", np.zeros((2, 1)), np.zeros((2, 1)))
