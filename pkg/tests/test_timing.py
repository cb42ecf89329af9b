import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import brentq

from conftest import random_profiles
from fedsketch.errors import DimensionError, InvalidSketchRatioError
from fedsketch.protocol import Plan
from fedsketch.timing import (
    ClientProfile,
    expected_max_tau,
    expected_round_time_bound,
    realized_round_time,
    round_times_for_masks,
    sample_round_times,
    scale_times,
    scaled_times,
)

positive = st.floats(0.01, 100.0)


def brute_force_max_tau(q, taus):
    total = 0.0
    for mask in itertools.product([0, 1], repeat=len(q)):
        p = np.prod([qi if m else 1 - qi for qi, m in zip(q, mask)])
        chosen = [t for t, m in zip(taus, mask) if m]
        total += p * (max(chosen) if chosen else 0.0)
    return total


def brentq_oracle(taus, ts, f_tot):
    tmax = max(taus)
    return brentq(lambda T: np.sum(ts / (T - taus)) - f_tot, tmax * (1 + 1e-15) + 1e-300,
                  tmax + ts.sum() / f_tot + 1.0, xtol=1e-15, rtol=1e-15)


class TestScaleTimes:
    def test_full_rank_unchanged(self):
        assert scale_times(ClientProfile(0.5, 2.0, 8.0), 4, 4) == (2.0, 8.0)

    def test_arithmetic(self):
        assert scale_times(ClientProfile(0.5, 1.0, 8.0), 2, 4)[1] == 2.0
        assert scale_times(ClientProfile(0.5, 3.5, 1.0), 3, 8)[0] == 3.5 * 9 / 64

    def test_out_of_range(self):
        with pytest.raises(InvalidSketchRatioError):
            scale_times(ClientProfile(0.5, 1.0, 1.0), 0, 4)
        with pytest.raises(InvalidSketchRatioError):
            scaled_times([ClientProfile(0.5, 1.0, 1.0)], [5], 4)

    @given(st.integers(1, 16), positive, positive)
    def test_monotone_and_endpoints(self, gamma, tau, t):
        p = ClientProfile(1.0, tau, t)
        vals = [scale_times(p, k, gamma) for k in range(1, gamma + 1)]
        assert all(a[0] <= b[0] and a[1] <= b[1] for a, b in zip(vals, vals[1:]))
        assert vals[-1] == (tau, t)
        assert vals[0][0] == pytest.approx(tau / gamma**2, rel=1e-15)

    def test_profile_validation(self):
        with pytest.raises(ValueError):
            ClientProfile(0.0, 1.0, 1.0)
        with pytest.raises(ValueError):
            ClientProfile(0.5, -1.0, 1.0)


class TestRealizedRoundTime:
    def test_single(self):
        T, f = realized_round_time([0], np.array([1.0]), np.array([10.0]), 100.0)
        assert T == pytest.approx(1.1, rel=1e-12)
        assert f[0] == pytest.approx(100.0, rel=1e-9)

    def test_symmetric_pair(self):
        T, _ = realized_round_time([0, 1], np.zeros(2), np.ones(2), 1.0)
        assert T == pytest.approx(2.0, rel=1e-12)

    def test_empty(self):
        with pytest.raises(ValueError):
            realized_round_time([], np.ones(2), np.ones(2), 1.0)

    @given(st.lists(st.tuples(st.floats(0.0, 50.0), st.floats(0.01, 500.0)), min_size=1, max_size=12),
           st.floats(0.1, 1000.0))
    def test_water_filling(self, clients, f_tot):
        taus = np.array([c[0] for c in clients])
        ts = np.array([c[1] for c in clients])
        T, f = realized_round_time(range(len(clients)), taus, ts, f_tot)
        assert T > taus.max()
        assert abs(np.sum(ts / (T - taus)) - f_tot) < 1e-9 * f_tot
        np.testing.assert_allclose(taus + ts / f, T, rtol=1e-9)
        assert f.sum() == pytest.approx(f_tot, rel=1e-9)

    def test_against_brentq(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            taus, ts = rng.uniform(0, 5, 5), rng.uniform(0.1, 30, 5)
            f_tot = rng.uniform(1, 100)
            T, _ = realized_round_time(range(5), taus, ts, f_tot)
            assert T == pytest.approx(brentq_oracle(taus, ts, f_tot), rel=1e-10)

    def test_subset_indexing(self):
        taus, ts = np.array([1.0, 100.0, 2.0]), np.array([3.0, 1000.0, 4.0])
        T, f = realized_round_time([0, 2], taus, ts, 7.0)
        T2, _ = realized_round_time([0, 1], taus[[0, 2]], ts[[0, 2]], 7.0)
        assert T == T2 and f.shape == (2,)

    def test_batched_matches_scalar(self):
        rng = np.random.default_rng(1)
        taus, ts = rng.uniform(0, 4, 7), rng.uniform(0.5, 20, 7)
        mask = rng.random((200, 7)) < 0.4
        out = round_times_for_masks(mask, taus, ts, 15.0)
        for row, T in zip(mask, out):
            if row.any():
                assert T == pytest.approx(realized_round_time(np.flatnonzero(row), taus, ts, 15.0)[0], rel=1e-9)
            else:
                assert T == 0.0


class TestExpectedMaxTau:
    def test_examples(self):
        assert expected_max_tau([1.0], [3.0]) == 3.0
        assert expected_max_tau([0.5, 0.5], [1.0, 2.0]) == pytest.approx(1.25, abs=1e-15)
        assert expected_max_tau([0.5, 0.5], [2.0, 1.0]) == pytest.approx(1.25, abs=1e-15)

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            expected_max_tau([0.5], [1.0, 2.0])

    @given(st.lists(st.tuples(st.floats(0.0, 1.0), st.floats(0.0, 100.0)), min_size=1, max_size=10))
    def test_bounded_by_sum(self, pairs):
        q = np.array([p[0] for p in pairs])
        taus = np.array([p[1] for p in pairs])
        assert expected_max_tau(q, taus) <= np.dot(q, taus) * (1 + 1e-12) + 1e-12
        assert expected_max_tau(q, taus) <= taus.max() + 1e-12

    @pytest.mark.parametrize("N", [1, 2, 5, 9])
    def test_enumeration(self, N):
        rng = np.random.default_rng(N)
        for _ in range(5):
            q, taus = rng.uniform(0, 1, N), rng.uniform(0, 10, N)
            assert expected_max_tau(q, taus) == pytest.approx(brute_force_max_tau(q, taus), abs=1e-12)


class TestBounds:
    def test_homogeneous_full(self):
        profiles = [ClientProfile(0.25, 2.0, 30.0)] * 4
        plan = Plan.uniform(4, 1.0, 8, 8)
        assert expected_round_time_bound(plan, profiles, 10.0) == pytest.approx(4 * (3.0 + 2.0))

    def test_linear_in_q(self, rng):
        profiles = random_profiles(rng, 6)
        plan = Plan(rng.uniform(0.2, 1.0, 6), rng.integers(1, 5, 6), 4)
        half = Plan(plan.q * 0.5, plan.k, 4)
        assert expected_round_time_bound(half, profiles, 7.0) == pytest.approx(
            0.5 * expected_round_time_bound(plan, profiles, 7.0), rel=1e-14)

    def test_ordering_monte_carlo(self):
        rng = np.random.default_rng(21)
        for _ in range(10):
            N = int(rng.integers(2, 8))
            profiles = random_profiles(rng, N)
            plan = Plan(rng.uniform(0.1, 1.0, N), rng.integers(1, 5, N), 4)
            taus, ts = scaled_times(profiles, plan.k, 4)
            f_tot = float(rng.uniform(5, 50))
            draws = sample_round_times(plan.q, taus, ts, f_tot, 10_000, rng)
            tight = expected_round_time_bound(plan, profiles, f_tot, tight=True)
            loose = expected_round_time_bound(plan, profiles, f_tot)
            se = draws.std(ddof=1) / np.sqrt(draws.size)
            assert draws.mean() <= tight + 3 * se
            assert tight <= loose + 1e-12
