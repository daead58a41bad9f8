import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wflow.arratia import CoalescingSystem, covariation_profile, empirical_covariation, simulate_arratia, step_arratia
from wflow.noise import NoiseStream


def test_single_cluster_moves_like_brownian_motion():
    sys = CoalescingSystem.start(np.zeros(4), paths=10_000)
    assert np.all(sys.masses == 1.0)
    z = np.random.default_rng(0).standard_normal((10_000, 4))
    out = step_arratia(sys, 0.01, normals=z)
    inc = out.positions[:, 0]
    assert np.all(out.positions == inc[:, None])
    assert inc.var() == pytest.approx(0.01, rel=0.05)


def test_far_clusters_do_not_merge():
    sys = CoalescingSystem.start(np.array([0.0, 100.0]), paths=10_000)
    z = np.random.default_rng(1).standard_normal((10_000, 2))
    out = step_arratia(sys, 1e-4, normals=z)
    assert np.all(out.leaders == [0, 1])
    d = out.positions - sys.positions
    np.testing.assert_allclose(d.var(axis=0), 2e-4, rtol=0.05)
    assert abs(np.corrcoef(d.T)[0, 1]) < 0.05


def test_ties_merge_at_start():
    sys = CoalescingSystem.start(np.array([0.0, 0.0, 1.0]))
    assert sys.leaders[0].tolist() == [0, 0, 2]
    np.testing.assert_allclose(sys.masses[0], [2 / 3, 2 / 3, 1 / 3])
    assert sys.tau[0, 0, 1] == 0 and np.isnan(sys.tau[0, 0, 2])


def test_crossing_merges_at_mass_weighted_mean():
    sys = CoalescingSystem.start(np.array([0.0, 1.0, 2.0]))
    # move the last particle below the middle one: equal masses average
    z = np.array([[0.0, 0.0, -1.5 / math.sqrt(3.0)]])
    out = step_arratia(sys, 1.0, normals=z)
    np.testing.assert_allclose(out.positions[0], [0.0, 0.75, 0.75])
    np.testing.assert_allclose(out.masses[0], [1 / 3, 2 / 3, 2 / 3])
    assert out.tau[0, 1, 2] == 1.0 and out.tau[0, 2, 1] == 1.0


def test_merged_pair_quadratic_variation_rate():
    tr = simulate_arratia(np.array([0.0, 0.0]), 1.0, 0.01, 10_000, seed=3)
    qv = empirical_covariation(tr, 0, 0)
    assert qv.mean() == pytest.approx(1.0, rel=0.05)


def test_profile_examples():
    tr = simulate_arratia(np.array([0.0, 1.0, 50.0]), 0.5, 0.01, 50, seed=4)
    own = covariation_profile(tr, 0, 0)
    expected = np.sum(tr.dt / tr.masses[:, :-1, 0], axis=1)
    np.testing.assert_allclose(own, expected)
    assert np.all(covariation_profile(tr, 0, 2) == 0)


def test_profile_matches_sample_covariation():
    y0 = np.array([0.0, 0.1, 0.3, 0.6])
    tr = simulate_arratia(y0, 1.0, 0.01, 10_000, seed=5)
    for u, v in ((0, 1), (0, 3), (1, 2)):
        prof = covariation_profile(tr, u, v).mean()
        emp = empirical_covariation(tr, u, v).mean()
        assert emp == pytest.approx(prof, rel=0.1)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(2, 8))
def test_mass_conservation_and_order(seed, n):
    y0 = np.sort(np.random.default_rng(seed).uniform(0, 1, n))
    tr = simulate_arratia(y0, 0.3, 0.01, 5, seed=seed)
    for p in range(5):
        for i in range(tr.times.size):
            pos, mas = tr.positions[p, i], tr.masses[p, i]
            assert np.all(np.diff(pos) >= 0)
            starts = np.r_[True, (np.diff(pos) != 0) | (np.diff(mas) != 0)]
            assert math.isclose(mas[starts].sum(), 1.0, abs_tol=1e-12)
    tau = tr.tau
    np.testing.assert_array_equal(np.isnan(tau), np.isnan(np.swapaxes(tau, 1, 2)))


def test_replay_is_deterministic():
    a = simulate_arratia(np.linspace(0, 1, 5), 0.2, 0.01, 3, seed=9)
    b = simulate_arratia(np.linspace(0, 1, 5), 0.2, 0.01, 3, seed=9)
    np.testing.assert_array_equal(a.positions, b.positions)
    s = NoiseStream(9, 1, tag="arratia")
    sys = CoalescingSystem.start(np.linspace(0, 1, 5))
    sys = step_arratia(sys, 0.01, stream=s)
    np.testing.assert_array_equal(sys.positions[0], a.positions[1, 1])
