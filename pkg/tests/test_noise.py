import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from wflow.errors import GridError, MassDegeneracyError
from wflow.kernels import MassKernel, SpectralDecay, adaptive_f_squared_cosine
from wflow.noise import (
    NoiseStream, SheetIncrement, StreamBatch, apply_martingale_increment, increment_covariance,
    linear_form_covariance, sample_increment, sheet_from_normals,
)
from wflow.state import mass_function


def test_zero_dt_gives_zero_increment():
    d = SpectralDecay(2.0, 5.0, 0.5)
    inc = sample_increment(NoiseStream(0), d, 0.0)
    assert np.all(inc.dW_re == 0) and np.all(inc.dW_im == 0)


def test_increment_moments():
    d = SpectralDecay(2.0, 1.0, 0.5)
    dt, N = 0.01, 100_000
    z = NoiseStream(3).normals(2 * d.size, N)
    inc = sheet_from_normals(z, d, dt)
    x = np.concatenate([inc.dW_re, inc.dW_im], axis=1)
    var = d.dk * dt
    assert np.all(np.abs(x.mean(axis=0)) <= 4 * np.sqrt(var / N))
    s2 = x.var(axis=0, ddof=1)
    # two-sided chi-square band at level 1e-6, and the 5% relative tolerance
    lo, hi = stats.chi2.ppf([5e-7, 1 - 5e-7], N - 1) / (N - 1)
    assert np.all((s2 / var > lo) & (s2 / var < hi))
    assert np.all(np.abs(s2 / var - 1) < 0.05)


def test_sample_increment_uses_one_row():
    d = SpectralDecay(2.0, 1.0, 0.5)
    a = sample_increment(NoiseStream(5, 2), d, 0.1)
    z = NoiseStream(5, 2).normals(2 * d.size)[0]
    np.testing.assert_array_equal(a.dW_re, z[: d.size] * np.sqrt(0.05))
    np.testing.assert_array_equal(a.dW_im, z[d.size:] * np.sqrt(0.05))


def test_no_noise_gives_zero_vector():
    d = SpectralDecay(2.0, 1.0, 0.5, scale=0.0)
    inc = sample_increment(NoiseStream(0), d, 0.1)
    assert np.all(apply_martingale_increment(np.array([0.0, 1.0]), np.ones(2), d, inc) == 0)


def test_equal_particles_equal_increments():
    d = SpectralDecay(2.0, 5.0, 0.1)
    y = np.array([-0.3, 0.2, 0.2, 0.9])
    m = mass_function(y, MassKernel.gaussian())
    dy = apply_martingale_increment(y, m, d, sample_increment(NoiseStream(1), d, 0.01))
    assert dy[1] == dy[2]


def test_empirical_covariance_matches_kernel():
    d = SpectralDecay(2.0, 20.0, 0.1)
    y = np.array([0.0, 0.3, 0.8])
    m = mass_function(y, MassKernel.gaussian())
    dt, N = 0.01, 10_000
    inc = sheet_from_normals(NoiseStream(7).normals(2 * d.size, N), d, dt)
    dy = apply_martingale_increment(np.broadcast_to(y, (N, 3)), m, d, inc)
    emp = dy.T @ dy / N
    # oracle: direct expansion of the kernel sum
    delta = y[:, None] - y[None, :]
    direct = np.zeros((3, 3))
    for fj, kj in zip(d.values, d.nodes):
        direct += fj**2 * np.cos(kj * delta) * d.dk
    direct *= dt / np.sqrt(np.outer(m, m))
    np.testing.assert_allclose(increment_covariance(y, m, d, dt), direct, rtol=1e-12)
    np.testing.assert_allclose(emp, direct, rtol=0.05)


@settings(max_examples=30, deadline=None)
@given(y=st.lists(st.floats(-5, 5), min_size=1, max_size=6), alpha=st.floats(1.6, 4.0),
       m=st.floats(0.05, 3.0))
def test_closed_form_covariance_identity(y, alpha, m):
    d = SpectralDecay(alpha, 8.0, 0.2)
    y = np.asarray(y)
    masses = m * (1 + 0.1 * np.arange(y.size))
    a = linear_form_covariance(y, masses, d, 0.01)
    b = increment_covariance(y, masses, d, 0.01)
    assert np.max(np.abs(a - b)) <= 1e-12 * np.max(np.abs(b))


def test_grid_refinement_covariance_converges():
    y = np.array([0.0, 0.5, 1.5])
    m = np.ones(3)
    exact = np.array([[adaptive_f_squared_cosine(3.0, a - b) for b in y] for a in y])
    errs = []
    for dk in (0.8, 0.4, 0.2, 0.1):
        d = SpectralDecay.from_tail(3.0, dk, 1e-10)
        errs.append(np.abs(increment_covariance(y, m, d, 1.0) - exact).max())
        # covariance distance O(dk) with unit constant
        assert errs[-1] <= dk
    assert errs[1] < errs[0]


def test_replay_and_fast_forward():
    s = NoiseStream(11, 4)
    a = s.normals(6, 5)
    np.testing.assert_array_equal(s.replay().normals(6, 5), a)
    np.testing.assert_array_equal(NoiseStream(11, 4, counter=3).normals(6, 2), a[3:])
    assert s.counter == 5


def test_streams_keyed_by_path_and_tag():
    a = NoiseStream(1, 0).normals(4)
    assert not np.array_equal(a, NoiseStream(1, 1).normals(4))
    assert not np.array_equal(a, NoiseStream(1, 0, tag="other").normals(4))
    assert not np.array_equal(a, NoiseStream(2, 0).normals(4))


def test_antithetic_pairs():
    e = NoiseStream(1, 6, antithetic=True).normals(4, 3)
    o = NoiseStream(1, 7, antithetic=True).normals(4, 3)
    np.testing.assert_array_equal(o, -e)


def test_width_change_rejected():
    s = NoiseStream(0)
    s.normals(4)
    with pytest.raises(GridError):
        s.normals(5)


def test_batch_stacks_paths():
    b = StreamBatch(3, [2, 5]).normals(4, 2)
    assert b.shape == (2, 2, 4)
    np.testing.assert_array_equal(b[1], NoiseStream(3, 5).normals(4, 2))


def test_degenerate_mass_rejected():
    d = SpectralDecay(2.0, 1.0, 0.5)
    inc = SheetIncrement(np.zeros(4), np.zeros(4), 0.1)
    with pytest.raises(MassDegeneracyError):
        apply_martingale_increment(np.zeros(2), np.array([1.0, 0.0]), d, inc)
