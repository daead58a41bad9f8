import math
from dataclasses import replace

import numpy as np
import pytest

from wflow.drift import make_drift
from wflow.dynamics import (
    SimConfig, quadratic_variation, run, run_derivative_flow, simulate_ensemble, step_euler, step_interpolation,
)
from wflow.errors import ConfigError, MonotonicityViolation
from wflow.kernels import MassKernel, SpectralDecay
from wflow.noise import NoiseStream, SheetIncrement, sheet_from_normals
from wflow.state import HistogramMeasure, QuantileState, u_grid

NO_NOISE = SpectralDecay(2.0, 1.0, 0.5, scale=0.0)


def affine(n, lo=-1.0, hi=1.0):
    return QuantileState(lo + (hi - lo) * u_grid(n))


# -- single steps ----------------------------------------------------------------

def test_step_without_noise_or_drift_is_identity():
    cfg = SimConfig(T=0.1, dt=0.01, n=5, decay=NO_NOISE)
    y = affine(5)
    np.testing.assert_array_equal(step_euler(y, cfg, None, NoiseStream(0)).values, y.values)


def test_step_with_constant_drift():
    cfg = SimConfig(T=0.1, dt=0.01, n=5, decay=NO_NOISE)
    y = affine(5)
    out = step_euler(y, cfg, make_drift("constant", constant=0.7), NoiseStream(0))
    np.testing.assert_allclose(out.values, y.values + 0.7 * 0.01, rtol=0, atol=1e-15)


def test_reject_mode_raises_on_inversion():
    d = SpectralDecay(2.0, 10.0, 0.1)
    cfg = SimConfig(T=1.0, dt=1.0, n=3, decay=d, monotone_repair="reject")
    y = QuantileState(np.array([0.0, 1e-9, 2e-9]))
    with pytest.raises(MonotonicityViolation):
        for s in range(20):
            y = step_euler(y, cfg, None, NoiseStream(s))


@pytest.mark.parametrize("kw", [dict(dt=0.0), dict(T=0.05, dt=0.03), dict(n=1), dict(monotone_repair="bogus"),
                                dict(paths=0), dict(truncation_M=-1.0)])
def test_bad_config_rejected(kw):
    base = dict(T=0.1, dt=0.01, n=4, decay=NO_NOISE)
    with pytest.raises(ConfigError):
        SimConfig(**{**base, **kw})


def test_initial_state_must_fit():
    cfg = SimConfig(T=0.1, dt=0.01, n=4, decay=NO_NOISE, truncation_M=1.0)
    with pytest.raises(ConfigError):
        simulate_ensemble(cfg, affine(5))
    with pytest.raises(ConfigError):
        simulate_ensemble(cfg, affine(4, 0.0, 2.0))


# -- trajectories ---------------------------------------------------------------------

def test_zero_horizon_returns_initial_state():
    d = SpectralDecay(3.0, 5.0, 0.1)
    cfg = SimConfig(T=0.0, dt=0.01, n=4, decay=d)
    tr = run(cfg, affine(4))
    assert len(tr.states) == 1 and tr.times.tolist() == [0.0]
    np.testing.assert_array_equal(tr.states[0].values, affine(4).values)


def test_no_truncation_no_exit_time():
    d = SpectralDecay(3.0, 5.0, 0.1)
    tr = run(SimConfig(T=0.05, dt=0.01, n=4, decay=d), affine(4))
    assert tr.exit_time is None


def test_martingale_small_ensemble():
    d = SpectralDecay.from_tail(3.0, 0.2)
    cfg = SimConfig(T=0.1, dt=0.01, n=16, decay=d, kernel=MassKernel.gaussian(), monotone_repair="off",
                    paths=2000, seed=5)
    y0 = affine(16)
    r = simulate_ensemble(cfg, y0)
    se = r.final.std(axis=0, ddof=1) / math.sqrt(cfg.paths)
    assert np.all(np.abs(r.final.mean(axis=0) - y0.values) <= 4 * se)


def test_exit_bound_small_ensemble():
    d = SpectralDecay.from_tail(3.0, 0.2)
    n = 8
    y0 = QuantileState((u_grid(n) - 0.5) * n / (n - 1))
    for M in (2.0, 4.0):
        cfg = SimConfig(T=1.0, dt=0.02, n=n, decay=d, kernel=MassKernel.gaussian(), truncation_M=M, paths=1000, seed=6)
        r = simulate_ensemble(cfg, y0)
        p = np.mean(~np.isnan(r.exit_times))
        assert p <= 1.0 / M + 3 * math.sqrt(max(p * (1 - p), 1e-12) / cfg.paths)


def test_frozen_after_exit():
    d = SpectralDecay.from_tail(3.0, 0.2)
    cfg = SimConfig(T=2.0, dt=0.02, n=6, decay=d, kernel=MassKernel.gaussian(), truncation_M=1.1, paths=40, seed=1)
    r = simulate_ensemble(cfg, affine(6, 0.0, 1.0), record_stride=1)
    exited = np.flatnonzero(~np.isnan(r.exit_times))
    assert exited.size > 0
    for p in exited:
        i = int(round(r.exit_times[p] / cfg.dt))
        assert r.records[p, i, -1] - r.records[p, i, 0] >= 1.1
        assert np.all(r.records[p, i:] == r.records[p, i])


def test_truncation_bit_identical_until_exit():
    d = SpectralDecay.from_tail(3.0, 0.2)
    y0 = affine(6, 0.0, 1.0)
    small = SimConfig(T=2.0, dt=0.02, n=6, decay=d, kernel=MassKernel.gaussian(), truncation_M=1.2, paths=20, seed=2)
    big = replace(small, truncation_M=5.0)
    a = simulate_ensemble(small, y0, record_stride=1)
    b = simulate_ensemble(big, y0, record_stride=1)
    for p in range(20):
        spread = b.records[p, :, -1] - b.records[p, :, 0]
        hit = np.flatnonzero(spread >= 1.2)
        stop = hit[0] if hit.size else spread.size - 1
        np.testing.assert_array_equal(a.records[p, : stop + 1], b.records[p, : stop + 1])


def test_replay_and_thread_determinism():
    d = SpectralDecay.from_tail(3.0, 0.2)
    cfg = SimConfig(T=0.05, dt=0.01, n=8, decay=d, kernel=MassKernel.gaussian(), paths=10, seed=9)
    a = simulate_ensemble(cfg, affine(8), block=3)
    b = simulate_ensemble(replace(cfg, threads=3), affine(8), block=3)
    c = simulate_ensemble(cfg, affine(8), path_indices=[7])
    np.testing.assert_array_equal(a.final, b.final)
    np.testing.assert_array_equal(a.final[7], c.final[0])
    tr = run(cfg, affine(8), path_index=7)
    np.testing.assert_array_equal(tr.states[-1].values, a.final[7])


def test_quadratic_variation_matches_ito_isometry():
    d = SpectralDecay.from_tail(3.0, 0.2)
    cfg = SimConfig(T=0.2, dt=0.01, n=8, decay=d, kernel=MassKernel.gaussian(), monotone_repair="off",
                    paths=400, seed=3)
    r = simulate_ensemble(cfg, affine(8), record_stride=1)
    qv = quadratic_variation(r.records)
    np.testing.assert_allclose(qv, r.qv, rtol=1e-10)
    ratio = qv.mean(axis=0) / r.qv_expected.mean(axis=0)
    assert np.all(np.abs(ratio - 1) < 0.1)


def test_constant_mass_quadratic_variation_exact_in_mean():
    d = SpectralDecay(3.0, 4.0, 0.2)
    cfg = SimConfig(T=0.1, dt=0.01, n=4, decay=d, paths=10)
    r = simulate_ensemble(cfg, affine(4))
    np.testing.assert_allclose(r.qv_expected, cfg.T * d.norm_sq(), rtol=1e-12)


@pytest.mark.slow
def test_monotonicity_drift_without_repair():
    d = SpectralDecay.from_tail(3.0, 0.2)
    cfg = SimConfig(T=0.1, dt=1e-4, n=128, decay=d, kernel=MassKernel.gaussian(), monotone_repair="off",
                    paths=1000, seed=12)
    r = simulate_ensemble(cfg, affine(128))
    assert np.mean(r.max_violation < 1e-3) >= 0.99


# -- derivative flow ---------------------------------------------------------------------

def g_smooth(u):
    return 2 * u - 1 + 0.2 * np.sin(2 * np.pi * u)


def g_smooth_prime(u):
    return 2 + 0.4 * np.pi * np.cos(2 * np.pi * u)


def test_derivative_flow_without_noise_is_constant():
    cfg = SimConfig(T=0.05, dt=0.01, n=16, decay=NO_NOISE, kernel=MassKernel.gaussian(), monotone_repair="off")
    u = u_grid(16)
    fl = run_derivative_flow(cfg, QuantileState(g_smooth(u)), g_smooth_prime(u))
    for z in fl.z:
        np.testing.assert_allclose(z, g_smooth_prime(u), rtol=1e-15)


def test_derivative_flow_positive_and_close_to_finite_difference():
    d = SpectralDecay.from_tail(3.0, 0.1)
    n = 128
    cfg = SimConfig(T=0.01, dt=1e-4, n=n, decay=d, kernel=MassKernel.gaussian(), monotone_repair="off", seed=4)
    u = u_grid(n)
    for p in range(2):
        fl = run_derivative_flow(cfg, QuantileState(g_smooth(u)), g_smooth_prime(u), path_index=p, record_stride=50)
        assert np.all(fl.z > 0)
        fd = fl.finite_difference()
        rel = np.abs(fl.z[-1, 1:-1] - fd) / np.abs(fd)
        assert rel.max() < 1e-2


# -- interpolation step --------------------------------------------------------------------

def test_interpolation_step_idiosyncratic_only():
    mu = HistogramMeasure([-1.0, 1.0], [1.0])
    z = np.array([0.1, 0.5])
    inc = SheetIncrement(np.zeros(2), np.zeros(2), 0.01)
    np.testing.assert_array_equal(step_interpolation(z, mu, None, NO_NOISE, inc, [0.3, -0.2]), z + [0.3, -0.2])


def test_interpolation_equal_copies_equal_updates():
    d = SpectralDecay(3.0, 5.0, 0.1)
    mu = HistogramMeasure([-1.0, 1.0], [1.0])
    inc = sheet_from_normals(NoiseStream(0).normals(2 * d.size)[0], d, 0.01)
    out = step_interpolation(np.array([0.2, 0.2]), mu, make_drift("b1"), d, inc, np.zeros(2))
    assert out[0] == out[1]


def test_interpolation_cross_copy_correlation():
    d = SpectralDecay.from_tail(2.0, 0.1)
    N = 10_000
    common = sheet_from_normals(NoiseStream(1).normals(2 * d.size, N), d, 1.0)
    idio = NoiseStream(1, tag="idio").normals(2, N)
    mu = HistogramMeasure([-1.0, 1.0], [1.0])
    z0 = np.zeros((N, 2))
    inc = step_interpolation(z0, mu, None, d, common, idio) - z0
    rho = np.corrcoef(inc[:, 0], inc[:, 1])[0, 1]
    s = d.norm_sq()
    assert rho == pytest.approx(s / (s + 1), rel=0.05)
