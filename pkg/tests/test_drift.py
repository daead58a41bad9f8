import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wflow.checks import loglog_slope, measure_with_mass, regularization_setup
from wflow.drift import (
    ConstantFunctional, DriftSpec, HolderCusp, MeasureFamily, RegularizationParams, SpectralDriftSpec, bracket,
    eval_drift, holder_infconv, lipschitz_exponent_gap, make_drift, mixture_family, regularize_lambda,
    synthesize_spectral_b,
)
from wflow.errors import ConfigError
from wflow.kernels import SpectralDecay
from wflow.state import HistogramMeasure, QuantileState

GRID = SpectralDecay(2.0, 20.0, 0.5)


def line_family(edges, n=1001):
    """Measures ``measure_with_mass(s)``: along this line the finite minimisation is exact."""
    s = np.linspace(0, 1, n)
    return s, MeasureFamily(edges, np.stack([measure_with_mass(edges, x).probs for x in s]))


# -- drift evaluation ------------------------------------------------------------

def test_peano_examples():
    p = DriftSpec("peano")
    assert eval_drift(p, 0.3, QuantileState(np.array([-1.0, 1.0]))) == 0
    assert eval_drift(p, 0.3, QuantileState(np.array([1.0, 1.0]))) == pytest.approx(2.0)
    assert eval_drift(p, 0.0, np.array([-1.0, -1.0])) == pytest.approx(-2.0)


def test_b2_identity_mean():
    b2 = DriftSpec("b2", a=lambda s: s)
    assert eval_drift(b2, 5.0, QuantileState(np.array([0.0, 2.0]))) == pytest.approx(1.0)
    h = HistogramMeasure([-1.0, 1.0, 3.0], [0.5, 0.5])
    assert eval_drift(b2, 5.0, h) == pytest.approx(1.0)


def test_b1_interaction_average():
    b1 = DriftSpec("b1", a=lambda x, y: y - x)
    mu = np.array([0.0, 1.0, 2.0])
    np.testing.assert_allclose(eval_drift(b1, np.array([0.0, 1.0]), mu), [1.0, 0.0])


def test_batched_measures_broadcast():
    b2 = make_drift("b2", "tanh")
    Y = np.array([[0.0, 1.0], [2.0, 4.0]])
    out = eval_drift(b2, Y, Y)
    np.testing.assert_allclose(out, np.tanh([[0.5, 0.5], [3.0, 3.0]]))


def test_measure_independence_flags():
    assert DriftSpec.zero().measure_independent
    assert make_drift("constant", constant=1.0).measure_independent
    assert not make_drift("b2").measure_independent


def test_bad_drift_specs():
    with pytest.raises(ConfigError):
        DriftSpec("b1")
    with pytest.raises(ConfigError):
        DriftSpec("nope")
    with pytest.raises(ConfigError):
        DriftSpec("b4", a=np.tanh, eta_hat=0.6)


def test_b4_support_bound():
    rng = np.random.default_rng(0)
    b4 = make_drift("b4", scale=1.3, eta_hat=0.3, width=0.7)
    x = np.linspace(-3, 3, 61)
    for M in (0.5, 1.0, 4.0):
        for _ in range(20):
            atoms = np.sort(rng.uniform(0, M, 16))
            assert np.max(np.abs(eval_drift(b4, x, atoms))) <= 1.3 * M ** (2 * 0.3) + 1e-12


def test_drift_bounds_dominate_samples():
    b3 = make_drift("b3", "cos", scale=1.0, width=0.5)
    x = np.linspace(-4, 4, 4001)
    mu = np.linspace(-1, 1, 9)
    C = b3.bounds(2.0)
    vals = eval_drift(b3, x, mu)
    assert np.max(np.abs(vals)) <= C[0] + 1e-12
    assert np.max(np.abs(np.gradient(vals, x))) <= C[1] + 1e-3


# -- spectral class ----------------------------------------------------------------

def spectral(delta=2.0 / 3.0, eta=1.5, u=None, imag=False):
    return SpectralDriftSpec.with_envelope(eta, delta, GRID, 2.0, u or HolderCusp(-0.5, 0.5, 0.5, delta), imag)


def test_zero_lambda_gives_zero_drift():
    s = spectral(u=ConstantFunctional(0.0))
    assert np.all(synthesize_spectral_b(s, np.linspace(-2, 2, 5), None) == 0)


def test_constant_lambda_at_origin():
    s = spectral(u=ConstantFunctional(1.0))
    expected = np.sum(bracket(GRID.nodes) ** (-1.5) * s.Lambda * GRID.dk)
    assert synthesize_spectral_b(s, 0.0, None) == pytest.approx(expected, rel=1e-13)
    assert expected == pytest.approx(s.holder_constant(), rel=1e-13)


def test_spectral_holder_in_tv():
    rng = np.random.default_rng(1)
    s = spectral(imag=True)
    edges = np.linspace(-2, 2, 9)
    x = np.linspace(-3, 3, 13)
    C = s.holder_constant()
    for _ in range(100):
        p, q = (HistogramMeasure(edges, rng.dirichlet(np.ones(8))) for _ in range(2))
        tv = np.abs(p.probs - q.probs).sum()
        diff = np.abs(synthesize_spectral_b(s, x, p) - synthesize_spectral_b(s, x, q))
        assert diff.max() <= C * tv ** s.delta + 1e-12


def test_spectral_validation():
    spectral(delta=2 / 3, eta=1.5).validate()
    with pytest.raises(ConfigError):
        spectral(delta=0.5, eta=0.5).validate()  # eta <= 3/2 (1 - delta)
    with pytest.raises(ConfigError):
        spectral(delta=0.5, eta=0.8).validate()  # alpha > eta / (1 - delta)
    with pytest.raises(ConfigError):
        SpectralDriftSpec(1.5, 1.5, GRID, np.ones(GRID.size), ConstantFunctional(1.0))


def test_lipschitz_exponent_sign():
    for delta, eta in ((2 / 3, 1.5), (0.9, 1.0), (1.0, 2.0)):
        s = spectral(delta, eta).validate()
        gap = lipschitz_exponent_gap(s)
        assert gap >= 0
        assert gap == pytest.approx((eta - s.alpha * (1 - delta)) / delta)


# -- inf-convolution ----------------------------------------------------------------------

def test_infconv_constant_functional():
    mu = HistogramMeasure(np.linspace(0, 1, 5), [0.1, 0.2, 0.3, 0.4])
    assert holder_infconv(ConstantFunctional(-0.3), mu, 0.1) == pytest.approx(-0.3)


def test_infconv_infinite_eps_is_family_minimum():
    edges, u = regularization_setup()
    mu = measure_with_mass(edges, 0.2)
    fam = mixture_family(mu)
    brute = min(float(u(m)) for m in fam.members())
    assert holder_infconv(u, mu, math.inf, family=fam) == pytest.approx(brute)
    assert holder_infconv(u, mu, math.inf, family=fam) == pytest.approx(-1.0 * 0.5 ** (2 / 3), rel=1e-3)


def test_infconv_argmin_is_brute_force():
    edges, u = regularization_setup()
    mu = measure_with_mass(edges, 0.45)
    fam = mixture_family(mu, ts=np.geomspace(1e-3, 1, 40))
    val, idx = holder_infconv(u, mu, 0.05, family=fam, return_argmin=True)
    members = fam.members()
    objs = [float(u(m)) + np.abs(m.probs - mu.probs).sum() ** 2 / 0.4 for m in members]
    assert val == pytest.approx(min(objs), abs=1e-12)
    assert objs[int(idx)] == pytest.approx(min(objs), abs=1e-12)


def test_infconv_empty_family():
    edges, u = regularization_setup()
    mu = measure_with_mass(edges, 0.5)
    with pytest.raises(ConfigError):
        holder_infconv(u, mu, 0.1, family=MeasureFamily(edges, np.zeros((0, 10))))


@settings(max_examples=40, deadline=None)
@given(s=st.floats(0.0, 1.0), e1=st.floats(1e-4, 10.0), e2=st.floats(1e-4, 10.0))
def test_infconv_below_u_and_monotone_in_eps(s, e1, e2):
    edges, u = regularization_setup()
    mu = measure_with_mass(edges, s)
    lo, hi = sorted((e1, e2))
    a, b = holder_infconv(u, mu, np.array([lo, hi]))
    assert a <= float(u(mu)) + 1e-15
    assert b <= a + 1e-15


@settings(max_examples=60, deadline=None)
@given(i=st.integers(0, 1000), j=st.integers(0, 1000), log_eps=st.floats(-4, 1))
def test_infconv_stays_holder(i, j, log_eps):
    edges, u = regularization_setup()
    s, fam = line_family(edges)
    eps = 10.0**log_eps
    a = holder_infconv(u, measure_with_mass(edges, s[i]), eps, family=fam)
    b = holder_infconv(u, measure_with_mass(edges, s[j]), eps, family=fam)
    tv = 2 * abs(s[i] - s[j])
    assert abs(a - b) <= tv ** (2 / 3) + 1e-12


def test_infconv_gap_exponent_small():
    edges, u = regularization_setup()
    mu = measure_with_mass(edges, 0.5)
    eps = 2.0 ** -np.arange(1, 9)
    gap = float(u(mu)) - holder_infconv(u, mu, eps)
    d = 2 / 3
    assert abs(loglog_slope(eps, gap) - d / (2 - d)) <= 0.15


# -- regularized lambda --------------------------------------------------------------------

def test_regularization_parameters():
    s = spectral()
    p = RegularizationParams.from_spec(s)
    assert p.theta == pytest.approx((2.0 - 1.5) / (2 / 3))
    np.testing.assert_allclose(p.eps, bracket(GRID.nodes) ** (-p.theta * (2 - 2 / 3)))
    one = RegularizationParams.from_spec(spectral(1.0, 1.5))
    assert one.theta == pytest.approx(2.0 - 1.5)
    assert one.lipschitz_exponent(1.0) == 0
    with pytest.raises(ConfigError):
        RegularizationParams.from_spec(spectral(2 / 3, 2.5))


def test_measure_independent_lambda_unchanged():
    s = spectral(u=ConstantFunctional(0.7))
    reg = regularize_lambda(s)
    mu = HistogramMeasure([0.0, 1.0], [1.0])
    np.testing.assert_array_equal(reg.lambdas(mu)[0], s.lambdas(mu)[0])


def test_regularized_lambda_lipschitz_profile():
    edges, _ = regularization_setup()
    s = SpectralDriftSpec.with_envelope(1.5, 2 / 3, GRID, 2.0, HolderCusp(0.0, 0.5, 0.5, 2 / 3)).validate()
    reg = regularize_lambda(s)
    ss = np.linspace(0.3, 0.7, 81)
    L = np.array([reg.lambdas(measure_with_mass(edges, x))[0] for x in ss])
    ratio = np.max(np.abs(np.diff(L, axis=0)) / (2 * np.diff(ss))[:, None], axis=0)
    C = ratio / (s.Lambda * bracket(GRID.nodes) ** reg.params.lipschitz_exponent(s.delta))
    assert C.max() <= 1.0
    assert C.max() / C.min() < 2.0


def test_regularized_drift_lipschitz_in_tv():
    edges, _ = regularization_setup()
    s = SpectralDriftSpec.with_envelope(1.5, 2 / 3, GRID, 2.0, HolderCusp(0.0, 0.5, 0.5, 2 / 3)).validate()
    reg = regularize_lambda(s)
    L = reg.lipschitz_constant()
    x = np.linspace(-2, 2, 9)
    rng = np.random.default_rng(3)
    for _ in range(25):
        a, b = rng.uniform(0.05, 0.95, 2)
        ba = synthesize_spectral_b(reg, x, measure_with_mass(edges, a))
        bb = synthesize_spectral_b(reg, x, measure_with_mass(edges, b))
        assert np.max(np.abs(ba - bb)) <= L * 2 * abs(a - b) + 1e-12
