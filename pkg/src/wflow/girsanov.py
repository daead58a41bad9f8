"""Fourier inversion of drifts into sheet shifts, and Girsanov weights.

Given a target ``Phi``, the shift ``h = h_re + i h_im`` solves

    sum_j f(k_j) [cos(k_j x) h_re(k_j) + sin(k_j x) h_im(k_j)] dk = Phi(x),

i.e. ``int f(k) Re(e^{-ikx} h(k)) dk = Phi(x)``.  With the unitary transform
``F^{-1} Phi(k) = (2 pi)^{-1/2} int e^{ikx} Phi(x) dx`` the solution is
``h = F^{-1} Phi / (sqrt(2 pi) f)``.  For constant mass ``Phi = B``; for a
general mass ``Phi = B * eta_{y(0), y(1)} * sqrt(m)`` where ``m(x)`` is the
mass of a particle sitting at ``x``.

Replacing ``dW`` by ``dW - h dk dt`` turns the driftless system into the
drifted one, and the density of that change of measure is
``exp(sum h . dW - 1/2 int |h|^2 dk dt)``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .drift import DriftSpec, RegularizedLambda, SpectralDriftSpec, bracket, regularize_lambda
from .errors import GridError, NovikovBoundWarning
from .kernels import (
    RAMP_DERIVATIVE_BOUNDS,
    SQRT_2PI,
    CutoffProfile,
    MassKernel,
    SpectralDecay,
    cutoff_batch,
    eval_cutoff,
    f_floor_check,
    fourier_quadrature,
    require_nyquist,
    spectral_synthesis,
    trapezoid_weights,
)
from .noise import SheetIncrement
from .state import HistogramMeasure, QuantileState

# sup |Psi'''| for the quintic ramp; the smooth ramp's value is a numerical bound
_RAMP_THIRD = {"quintic": 60.0, "smooth": 60.0}


@dataclass(frozen=True)
class InversionResult:
    h_re: np.ndarray
    h_im: np.ndarray
    l2_norm_sq: float
    residual_sup: float
    k: Optional[np.ndarray] = None

    @classmethod
    def from_h(cls, h_re, h_im, dk, residual_sup=0.0, k=None):
        l2 = float(np.sum(h_re**2 + h_im**2) * dk)
        return cls(np.asarray(h_re), np.asarray(h_im), l2, float(residual_sup), k)


@dataclass(frozen=True)
class GirsanovLedger:
    log_weight: float = 0.0
    int_h_sq: float = 0.0
    novikov_bound: float = math.inf

    @property
    def weight(self) -> float:
        return math.exp(self.log_weight)


def uniform_x_grid(lo, hi, k_max, oversample=2.0):
    """Uniform grid covering ``[lo, hi]`` with ``dx = pi / (oversample * k_max)``."""
    dx = math.pi / (oversample * k_max)
    N = int(math.ceil((hi - lo) / dx)) + 1
    return lo + dx * np.arange(N)


def _invert_samples(Phi, x, decay: SpectralDecay):
    x = np.asarray(x, dtype=float)
    dx = np.diff(x)
    if not np.allclose(dx, dx[0], rtol=1e-9, atol=0):
        raise GridError("x-grid must be uniform")
    require_nyquist(dx[0], decay.k_max)
    f_floor_check(decay)
    F = fourier_quadrature(Phi, x, decay.nodes, sign=+1)
    h = F / (SQRT_2PI * decay.values)
    return h.real, h.imag


def reconstruct(h_re, h_im, decay: SpectralDecay, x):
    """``sum_j f(k_j)[cos(k_j x) h_re + sin(k_j x) h_im] dk``."""
    w = decay.values * decay.dk
    return spectral_synthesis(np.asarray(x, dtype=float), decay.nodes[0], decay.dk, w * h_re, w * h_im)


def invert_constant_mass(B_values, x, decay: SpectralDecay, support=None) -> InversionResult:
    """Invert drift samples ``B(x)`` taken on a uniform grid that extends past their support.

    ``support=(a, b)`` restricts the residual to grid points inside ``[a, b]``;
    by default the residual runs over the whole grid.
    """
    B = np.asarray(B_values, dtype=float)
    x = np.asarray(x, dtype=float)
    if not np.any(B):
        K = decay.size
        return InversionResult.from_h(np.zeros(K), np.zeros(K), decay.dk, 0.0, decay.nodes)
    h_re, h_im = _invert_samples(B, x, decay)
    sel = np.ones_like(x, dtype=bool) if support is None else (x >= support[0]) & (x <= support[1])
    res = np.max(np.abs(B[sel] - reconstruct(h_re, h_im, decay, x[sel])))
    return InversionResult.from_h(h_re, h_im, decay.dk, res, decay.nodes)


def mass_at(x, y, kernel: MassKernel):
    """Mass ``(1/n) sum_j phi(x - y_j)`` seen by a particle at ``x``; batched over leading axes."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if kernel.variant == "constant":
        return np.ones(np.broadcast_shapes(x.shape, y.shape[:-1] + (1,)))
    return kernel(x[..., :, None] - y[..., None, :]).mean(axis=-1)


def general_target(drift: DriftSpec, y, kernel: MassKernel, x, ramp="quintic"):
    """``Phi(x) = B(x, y) eta_{y(0), y(1)}(x) sqrt(m(x))`` (batched over rows of ``y``)."""
    y = np.asarray(y, dtype=float)
    X = np.broadcast_to(x, y.shape[:-1] + (np.shape(x)[-1],))
    eta = cutoff_batch(X, y[..., 0], y[..., -1], ramp)
    B = drift(X, y)
    return B * eta * np.sqrt(mass_at(X, y, kernel))


def invert_general(drift: DriftSpec, y: QuantileState, kernel: MassKernel, profile: Optional[CutoffProfile],
                   decay: SpectralDecay, x=None) -> InversionResult:
    """General-mass inversion with the cutoff placed at ``[y(0), y(1)]``.

    The residual is ``max_i |B(y_i) - m_i^{-1/2} recon(y_i)|`` over the particles.
    """
    v = np.asarray(y.values, dtype=float)
    if np.any(np.diff(v) <= 0):
        raise GridError("invert_general needs a strictly increasing state")
    if profile is None:
        profile = CutoffProfile(v[0], v[-1])
    a, b = profile.a, profile.b
    if x is None:
        x = uniform_x_grid(a - 1.5, b + 1.5, decay.k_max)
    x = np.asarray(x, dtype=float)
    if x[0] > a - 1 or x[-1] < b + 1:
        raise GridError(f"x-grid [{x[0]:.3g}, {x[-1]:.3g}] does not cover the cutoff support")
    Phi = drift(x, v) * eval_cutoff(profile, x) * np.sqrt(mass_at(x, v, kernel))
    K = decay.size
    if not np.any(Phi):
        return InversionResult.from_h(np.zeros(K), np.zeros(K), decay.dk, 0.0, decay.nodes)
    h_re, h_im = _invert_samples(Phi, x, decay)
    m = mass_at(v, v, kernel)
    rec = reconstruct(h_re, h_im, decay, v) / np.sqrt(m)
    res = float(np.max(np.abs(drift(v, v) - rec)))
    return InversionResult.from_h(h_re, h_im, decay.dk, res, decay.nodes)


def invert_interpolation_split(spec: SpectralDriftSpec, mu: HistogramMeasure,
                               reg: Optional[RegularizedLambda] = None) -> InversionResult:
    """``h = f^{-1} <k>^{-eta} (lambda - lambda_tilde)``: carries the non-Lipschitz part b - b_tilde."""
    if reg is None:
        reg = regularize_lambda(spec)
    decay = spec.grid
    f_floor_check(decay)
    lre, lim = spec.lambdas(mu)
    tre, tim = reg.lambdas(mu)
    scale = bracket(decay.nodes) ** (-spec.eta) / decay.values
    h_re, h_im = scale * (lre - tre), scale * (lim - tim)
    x = mu.centers
    w = bracket(decay.nodes) ** (-spec.eta) * decay.dk
    diff = spectral_synthesis(x, decay.nodes[0], decay.dk, w * (lre - tre), w * (lim - tim))
    res = float(np.max(np.abs(diff - reconstruct(h_re, h_im, decay, x))))
    return InversionResult.from_h(h_re, h_im, decay.dk, res, decay.nodes)


def accumulate(ledger: GirsanovLedger, h: InversionResult, inc: SheetIncrement) -> GirsanovLedger:
    """Add one step's ``sum h . dW - 1/2 |h|^2 dt`` to the log-weight."""
    lw = ledger.log_weight + float(np.sum(h.h_re * inc.dW_re + h.h_im * inc.dW_im)) - 0.5 * h.l2_norm_sq * inc.dt
    ih = ledger.int_h_sq + h.l2_norm_sq * inc.dt
    if ih > ledger.novikov_bound:
        warnings.warn(f"int |h|^2 = {ih:.4g} exceeds declared bound {ledger.novikov_bound:.4g}",
                      NovikovBoundWarning, stacklevel=2)
    return replace(ledger, log_weight=lw, int_h_sq=ih)


# ----------------------------------------------------------------------------
# a-priori bounds


def _sqrt_mass_sups(kernel: MassKernel, m_low, order):
    """Bounds on ``|d^i sqrt(m)|`` from sups of phi derivatives and a floor on m."""
    if kernel.variant == "constant":
        return [1.0] + [0.0] * order
    p = _kernel_sups(kernel, order)
    g = [math.sqrt(p[0]), 0.5 * m_low**-0.5, 0.25 * m_low**-1.5, 0.375 * m_low**-2.5]
    out = [g[0], g[1] * p[1], g[2] * p[1] ** 2 + g[1] * p[2],
           g[3] * p[1] ** 3 + 3 * g[2] * p[1] * p[2] + g[1] * p[3]]
    return out[: order + 1]


def _kernel_sups(kernel: MassKernel, order):
    if kernel.variant == "gaussian":
        from numpy.polynomial import hermite_e as H

        t = np.linspace(-8, 8, 20001)
        s = kernel.scale
        base = np.exp(-0.5 * t**2) / math.sqrt(2 * math.pi)
        return [float(np.max(np.abs(H.hermeval(t, [0] * i + [1]) * base))) / s ** (i + 1) for i in range(4)]
    p0, p1, p2 = kernel.sup_derivatives()
    return [p0, p1, p2, math.inf]


def novikov_constant(drift: DriftSpec, kernel: MassKernel, decay: SpectralDecay, spread: float,
                     ramp="quintic") -> float:
    """Bound on ``sum |h|^2 dk`` for a state of spread ``M = y(1) - y(0)``.

    Uses ``|h|^2 = <k>^{2 alpha} |F Phi|^2 / (2 pi s^2) <= (1+k^2)^J |F Phi|^2 / (2 pi s^2)``
    with ``J = ceil(alpha)``, Plancherel, Leibniz on ``B eta sqrt(m)`` and sup bounds
    on each factor over the cutoff support of length ``M + 2``.
    """
    J = int(math.ceil(decay.alpha))
    C = list(drift.bounds(spread))
    C = [C[i] if i < len(C) else math.inf for i in range(J + 1)]
    e1, e2 = RAMP_DERIVATIVE_BOUNDS[ramp]
    E = [1.0, e1, e2, _RAMP_THIRD[ramp]][: J + 1] + [math.inf] * max(0, J - 3)
    m_low = kernel.lower_bound(spread + 1.0)
    R = _sqrt_mass_sups(kernel, m_low, min(J, 3)) + [math.inf] * max(0, J - 3)
    total = 0.0
    for i in range(J + 1):
        S = 0.0
        for a_ in range(i + 1):
            for b_ in range(i + 1 - a_):
                c_ = i - a_ - b_
                coef = math.factorial(i) / (math.factorial(a_) * math.factorial(b_) * math.factorial(c_))
                term = C[a_] * E[b_] * R[c_]
                S += 0.0 if coef == 0 or (term != term) else coef * term
        total += math.comb(J, i) * (spread + 2.0) * S**2
    return total / (2 * math.pi * decay.scale**2)


# ----------------------------------------------------------------------------
# batched provider for the ensemble engine


class GeneralInversionProvider:
    """Per-step ``(h_re, h_im)`` for a block of paths, for use as ``h_provider``.

    All paths of the block share one uniform x-grid covering every cutoff support.
    """

    def __init__(self, drift: DriftSpec, kernel: MassKernel, decay: SpectralDecay, ramp="quintic", oversample=2.0):
        f_floor_check(decay)
        self.drift, self.kernel, self.decay, self.ramp, self.oversample = drift, kernel, decay, ramp, oversample

    def __call__(self, Y, m=None):
        d = self.decay
        x = uniform_x_grid(float(Y[:, 0].min()) - 1.0, float(Y[:, -1].max()) + 1.0, d.k_max, self.oversample)
        Phi = general_target(self.drift, Y, self.kernel, x, self.ramp)
        E = np.exp(1j * np.multiply.outer(x, d.nodes)) * (trapezoid_weights(x) / SQRT_2PI)[:, None]
        h = (Phi @ E) / (SQRT_2PI * d.values)
        return h.real, h.imag
