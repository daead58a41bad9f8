"""Spectral decay f_alpha, mass kernels phi / phi_M, smooth cutoffs and Fourier helpers.

Two Fourier conventions live here and they are deliberately different:

* the covariance kernel ``fourier_f_squared`` is the raw integral
  ``sum_j f(k_j)^2 cos(k_j x) dk`` with no normalisation;
* ``symmetric_ft`` / ``symmetric_ift`` / ``fourier_quadrature`` use the unitary
  convention ``F g(k) = (2 pi)^{-1/2} int e^{-ikx} g(x) dx`` so that
  ``||g||_2 = ||F g||_2``.

Hence ``fourier_f_squared(x) == sqrt(2 pi) * Re F(f^2)(x)`` in the unitary
convention.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Optional

import numpy as np
from scipy import integrate, special

from .errors import ConfigError, DomainError, GridError

SQRT_2PI = math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class SpectralDecay:
    """The kernel ``f(k) = scale * (1 + k^2)^(-alpha/2)`` on a midpoint k-grid.

    Nodes are ``k_j = -k_max + (j + 1/2) dk`` for ``j < 2 k_max / dk``.
    ``scale = 0`` represents ``f == 0``.
    """

    alpha: float
    k_max: float
    dk: float
    scale: float = 1.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if not (self.k_max > 0 and self.dk > 0):
            raise ConfigError("k_max and dk must be positive")
        ratio = self.k_max / self.dk
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio) or round(ratio) < 1:
            raise ConfigError(f"k_max/dk must be a positive integer, got {ratio}")
        if self.scale < 0:
            raise ConfigError("scale must be non-negative")

    @classmethod
    def from_tail(cls, alpha, dk, rel_tol=1e-6, scale=1.0):
        """Smallest ``k_max`` (a multiple of ``dk``) with tail mass of f^2 below ``rel_tol``."""
        total = f_squared_norm(alpha)
        n = 1
        while 2.0 * _tail_integral(alpha, n * dk) >= rel_tol * total:
            n = max(n + 1, int(n * 1.1))
        # back off to the smallest admissible multiple
        while n > 1 and 2.0 * _tail_integral(alpha, (n - 1) * dk) < rel_tol * total:
            n -= 1
        return cls(alpha=alpha, k_max=n * dk, dk=dk, scale=scale)

    @property
    def half_count(self) -> int:
        return int(round(self.k_max / self.dk))

    @property
    def size(self) -> int:
        return 2 * self.half_count

    @cached_property
    def nodes(self) -> np.ndarray:
        k = -self.k_max + (np.arange(self.size) + 0.5) * self.dk
        k.setflags(write=False)
        return k

    @cached_property
    def values(self) -> np.ndarray:
        v = eval_f(self, self.nodes)
        v.setflags(write=False)
        return v

    def norm_sq(self) -> float:
        """Discrete ``sum_j f(k_j)^2 dk``: the one-point variance rate."""
        return float(np.sum(self.values**2) * self.dk)

    def tail_fraction(self) -> float:
        if self.scale == 0:
            return 0.0
        return 2.0 * _tail_integral(self.alpha, self.k_max) / f_squared_norm(self.alpha)

    def gradient_norm_sq(self) -> float:
        """``sum_j k_j^2 f(k_j)^2 dk``, the Lipschitz scale of the diffusion coefficient."""
        return float(np.sum(self.nodes**2 * self.values**2) * self.dk)

    def stability_dt(self) -> float:
        """Heuristic step bound ``0.1 / sum k^2 f^2 dk`` for explicit Euler."""
        g = self.gradient_norm_sq()
        return math.inf if g == 0 else 0.1 / g

    def require_driving(self):
        """Raise unless ``alpha > 3/2`` (square integrability of <k> f(k))."""
        if self.scale > 0 and not self.alpha > 1.5:
            raise ConfigError(f"alpha={self.alpha} must exceed 3/2 to drive the dynamics")


def f_squared_norm(alpha) -> float:
    """Untruncated ``int (1+k^2)^(-alpha) dk = sqrt(pi) Gamma(alpha-1/2)/Gamma(alpha)``."""
    return math.sqrt(math.pi) * math.exp(special.gammaln(alpha - 0.5) - special.gammaln(alpha))


def _tail_integral(alpha, K):
    # one-sided int_K^inf (1+k^2)^(-alpha) dk via the incomplete beta function
    t = 1.0 / (1.0 + K * K)
    a, b = alpha - 0.5, 0.5
    return 0.5 * special.betainc(a, b, t) * special.beta(a, b)


def eval_f(decay: SpectralDecay, k):
    k = np.asarray(k, dtype=float)
    return decay.scale * (1.0 + k * k) ** (-0.5 * decay.alpha)


def fourier_f_squared(decay: SpectralDecay, x):
    """Raw covariance kernel ``sum_j f(k_j)^2 cos(k_j x) dk`` (no 1/sqrt(2 pi))."""
    x = np.asarray(x, dtype=float)
    w = decay.values**2 * decay.dk
    return np.cos(np.multiply.outer(x, decay.nodes)) @ w


# ----------------------------------------------------------------------------
# mass kernels


_VARIANTS = ("constant", "gaussian", "tabulated")


@dataclass(frozen=True)
class MassKernel:
    """Even, positive, non-increasing-on-[0, inf) mass kernel phi.

    ``M`` (optional) truncates: ``phi_M(x) = phi(min(|x|, M))``.  A Gaussian
    with ``M`` set is the truncated Gaussian.  Tabulated kernels are given by
    samples on ``[0, x_max]`` and linearly interpolated in ``|x|``.
    """

    variant: str = "constant"
    scale: float = 1.0
    M: Optional[float] = None
    table_x: Optional[tuple] = None
    table_y: Optional[tuple] = field(default=None, repr=False)

    def __post_init__(self):
        if self.variant not in _VARIANTS:
            raise ConfigError(f"unknown mass kernel variant {self.variant!r}")
        if self.scale <= 0:
            raise ConfigError("kernel scale must be positive")
        if self.M is not None and not self.M > 0:
            raise ConfigError("truncation M must be positive")
        if self.variant == "tabulated":
            xs = np.asarray(self.table_x, dtype=float)
            ys = np.asarray(self.table_y, dtype=float)
            if xs.ndim != 1 or xs.shape != ys.shape or xs.size < 2:
                raise ConfigError("tabulated kernel needs matching 1-d samples")
            if xs[0] != 0 or np.any(np.diff(xs) <= 0):
                raise ConfigError("table_x must start at 0 and increase strictly")
            if np.any(ys <= 0) or np.any(np.diff(ys) > 0):
                raise ConfigError("table_y must be positive and non-increasing")
            if self.M is not None and self.M > xs[-1]:
                raise ConfigError("truncation M lies outside the tabulated range")

    @classmethod
    def constant(cls):
        return cls("constant")

    @classmethod
    def gaussian(cls, scale=1.0):
        return cls("gaussian", scale=scale)

    @classmethod
    def truncated_gaussian(cls, scale=1.0, M=1.0):
        return cls("gaussian", scale=scale, M=M)

    @classmethod
    def tabulated(cls, xs, ys):
        return cls("tabulated", table_x=tuple(map(float, xs)), table_y=tuple(map(float, ys)))

    def truncated(self, M):
        return replace(self, M=None if M is None else float(M))

    def _abs_arg(self, x):
        ax = np.abs(np.asarray(x, dtype=float))
        if self.M is not None:
            ax = np.minimum(ax, self.M)
        return ax

    def __call__(self, x):
        ax = self._abs_arg(x)
        if self.variant == "constant":
            return np.ones_like(ax)
        if self.variant == "gaussian":
            s = self.scale
            return np.exp(-0.5 * (ax / s) ** 2) / (s * SQRT_2PI)
        xs, ys = np.asarray(self.table_x), np.asarray(self.table_y)
        if np.any(ax > xs[-1]):
            raise DomainError(f"tabulated kernel queried beyond |x| = {xs[-1]}")
        return np.interp(ax, xs, ys)

    def derivative(self, x):
        """phi'(x); zero on the flat part of a truncated kernel."""
        x = np.asarray(x, dtype=float)
        ax = np.abs(x)
        sgn = np.sign(x)
        if self.variant == "constant":
            d = np.zeros_like(ax)
        elif self.variant == "gaussian":
            s = self.scale
            d = -ax / s**2 * np.exp(-0.5 * (ax / s) ** 2) / (s * SQRT_2PI)
        else:
            xs, ys = np.asarray(self.table_x), np.asarray(self.table_y)
            if np.any(ax > xs[-1]):
                raise DomainError(f"tabulated kernel queried beyond |x| = {xs[-1]}")
            slopes = np.diff(ys) / np.diff(xs)
            idx = np.clip(np.searchsorted(xs, ax, side="right") - 1, 0, slopes.size - 1)
            d = slopes[idx]
        if self.M is not None:
            d = np.where(ax >= self.M, 0.0, d)
        return sgn * d

    def lower_bound(self, radius=math.inf) -> float:
        """Inf of phi over ``|x| <= radius`` (0 when unbounded below)."""
        r = radius if self.M is None else min(radius, self.M)
        if self.variant == "constant":
            return 1.0
        if math.isinf(r):
            return 0.0 if self.variant == "gaussian" else float(self.table_y[-1])
        return float(self(r))

    def sup_derivatives(self):
        """Bounds on (|phi|, |phi'|, |phi''|) over the real line."""
        if self.variant == "constant":
            return 1.0, 0.0, 0.0
        if self.variant == "gaussian":
            s = self.scale
            p0 = 1.0 / (s * SQRT_2PI)
            return p0, p0 * math.exp(-0.5) / s, p0 / s**2
        xs, ys = np.asarray(self.table_x), np.asarray(self.table_y)
        slopes = np.abs(np.diff(ys) / np.diff(xs))
        return float(ys[0]), float(slopes.max()), math.inf


def eval_phi(kernel: MassKernel, x):
    return kernel(x)


# ----------------------------------------------------------------------------
# cutoff


def quintic_ramp(t):
    t = np.clip(np.asarray(t, dtype=float), 0.0, 1.0)
    return t * t * t * (10.0 - 15.0 * t + 6.0 * t * t)


def smooth_ramp(t):
    """The C-infinity ramp ``e^{-1/t} / (e^{-1/t} + e^{-1/(1-t)})``."""
    t = np.clip(np.asarray(t, dtype=float), 0.0, 1.0)
    with np.errstate(divide="ignore", over="ignore"):
        a = np.where(t > 0, np.exp(-1.0 / np.where(t > 0, t, 1.0)), 0.0)
        b = np.where(t < 1, np.exp(-1.0 / np.where(t < 1, 1.0 - t, 1.0)), 0.0)
    return a / (a + b)


_RAMPS = {"quintic": quintic_ramp, "smooth": smooth_ramp}
# sup |Psi'|, sup |Psi''| for each ramp
RAMP_DERIVATIVE_BOUNDS = {"quintic": (15.0 / 8.0, 10.0 / math.sqrt(3.0)), "smooth": (2.0, 9.0)}


@dataclass(frozen=True)
class CutoffProfile:
    a: float
    b: float
    ramp: str = "quintic"

    def __post_init__(self):
        if not self.a < self.b:
            raise ConfigError(f"cutoff needs a < b, got a={self.a}, b={self.b}")
        if self.ramp not in _RAMPS:
            raise ConfigError(f"unknown ramp {self.ramp!r}")

    def __call__(self, y):
        return eval_cutoff(self, y)


def eval_cutoff(profile: CutoffProfile, y):
    """1 on [a,b]; Psi(y-(a-1)) on (a-1,a); Psi(b+1-y) on (b,b+1); 0 elsewhere."""
    y = np.asarray(y, dtype=float)
    psi = _RAMPS[profile.ramp]
    a, b = profile.a, profile.b
    out = np.where((y >= a) & (y <= b), 1.0, 0.0)
    left = (y > a - 1.0) & (y < a)
    right = (y > b) & (y < b + 1.0)
    out = np.where(left, psi(y - (a - 1.0)), out)
    return np.where(right, psi(b + 1.0 - y), out)


def cutoff_batch(y, a, b, ramp="quintic"):
    """Vectorised ``eta_{a,b}(y)`` with per-row bounds ``a``, ``b`` of shape ``y.shape[:-1]``."""
    psi = _RAMPS[ramp]
    a = np.asarray(a, dtype=float)[..., None]
    b = np.asarray(b, dtype=float)[..., None]
    out = np.where((y >= a) & (y <= b), 1.0, 0.0)
    out = np.where((y > a - 1.0) & (y < a), psi(y - (a - 1.0)), out)
    return np.where((y > b) & (y < b + 1.0), psi(b + 1.0 - y), out)


# ----------------------------------------------------------------------------
# Fourier utilities


def matched_k_grid(n, dx):
    """Frequencies paired with an ``n``-point x-grid of spacing ``dx`` (``dk dx = 2 pi / n``)."""
    dk = 2.0 * math.pi / (n * dx)
    return (np.arange(n) - n // 2) * dk


def symmetric_ft(values, x0, dx):
    """Unitary transform of samples on ``x_n = x0 + n dx``.

    Returns ``(k, F)`` with ``F(k_m) = (2 pi)^{-1/2} sum_n v_n e^{-i k_m x_n} dx``
    on the matched grid; Parseval holds exactly:
    ``sum |v|^2 dx == sum |F|^2 dk``.
    """
    v = np.asarray(values)
    n = v.shape[-1]
    k = matched_k_grid(n, dx)
    F = np.fft.fftshift(np.fft.fft(v, axis=-1), axes=-1) * dx / SQRT_2PI
    return k, F * np.exp(-1j * k * x0)


def symmetric_ift(F, x0, dx):
    """Inverse of :func:`symmetric_ft` back onto ``x_n = x0 + n dx``."""
    F = np.asarray(F)
    n = F.shape[-1]
    k = matched_k_grid(n, dx)
    G = np.fft.ifftshift(F * np.exp(1j * k * x0), axes=-1)
    return np.fft.ifft(G, axis=-1) * n * (2.0 * math.pi / (n * dx)) / SQRT_2PI


def trapezoid_weights(x):
    x = np.asarray(x, dtype=float)
    w = np.empty_like(x)
    d = np.diff(x)
    w[0], w[-1] = d[0] / 2, d[-1] / 2
    w[1:-1] = (d[:-1] + d[1:]) / 2
    return w


def fourier_quadrature(values, x, k, sign=-1):
    """Unitary transform at arbitrary frequencies by trapezoid quadrature.

    ``sign=-1`` gives F, ``sign=+1`` gives F^{-1}.  ``values`` may carry
    leading batch axes; the last axis runs over ``x``.
    """
    x = np.asarray(x, dtype=float)
    E = np.exp(sign * 1j * np.multiply.outer(x, np.asarray(k, dtype=float)))
    E *= (trapezoid_weights(x) / SQRT_2PI)[:, None]
    return np.asarray(values) @ E


def spectral_synthesis(x, k0, dk, c_re, c_im, block=None):
    """Evaluate ``sum_j cos(k_j x) c_re[j] + sin(k_j x) c_im[j]`` on ``k_j = k0 + j dk``.

    ``x`` has shape ``(..., n)``; the coefficients ``(..., K)`` broadcast over the
    leading axes.  The exponentials are factored as ``e^{i k0 x} e^{i a B dk x} e^{i b dk x}``
    so that only ``K/B + B`` complex exponentials are taken per point and the
    rest is a batched matrix product.
    """
    x = np.asarray(x, dtype=float)
    c = np.asarray(c_re, dtype=float) - 1j * np.asarray(c_im, dtype=float)
    K = c.shape[-1]
    if K == 0:
        return np.zeros(np.broadcast_shapes(x.shape, c.shape[:-1] + (1,)))
    B = block or max(1, int(round(math.sqrt(K))))
    A = -(-K // B)
    if A * B != K:
        pad = [(0, 0)] * (c.ndim - 1) + [(0, A * B - K)]
        c = np.pad(c, pad)
    C = c.reshape(c.shape[:-1] + (A, B))
    xe = x[..., None]
    E1 = np.exp(1j * xe * (k0 + np.arange(A) * (B * dk)))
    E2 = np.exp(1j * xe * (np.arange(B) * dk))
    if C.ndim == 2:
        inner = E2 @ C.T
    else:
        inner = E2 @ np.swapaxes(C, -1, -2)
    return np.einsum("...a,...a->...", E1, inner).real


def require_nyquist(dx, k_max):
    if dx * k_max > math.pi * (1 + 1e-12):
        raise GridError(f"x-grid too coarse: dx*k_max = {dx * k_max:.4g} > pi")


def f_floor_check(decay: SpectralDecay, floor=1e-12):
    """Reject grids on which ``1/f`` would be taken below the underflow floor."""
    from .errors import IllConditionedInversion

    if decay.scale == 0 or eval_f(decay, decay.k_max) < floor:
        raise IllConditionedInversion(
            f"f(k_max) = {float(eval_f(decay, decay.k_max)):.3g} below floor {floor}; "
            "reduce k_max or alpha"
        )


def adaptive_f_squared_cosine(alpha, x, scale=1.0):
    """Untruncated ``int scale^2 (1+k^2)^(-alpha) cos(kx) dk`` by adaptive quadrature."""
    if x == 0:
        return scale**2 * f_squared_norm(alpha)
    val, _ = integrate.quad(lambda k: (1 + k * k) ** (-alpha), 0, np.inf, weight="cos", wvar=abs(x))
    return 2.0 * scale**2 * val
