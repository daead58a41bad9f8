"""Drift families b(x, mu) and the Hoelder-to-Lipschitz inf-convolution regulariser.

Measures are passed as one of

* a :class:`~wflow.state.QuantileState` (atoms ``y_i`` with weight ``1/n``),
* a :class:`~wflow.state.HistogramMeasure` (atoms at bin centres),
* a raw array of shape ``(..., n)`` of equally weighted atoms; leading axes
  are batch axes that broadcast against ``x``.

Total variation follows the factor-2 convention of :mod:`wflow.state`, so a
maximal coupling of ``mu`` and ``nu`` disagrees with probability
``d_TV(mu, nu) / 2``.  That is why the inf-convolution penalty
``(P[X != Y])^2 / (2 eps)`` becomes ``d_TV^2 / (8 eps)`` below.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError
from .kernels import SpectralDecay, spectral_synthesis
from .state import HistogramMeasure, QuantileState

_VARIANTS = ("zero", "constant", "b1", "b2", "b3", "b4", "peano", "spectral")


def _atoms(mu):
    if isinstance(mu, HistogramMeasure):
        return mu.centers, mu.probs
    if isinstance(mu, QuantileState):
        return mu.values, None
    return np.asarray(mu, dtype=float), None


def _expect(vals, w):
    return vals.mean(axis=-1) if w is None else vals @ w


@dataclass(frozen=True)
class DriftSpec:
    """Tagged drift family.

    ``b1``: ``int a(x, y) mu(dy)``; ``b2``: ``a(E Y)``; ``b3``: ``a(x, E psi(Y))``;
    ``b4``: ``a(x) Var(Y)^eta_hat`` with ``eta_hat < 1/2``; ``peano``:
    ``2 sign(E Y) |E Y|^{1/2}``; ``spectral``: see :class:`SpectralDriftSpec`.

    ``derivative_sups[i]`` bounds ``|d^i a / dx^i|`` (first argument) and feeds
    :meth:`bounds`.
    """

    variant: str
    a: Optional[Callable] = None
    psi: Optional[Callable] = None
    eta_hat: float = 0.25
    constant: float = 0.0
    derivative_sups: tuple = ()
    spectral: Optional["SpectralDriftSpec"] = None
    name: str = ""

    def __post_init__(self):
        if self.variant not in _VARIANTS:
            raise ConfigError(f"unknown drift variant {self.variant!r}")
        if self.variant in ("b1", "b2", "b3", "b4") and self.a is None:
            raise ConfigError(f"drift {self.variant} needs a function a")
        if self.variant == "b3" and self.psi is None:
            raise ConfigError("drift b3 needs psi")
        if self.variant == "b4" and not 0 <= self.eta_hat < 0.5:
            raise ConfigError("b4 needs 0 <= eta_hat < 1/2")
        if self.variant == "spectral" and self.spectral is None:
            raise ConfigError("spectral drift needs a SpectralDriftSpec")

    @classmethod
    def zero(cls):
        return cls("zero")

    @property
    def measure_independent(self) -> bool:
        if self.variant in ("zero", "constant"):
            return True
        if self.variant == "spectral":
            return self.spectral.u.constant_value is not None
        return False

    def __call__(self, x, mu):
        return eval_drift(self, x, mu)

    def bounds(self, M: float) -> np.ndarray:
        """``C_i(M)``: bounds on ``|d^i b / dx^i|`` over measures with support length <= M."""
        v = self.variant
        sups = np.asarray(self.derivative_sups, dtype=float)
        if v == "zero":
            return np.zeros(3)
        if v == "constant":
            return np.array([abs(self.constant), 0.0, 0.0])
        if v in ("b1", "b3"):
            return sups
        if v == "b2":
            return np.concatenate([sups[:1], np.zeros(max(len(sups) - 1, 2))])
        if v == "b4":
            return sups * M ** (2 * self.eta_hat)
        if v == "peano":
            # the mean is not controlled by the support length
            return np.array([math.inf])
        return self.spectral.derivative_bounds()


def eval_drift(spec: DriftSpec, x, mu):
    """Evaluate ``b(x, mu)``; ``x`` broadcasts against the measure's batch axes."""
    x = np.asarray(x, dtype=float)
    v = spec.variant
    if v == "zero":
        return np.zeros(np.broadcast_shapes(x.shape, _batch_shape(mu, x)))
    if v == "constant":
        return np.full(np.broadcast_shapes(x.shape, _batch_shape(mu, x)), float(spec.constant))
    if v == "spectral":
        return synthesize_spectral_b(spec.spectral, x, mu)
    atoms, w = _atoms(mu)
    if v == "b1":
        vals = spec.a(x[..., None], atoms[..., None, :]) if x.ndim else spec.a(x, atoms)
        return _expect(vals, w)
    if v == "peano":
        m = _expect(atoms, w)
        return _broadcast_stat(2.0 * np.sign(m) * np.sqrt(np.abs(m)), x)
    if v == "b2":
        return _broadcast_stat(spec.a(_expect(atoms, w)), x)
    if v == "b3":
        s = _broadcast_stat(_expect(spec.psi(atoms), w), x)
        return spec.a(x, s)
    # b4
    m = _expect(atoms, w)
    var = _expect((atoms - np.asarray(m)[..., None]) ** 2, w)
    return spec.a(x) * _broadcast_stat(np.maximum(var, 0.0) ** spec.eta_hat, x)


def _batch_shape(mu, x):
    atoms, w = _atoms(mu)
    if x.ndim == 0:
        return atoms.shape[:-1]
    return atoms.shape[:-1] + (1,)


def _broadcast_stat(stat, x):
    stat = np.asarray(stat, dtype=float)
    if x.ndim == 0:
        return stat
    return np.broadcast_to(stat[..., None], np.broadcast_shapes(stat.shape + (1,), x.shape))


# ----------------------------------------------------------------------------
# TV-Hoelder functionals and the spectral class


@dataclass(frozen=True)
class HolderCusp:
    """``u(mu) = -|mu(A) - s0|^delta`` with ``A = [lo, hi)``.

    ``|u| <= 1`` and ``|u(mu) - u(nu)| <= |mu(A) - nu(A)|^delta <= d_TV(mu, nu)^delta``,
    so u is delta-Hoelder in total variation with constant 1 by construction.
    """

    lo: float
    hi: float
    s0: float
    delta: float

    constant_value = None

    def mask(self, edges) -> np.ndarray:
        c = 0.5 * (np.asarray(edges)[1:] + np.asarray(edges)[:-1])
        return (c >= self.lo) & (c < self.hi)

    def mass(self, mu):
        if isinstance(mu, HistogramMeasure):
            return mu.mass(self.mask(mu.edges))
        atoms = np.asarray(getattr(mu, "values", mu), dtype=float)
        return ((atoms >= self.lo) & (atoms < self.hi)).mean(axis=-1)

    def of_mass(self, s):
        return -np.abs(np.asarray(s) - self.s0) ** self.delta

    def __call__(self, mu):
        return self.of_mass(self.mass(mu))

    def on_probs(self, probs, edges):
        return self.of_mass(np.asarray(probs) @ self.mask(edges).astype(float))


@dataclass(frozen=True)
class ConstantFunctional:
    value: float

    @property
    def constant_value(self):
        return self.value

    def __call__(self, mu):
        atoms, _ = _atoms(mu)
        return np.full(np.shape(atoms)[:-1], self.value) if np.ndim(atoms) > 1 else self.value

    def on_probs(self, probs, edges):
        return np.full(np.shape(probs)[:-1], self.value)


def bracket(k):
    return np.sqrt(1.0 + np.asarray(k, dtype=float) ** 2)


@dataclass(frozen=True)
class SpectralDriftSpec:
    """Spectral drift ``b(x, mu) = sum_j <k_j>^{-eta} [cos(k_j x) lre + sin(k_j x) lim] dk``.

    The real part is separable, ``lambda_re(k, mu) = Lambda(k) u(mu)``; the
    imaginary part is ``Lambda_im(k) u(mu)`` (zero by default).
    """

    eta: float
    delta: float
    grid: SpectralDecay
    Lambda: np.ndarray
    u: object
    Lambda_im: Optional[np.ndarray] = None
    _checked: bool = field(default=False, repr=False)

    def __post_init__(self):
        lam = np.asarray(self.Lambda, dtype=float)
        if lam.shape != (self.grid.size,):
            raise ConfigError("Lambda must be sampled on the k-grid")
        if np.any(lam < 0):
            raise ConfigError("Lambda must be non-negative")
        object.__setattr__(self, "Lambda", lam)
        if self.Lambda_im is not None:
            object.__setattr__(self, "Lambda_im", np.asarray(self.Lambda_im, dtype=float))
        if not 0 < self.delta <= 1:
            raise ConfigError(f"delta must lie in (0, 1], got {self.delta}")

    @classmethod
    def with_envelope(cls, eta, delta, grid, gamma, u, imag=False):
        """Envelope ``Lambda(k) = <k>^{-gamma}``; gamma > 1 makes it L1 and L2."""
        lam = bracket(grid.nodes) ** (-gamma)
        return cls(eta, delta, grid, lam, u, lam.copy() if imag else None)

    @property
    def alpha(self):
        return self.grid.alpha

    def validate(self):
        """Raise unless ``eta > 3/2 (1-delta)`` and ``3/2 < alpha <= eta / (1-delta)``."""
        eta, d, a = self.eta, self.delta, self.alpha
        if not eta > 1.5 * (1 - d):
            raise ConfigError(f"need eta > 3/2 (1 - delta): eta={eta}, delta={d}")
        if not a > 1.5:
            raise ConfigError(f"need alpha > 3/2, got {a}")
        if d < 1 and a > eta / (1 - d) * (1 + 1e-12):
            raise ConfigError(f"need alpha <= eta/(1-delta) = {eta / (1 - d):.4g}, got {a}")
        return self

    def weights(self):
        return bracket(self.grid.nodes) ** (-self.eta) * self.grid.dk

    def lambdas(self, mu):
        """``(lambda_re, lambda_im)`` of shape ``batch + (K,)``."""
        uval = np.asarray(self.u(mu), dtype=float)[..., None]
        lre = self.Lambda * uval
        lim = np.zeros_like(lre) if self.Lambda_im is None else self.Lambda_im * uval
        return lre, lim

    def holder_constant(self):
        """``sum <k>^{-eta} Lambda dk``: bounds sup_x |b| and the TV-Hoelder constant."""
        lam = self.Lambda if self.Lambda_im is None else self.Lambda + self.Lambda_im
        return float(np.sum(self.weights() * lam))

    def derivative_bounds(self, order=2):
        lam = self.Lambda if self.Lambda_im is None else self.Lambda + self.Lambda_im
        k = np.abs(self.grid.nodes)
        return np.array([np.sum(self.weights() * lam * k**i) for i in range(order + 1)])


def synthesize_spectral_b(spec: SpectralDriftSpec, x, mu=None, lambdas=None):
    """Evaluate the spectral drift at ``x``; precomputed ``lambdas`` skip the measure."""
    lre, lim = spec.lambdas(mu) if lambdas is None else lambdas
    w = spec.weights()
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 0
    xx = x[None] if scalar else x
    if lre.ndim > 1 and xx.ndim == 1:
        xx = xx[None, :]
    out = spectral_synthesis(xx, spec.grid.nodes[0], spec.grid.dk, w * lre, w * lim)
    return out[0] if scalar else out


# ----------------------------------------------------------------------------
# inf-convolution


@dataclass(frozen=True)
class MeasureFamily:
    """Finite candidate family on a fixed bin layout; ``probs`` has shape (F, B)."""

    edges: np.ndarray
    probs: np.ndarray

    def __len__(self):
        return self.probs.shape[0]

    def members(self):
        return [HistogramMeasure(self.edges, p / p.sum()) for p in self.probs]


def mixture_family(mu: HistogramMeasure, ts=None, include_uniform=True) -> MeasureFamily:
    """Mixtures ``(1-t) mu + t e`` with ``e`` a bin point mass or the uniform histogram.

    ``t = 0`` (``mu`` itself) is always included first.
    """
    if ts is None:
        ts = np.geomspace(1e-6, 1.0, 600)
    ts = np.asarray(ts, dtype=float)
    ts = ts[ts > 0]
    B = mu.probs.size
    ext = np.eye(B)
    if include_uniform:
        ext = np.vstack([ext, np.full(B, 1.0 / B)])
    P = (1 - ts)[:, None, None] * mu.probs + ts[:, None, None] * ext[None]
    P = np.vstack([mu.probs[None], P.reshape(-1, B)])
    return MeasureFamily(mu.edges, P)


def _family_values(u, family: MeasureFamily):
    if hasattr(u, "on_probs"):
        return np.asarray(u.on_probs(family.probs, family.edges), dtype=float)
    return np.array([float(u(m)) for m in family.members()])


def holder_infconv(u, mu: HistogramMeasure, eps, delta=None, family: MeasureFamily = None, return_argmin=False):
    """``min_{nu in F} u(nu) + d_TV(mu, nu)^2 / (8 eps)``.

    ``eps`` may be an array (one minimisation per entry) or ``inf``.  ``delta``
    is accepted for interface symmetry; the minimisation does not need it.
    """
    if family is None:
        family = mixture_family(mu)
    if len(family) == 0:
        raise ConfigError("inf-convolution over an empty family")
    if family.edges.shape != mu.edges.shape or not np.array_equal(family.edges, mu.edges):
        raise ConfigError("family and measure use different bin layouts")
    vals = _family_values(u, family)
    tv = np.abs(family.probs - mu.probs).sum(axis=1)
    eps = np.asarray(eps, dtype=float)
    with np.errstate(divide="ignore"):
        pen = np.where(np.isinf(eps)[..., None], 0.0, tv**2 / (8.0 * eps[..., None]))
    obj = vals + pen
    out = obj.min(axis=-1)
    if return_argmin:
        return out, obj.argmin(axis=-1)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class RegularizationParams:
    theta: float
    eps: np.ndarray

    @classmethod
    def from_spec(cls, spec: SpectralDriftSpec):
        """``theta = (alpha - eta) / delta`` and ``eps(k) = <k>^{-theta (2 - delta)}``."""
        a, eta, d = spec.alpha, spec.eta, spec.delta
        theta = (a - eta) / d
        if theta < 0:
            raise ConfigError(f"regularisation needs alpha >= eta (theta = {theta:.4g} < 0)")
        eps = bracket(spec.grid.nodes) ** (-theta * (2 - d))
        return cls(theta, eps)

    def lipschitz_exponent(self, delta):
        """Growth exponent theta (1 - delta) of the TV-Lipschitz constant of lambda-tilde."""
        return self.theta * (1 - delta)


@dataclass(frozen=True)
class RegularizedLambda:
    spec: SpectralDriftSpec
    params: RegularizationParams
    ts: Optional[np.ndarray] = None

    # the properties below let a RegularizedLambda stand in for a SpectralDriftSpec
    @property
    def grid(self):
        return self.spec.grid

    @property
    def u(self):
        return self.spec.u

    @property
    def alpha(self):
        return self.spec.alpha

    def weights(self):
        return self.spec.weights()

    def derivative_bounds(self, order=2):
        return self.spec.derivative_bounds(order)

    def u_eps(self, mu: HistogramMeasure):
        """``u^{eps(k)}(mu)`` for every k-node."""
        if self.spec.u.constant_value is not None:
            return np.full(self.params.eps.shape, float(self.spec.u.constant_value))
        fam = mixture_family(mu, self.ts)
        return holder_infconv(self.spec.u, mu, self.params.eps, self.spec.delta, fam)

    def lambdas(self, mu: HistogramMeasure):
        ue = self.u_eps(mu)
        lre = self.spec.Lambda * ue
        lim = np.zeros_like(lre) if self.spec.Lambda_im is None else self.spec.Lambda_im * ue
        return lre, lim

    def lipschitz_constant(self):
        """``sum <k>^{-eta + theta (1 - delta)} Lambda dk``: TV-Lipschitz constant of b-tilde."""
        sp = self.spec
        expo = -sp.eta + self.params.theta * (1 - sp.delta)
        return float(np.sum(bracket(sp.grid.nodes) ** expo * sp.Lambda * sp.grid.dk))


def regularize_lambda(spec: SpectralDriftSpec, ts=None) -> RegularizedLambda:
    return RegularizedLambda(spec, RegularizationParams.from_spec(spec), ts)


def lipschitz_exponent_gap(spec: SpectralDriftSpec) -> float:
    """``eta - theta (1 - delta) = (eta - alpha (1 - delta)) / delta``; non-negative under validate()."""
    th = (spec.alpha - spec.eta) / spec.delta
    return spec.eta - th * (1 - spec.delta)


# ----------------------------------------------------------------------------
# named coefficient functions for configs


def _gauss_bump(width):
    return lambda x: np.exp(-0.5 * (np.asarray(x) / width) ** 2)


A_FUNCTIONS = {
    "tanh": (np.tanh, (1.0, 1.0, 4 / (3 * math.sqrt(3)))),
    "sin": (np.sin, (1.0, 1.0, 1.0)),
    "cos": (np.cos, (1.0, 1.0, 1.0)),
    "identity": (lambda s: np.asarray(s, dtype=float), (math.inf,)),
}


def make_drift(variant, a="tanh", scale=1.0, eta_hat=0.25, width=0.5, constant=0.0):
    """Drift from named parts (used by the config layer).

    ``b1``: ``scale * tanh(x - y)``-type kernels use ``a(x - y)``; ``b3``:
    ``scale * a_name(E Y) * exp(-x^2 / (2 width^2))``.
    """
    if variant in ("zero", "peano"):
        return DriftSpec(variant, name=variant)
    if variant == "constant":
        return DriftSpec("constant", constant=constant, name="constant")
    if a not in A_FUNCTIONS:
        raise ConfigError(f"unknown coefficient function {a!r}; choose from {sorted(A_FUNCTIONS)}")
    fa, sups = A_FUNCTIONS[a]
    c = float(scale)
    bump = _gauss_bump(width)
    if variant == "b1":
        return DriftSpec("b1", a=lambda x, y: c * fa(x - y), derivative_sups=tuple(c * s for s in sups), name=f"b1:{a}")
    if variant == "b2":
        return DriftSpec("b2", a=lambda s: c * fa(s), derivative_sups=(c * sups[0],), name=f"b2:{a}")
    if variant == "b3":
        w = float(width)
        return DriftSpec(
            "b3", a=lambda x, s: c * fa(s) * bump(x), psi=lambda y: np.asarray(y, dtype=float),
            derivative_sups=(c * sups[0], c * sups[0] * math.exp(-0.5) / w, c * sups[0] / w**2),
            name=f"b3:{a}",
        )
    if variant == "b4":
        return DriftSpec(
            "b4", a=lambda x: c * bump(x), eta_hat=eta_hat,
            derivative_sups=(c, c * math.exp(-0.5) / width, c / width**2), name="b4",
        )
    raise ConfigError(f"drift variant {variant!r} cannot be built from named parts")
