"""Conditional-law map and Picard iteration under common noise.

For a candidate flow ``nu`` the map ``phi(nu)`` runs ``J`` copies of the
constant-mass system

    dz_j = b(z_j, nu_t) dt + sum_k f(k)[cos(k z_j) dW_re + sin(k z_j) dW_im] + d beta_j

with one frozen common sheet path and independent ``(xi_j, beta_j)``, and
returns the per-time histogram of the copies.  The same idiosyncratic draws
are reused across iterations, so ``phi`` is a deterministic map of ``nu``.
Distances between flows are the sup over the time grid of the per-time total
variation (factor-2 convention).
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, DivergenceError, GridError, InsufficientEnsembleWarning
from .kernels import SpectralDecay
from .noise import NoiseStream, sheet_from_normals
from .state import HistogramMeasure, histogram_probs
from .dynamics import SimConfig, step_interpolation


@dataclass(frozen=True)
class MeasureFlow:
    times: np.ndarray
    edges: np.ndarray
    probs: np.ndarray  # (len(times), bins)

    def __post_init__(self):
        if self.probs.shape != (len(self.times), len(self.edges) - 1):
            raise GridError("flow probabilities must be (times, bins)")

    @classmethod
    def constant(cls, hist: HistogramMeasure, times):
        times = np.asarray(times, dtype=float)
        return cls(times, hist.edges, np.tile(hist.probs, (times.size, 1)))

    def at(self, i) -> HistogramMeasure:
        return HistogramMeasure(self.edges, self.probs[i])

    def tv_series(self, other: "MeasureFlow") -> np.ndarray:
        if not np.array_equal(self.edges, other.edges) or self.probs.shape != other.probs.shape:
            raise GridError("flows live on different layouts")
        return np.abs(self.probs - other.probs).sum(axis=1)

    def sup_tv(self, other: "MeasureFlow") -> float:
        return float(self.tv_series(other).max())


@dataclass(frozen=True)
class EnsembleState:
    """Streams of one ensemble: common sheet, per-copy idiosyncratic noise and initial draws.

    Copy ``j`` uses ``NoiseStream(idio_seed, j, tag='idio')`` and
    ``NoiseStream(idio_seed, j, tag='xi')``; the common path uses ``common``.
    Disjoint keys make ``(xi, beta)`` independent of the sheet by construction.
    """

    J: int
    common: NoiseStream
    idio_seed: int
    xi_sampler: Callable = field(default=lambda z: 0.5 * z)

    def initial(self) -> np.ndarray:
        z = np.array([NoiseStream(self.idio_seed, j, tag="xi").normals(1)[0, 0] for j in range(self.J)])
        return self.xi_sampler(z)

    def idiosyncratic(self, steps: int, dt: float) -> np.ndarray:
        """``(J, steps)`` Brownian increments."""
        if steps == 0:
            return np.zeros((self.J, 0))
        return np.stack([NoiseStream(self.idio_seed, j, tag="idio").normals(1, steps)[:, 0]
                         for j in range(self.J)]) * math.sqrt(dt)

    def common_normals(self, steps: int, width: int) -> np.ndarray:
        return self.common.replay().normals(width, steps) if steps else np.zeros((0, width))


class _Draws:
    """Cache of an ensemble's draws so repeated phi evaluations cost no RNG time."""

    def __init__(self, ens: EnsembleState, cfg: SimConfig):
        self.xi = ens.initial()
        self.idio = ens.idiosyncratic(cfg.steps, cfg.dt)
        self.common = ens.common_normals(cfg.steps, 2 * cfg.decay.size)


def _simulate(nu: MeasureFlow, draws: _Draws, drift, cfg: SimConfig) -> MeasureFlow:
    z = draws.xi.copy()
    probs = np.empty((cfg.steps + 1, nu.edges.size - 1))
    probs[0] = histogram_probs(z, nu.edges)
    for s in range(cfg.steps):
        inc = sheet_from_normals(draws.common[s], cfg.decay, cfg.dt)
        z = step_interpolation(z, nu.at(s), drift, cfg.decay, inc, draws.idio[:, s])
        if not np.all(np.isfinite(z)):
            from .errors import NumericalBlowupError

            raise NumericalBlowupError(f"non-finite copy at step {s + 1}")
        probs[s + 1] = histogram_probs(z, nu.edges)
    return MeasureFlow(cfg.times(), nu.edges, probs)


def phi_map(nu: MeasureFlow, common: NoiseStream, drift, cfg: SimConfig, J: int, idio_seed: Optional[int] = None,
            xi_sampler: Optional[Callable] = None, _draws: Optional[_Draws] = None) -> MeasureFlow:
    """Histogram flow of ``J`` copies driven against ``nu`` on the frozen common path."""
    if J < 100:
        warnings.warn(f"J = {J} copies is too few for histogram statistics", InsufficientEnsembleWarning, stacklevel=2)
    if len(nu.times) != cfg.steps + 1:
        raise GridError("candidate flow must live on the simulation time grid")
    if _draws is None:
        ens = EnsembleState(J, common, cfg.seed if idio_seed is None else idio_seed,
                            xi_sampler or (lambda z: 0.5 * z))
        _draws = _Draws(ens, cfg)
    return _simulate(nu, _draws, drift, cfg)


@dataclass
class PicardDiagnostics:
    gaps: list
    entropy_max: list
    converged: bool
    iterations: int


def picard_iterate(initial: MeasureFlow, common: NoiseStream, drift, cfg: SimConfig, J: int, tol: float,
                   max_iter: int = 20, idio_seed: Optional[int] = None, xi_sampler: Optional[Callable] = None,
                   raise_on_divergence: bool = True):
    """Iterate ``nu <- phi(nu)`` until ``sup_t d_TV < tol``.

    Returns ``(flow, diagnostics)``; ``gaps[n]`` is the sup-TV distance between
    iterates ``n+1`` and ``n``.
    """
    if J < 100:
        warnings.warn(f"J = {J} copies is too few for histogram statistics", InsufficientEnsembleWarning, stacklevel=2)
    ens = EnsembleState(J, common, cfg.seed if idio_seed is None else idio_seed, xi_sampler or (lambda z: 0.5 * z))
    draws = _Draws(ens, cfg)
    nu = initial
    gaps, ent = [], []
    for it in range(max_iter):
        new = _simulate(nu, draws, drift, cfg)
        gaps.append(new.sup_tv(nu))
        ent.append(max(entropy_estimate(new.at(i), nu.at(i)) for i in range(len(nu.times))))
        nu = new
        if gaps[-1] < tol:
            return nu, PicardDiagnostics(gaps, ent, True, it + 1)
    if raise_on_divergence:
        raise DivergenceError(f"no convergence in {max_iter} iterations (last gap {gaps[-1]:.3g})", gaps)
    return nu, PicardDiagnostics(gaps, ent, False, max_iter)


def entropy_estimate(p: HistogramMeasure, q: HistogramMeasure) -> float:
    """Relative entropy ``sum p log(p / q)``, ``+inf`` when p is not absolutely continuous w.r.t. q."""
    if not np.array_equal(p.edges, q.edges):
        raise GridError("histograms live on different bin layouts")
    pp, qq = p.probs, q.probs
    pos = pp > 0
    if np.any(qq[pos] == 0):
        return math.inf
    return float(np.sum(pp[pos] * np.log(pp[pos] / qq[pos])))


def pinsker_holds(p: HistogramMeasure, q: HistogramMeasure) -> bool:
    """``(d_TV / 2)^2 <= H(p | q) / 2`` with ``d_TV = sum |p - q|``."""
    tv = float(np.abs(p.probs - q.probs).sum())
    return (0.5 * tv) ** 2 <= 0.5 * entropy_estimate(p, q) + 1e-15
